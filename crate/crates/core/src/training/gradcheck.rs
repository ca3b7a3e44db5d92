use ndarray::{Array2, Array4, ArrayD};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::CbamBlock;
use crate::backbone::Extractor;
use crate::nn::{join, Param, Parameters, Pass};

const STEP: f64 = 1e-5;
/// Denominator floor so vanishing gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorGradError {
    pub name: String,
    pub checked: usize,
    pub max_relative_error: f64,
    /// Flat index of the worst entry with its analytic and numeric values.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub tolerance: f64,
    pub entries: Vec<TensorGradError>,
    pub max_relative_error: f64,
    pub passed: bool,
}

impl GradientReport {
    /// Tensors whose worst entry exceeds the tolerance.
    pub fn failing(&self) -> Vec<&TensorGradError> {
        self.entries.iter().filter(|e| !(e.max_relative_error < self.tolerance)).collect()
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn with_param<M: Parameters<f64> + ?Sized, R>(m: &mut M, name: &str, f: impl FnOnce(&mut Param<f64>) -> R) -> R {
    let mut f = Some(f);
    let mut out = None;
    m.visit_mut("", &mut |n, p| {
        if n == name {
            out = Some((f.take().expect("unique name"))(p));
        }
    });
    out.expect("parameter exists")
}

/// Central-difference check of every weight tensor of `module`.
///
/// `objective(module, backward)` returns a scalar loss; when `backward` is set
/// it must also accumulate the analytic gradients. Each tensor has
/// `max(samples, ⌈fraction·len⌉)` entries (at most all of them) perturbed by ±1e-5.
pub fn verify_gradients<M: Parameters<f64> + ?Sized>(
    module: &mut M,
    objective: &mut dyn FnMut(&mut M, bool) -> f64,
    tolerance: f64,
    samples: usize,
    fraction: f64,
    seed: u64,
) -> GradientReport {
    module.zero_grad();
    objective(module, true);
    let mut analytic: Vec<(String, ArrayD<f64>)> = Vec::new();
    module.visit("", &mut |n, p| {
        if p.is_weight() {
            analytic.push((n.to_string(), p.grad.clone()));
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(analytic.len());
    for (name, grad) in &analytic {
        let flat: Vec<f64> = grad.iter().copied().collect();
        let wanted = samples.max((fraction * flat.len() as f64).ceil() as usize);
        let picks = sample(&mut rng, flat.len(), wanted.min(flat.len())).into_vec();
        let mut worst = TensorGradError {
            name: name.clone(),
            checked: picks.len(),
            max_relative_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &picks {
            let orig = with_param(module, name, |p| p.value.as_slice().expect("contiguous")[i]);
            let set = |m: &mut M, v: f64| with_param(m, name, |p| p.value.as_slice_mut().expect("contiguous")[i] = v);
            set(module, orig + STEP);
            let up = objective(module, false);
            set(module, orig - STEP);
            let down = objective(module, false);
            set(module, orig);
            let numeric = (up - down) / (2.0 * STEP);
            let err = relative_error(flat[i], numeric);
            if err > worst.max_relative_error || err.is_nan() {
                worst = TensorGradError { max_relative_error: err, worst_index: i, analytic: flat[i], numeric, ..worst };
            }
        }
        entries.push(worst);
    }
    let max_relative_error = entries.iter().map(|e| e.max_relative_error).fold(0.0, f64::max);
    let passed = entries.iter().all(|e| e.max_relative_error < tolerance);
    GradientReport { tolerance, entries, max_relative_error, passed }
}

/// A module plus its input, so the input gradient is checked like a weight.
struct WithInput<'a, M> {
    module: &'a mut M,
    input: Param<f64>,
}

impl<M: Parameters<f64>> Parameters<f64> for WithInput<'_, M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
        self.module.visit(prefix, f);
        f(&join(prefix, "input"), &self.input);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
        self.module.visit_mut(prefix, f);
        f(&join(prefix, "input"), &mut self.input);
    }
}

fn input4(p: &Param<f64>) -> Array4<f64> {
    p.value.clone().into_dimensionality().expect("4-D input")
}

/// Checks a CBAM block, including its input gradient, under `L = Σ r·block(x)` for a seeded random `r`.
pub fn check_cbam_block(block: &mut CbamBlock<f64>, x: &Array4<f64>, tolerance: f64, seed: u64) -> GradientReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b1e_c71e);
    let r = Array4::from_shape_fn(x.raw_dim(), |_| rng.gen_range(-1.0..1.0));
    let mut wrapped = WithInput { module: block, input: Param::weight(x.clone().into_dyn()) };
    let mut objective = |m: &mut WithInput<'_, CbamBlock<f64>>, backward: bool| {
        let x = input4(&m.input);
        let y = m.module.forward(&x, Pass::EVAL_RECORD).expect("valid input");
        let loss = (&y * &r).sum();
        if backward {
            let dx = m.module.backward(&r);
            m.input.grad += &dx.into_dyn();
        }
        loss
    };
    verify_gradients(&mut wrapped, &mut objective, tolerance, 12, 0.0, seed)
}

/// Checks an extractor end to end in training mode (batch statistics), including the input gradient,
/// on at least 1% of every tensor.
pub fn check_extractor(extractor: &mut Extractor<f64>, x: &Array4<f64>, tolerance: f64, seed: u64) -> GradientReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b1e_c71e);
    let r = Array2::from_shape_fn((x.shape()[0], extractor.feature_dim()), |_| rng.gen_range(-1.0..1.0));
    let mut wrapped = WithInput { module: extractor, input: Param::weight(x.clone().into_dyn()) };
    let mut objective = |m: &mut WithInput<'_, Extractor<f64>>, backward: bool| {
        let x = input4(&m.input);
        let f = m.module.forward(&x, Pass::TRAIN).expect("valid input");
        let loss = (&f * &r).sum();
        if backward {
            let dx = m.module.backward(&r);
            m.input.grad += &dx.into_dyn();
        }
        loss
    };
    verify_gradients(&mut wrapped, &mut objective, tolerance, 6, 0.01, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{BackwardFault, CbamConfig};
    use crate::backbone::BackboneSpec;

    fn input(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn cbam(seed: u64) -> CbamBlock<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CbamBlock::new(CbamConfig { channels: 8, reduction_ratio: 2, spatial_kernel: 3 }, &mut rng).unwrap()
    }

    #[test]
    fn cbam_block_gradients() {
        let mut b = cbam(11);
        let report = check_cbam_block(&mut b, &input((2, 8, 5, 5), 12), 1e-4, 13);
        assert!(report.passed, "{:?}", report.failing());
        assert!(report.entries.iter().any(|e| e.name == "input"));
    }

    #[test]
    fn broken_backward_is_caught() {
        let mut b = cbam(11);
        b.backward_fault = Some(BackwardFault::SpatialGateSlope);
        let report = check_cbam_block(&mut b, &input((2, 8, 5, 5), 12), 1e-4, 13);
        assert!(!report.passed);
        assert!(report.failing().iter().any(|e| e.name.starts_with("spatial")));
    }

    #[test]
    fn tiny_extractor_gradients() {
        let mut e = Extractor::<f64>::new(&BackboneSpec::tiny(true).with_seed(21)).unwrap();
        let report = check_extractor(&mut e, &input((3, 3, 32, 32), 22), 1e-3, 23);
        assert!(report.passed, "{:?}", report.failing());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }
}
