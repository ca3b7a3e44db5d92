use std::collections::HashMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::scalar::Scalar;

/// Adaptive-moment hyperparameters; moment coefficients and epsilon are the method defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 2e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: i32,
    moments: HashMap<String, (ArrayD<T>, ArrayD<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, moments: HashMap::new() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update of every learnable tensor reachable from `module`.
    pub fn step<M: Parameters<T> + ?Sized>(&mut self, module: &mut M) {
        self.step += 1;
        let c = self.config;
        let lr = T::lit(c.learning_rate);
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let eps = T::lit(c.epsilon);
        let bc1 = T::one() - b1.powi(self.step);
        let bc2 = T::one() - b2.powi(self.step);
        let moments = &mut self.moments;
        module.visit_mut("", &mut |name, p| {
            if !p.is_weight() {
                return;
            }
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            ndarray::Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|w, &g, m, v| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            });
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{join, Param};
    use ndarray::IxDyn;

    struct Quadratic(Param<f64>);

    impl Parameters<f64> for Quadratic {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f(&join(prefix, "x"), &self.0);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f(&join(prefix, "x"), &mut self.0);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut q = Quadratic(Param::weight(ArrayD::from_elem(IxDyn(&[2]), 1.0)));
        q.0.grad[[0]] = 3.0;
        q.0.grad[[1]] = -0.5;
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() });
        opt.step(&mut q);
        // Bias-corrected first step is lr * sign(g).
        assert!((q.0.value[[0]] - 0.9).abs() < 1e-6);
        assert!((q.0.value[[1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut q = Quadratic(Param::weight(ArrayD::from_elem(IxDyn(&[1]), 5.0)));
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.05, ..Default::default() });
        for _ in 0..2000 {
            q.zero_grad();
            let x = q.0.value[[0]];
            q.0.grad[[0]] = 2.0 * (x - 1.5);
            opt.step(&mut q);
        }
        assert!((q.0.value[[0]] - 1.5).abs() < 1e-3);
    }
}
