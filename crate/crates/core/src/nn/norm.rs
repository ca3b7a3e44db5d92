use ndarray::{Array2, Array4, ArrayD, IxDyn};

use super::{join, Param, Parameters, Pass};
use crate::scalar::Scalar;

/// Per-channel batch normalization for `N×C×H×W` and `N×C` inputs.
///
/// Training mode normalizes with biased batch statistics and updates the
/// running estimates (unbiased variance); inference mode uses the running
/// estimates only.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
    dims: (usize, usize, usize),
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::weight(ArrayD::from_elem(IxDyn(&[channels]), T::one())),
            beta: Param::weight(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Param::buffer(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(ArrayD::from_elem(IxDyn(&[channels]), T::one())),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward4(&mut self, x: &Array4<T>, pass: Pass) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let x = x.as_standard_layout();
        let out = self.forward_raw(x.as_slice().expect("contiguous"), (n, c, h * w), pass);
        Array4::from_shape_vec((n, c, h, w), out).expect("shape")
    }

    pub fn forward2(&mut self, x: &Array2<T>, pass: Pass) -> Array2<T> {
        let (n, c) = x.dim();
        let x = x.as_standard_layout();
        let out = self.forward_raw(x.as_slice().expect("contiguous"), (n, c, 1), pass);
        Array2::from_shape_vec((n, c), out).expect("shape")
    }

    pub fn backward4(&mut self, dy: &Array4<T>) -> Array4<T> {
        let dim = dy.dim();
        let dy = dy.as_standard_layout();
        let dx = self.backward_raw(dy.as_slice().expect("contiguous"));
        Array4::from_shape_vec(dim, dx).expect("shape")
    }

    pub fn backward2(&mut self, dy: &Array2<T>) -> Array2<T> {
        let dim = dy.dim();
        let dy = dy.as_standard_layout();
        let dx = self.backward_raw(dy.as_slice().expect("contiguous"));
        Array2::from_shape_vec(dim, dx).expect("shape")
    }

    fn forward_raw(&mut self, x: &[T], dims: (usize, usize, usize), pass: Pass) -> Vec<T> {
        let (n, c, s) = dims;
        assert_eq!(c, self.channels(), "batch-norm channel count");
        let eps = T::lit(self.eps);
        let (mean, inv_std) = if pass.training {
            let count = n * s;
            assert!(count > 1, "batch statistics need more than one value per channel");
            let cnt = T::from_usize(count).expect("count");
            let mom = T::lit(self.momentum);
            let mut mean = vec![T::zero(); c];
            for (k, chunk) in x.chunks(s).enumerate() {
                mean[k % c] += chunk.iter().copied().sum::<T>();
            }
            mean.iter_mut().for_each(|m| *m /= cnt);
            let mut sq = vec![T::zero(); c];
            for (k, chunk) in x.chunks(s).enumerate() {
                let mu = mean[k % c];
                sq[k % c] += chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
            let rm = self.running_mean.value.as_slice_mut().expect("contiguous");
            let rv = self.running_var.value.as_slice_mut().expect("contiguous");
            let mut inv_std = vec![T::zero(); c];
            for ch in 0..c {
                inv_std[ch] = T::one() / (sq[ch] / cnt + eps).sqrt();
                rm[ch] = (T::one() - mom) * rm[ch] + mom * mean[ch];
                rv[ch] = (T::one() - mom) * rv[ch] + mom * sq[ch] / (cnt - T::one());
            }
            (mean, inv_std)
        } else {
            let mean = self.running_mean.value.iter().copied().collect::<Vec<_>>();
            let inv_std = self.running_var.value.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, inv_std)
        };
        let gamma = self.gamma.value.as_slice().expect("contiguous");
        let beta = self.beta.value.as_slice().expect("contiguous");
        let mut xhat = x.to_vec();
        for (k, chunk) in xhat.chunks_mut(s).enumerate() {
            let (mu, is) = (mean[k % c], inv_std[k % c]);
            chunk.iter_mut().for_each(|v| *v = (*v - mu) * is);
        }
        let mut out = xhat.clone();
        for (k, chunk) in out.chunks_mut(s).enumerate() {
            let (g, b) = (gamma[k % c], beta[k % c]);
            chunk.iter_mut().for_each(|v| *v = g * *v + b);
        }
        self.cache = pass.record.then(|| BnCache { xhat, inv_std, batch_stats: pass.training, dims });
        out
    }

    fn backward_raw(&mut self, dy: &[T]) -> Vec<T> {
        let cache = self.cache.take().expect("batch-norm backward without recorded forward");
        let (n, c, s) = cache.dims;
        assert_eq!(dy.len(), n * c * s, "batch-norm gradient shape");
        let cnt = T::from_usize(n * s).expect("count");
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for (k, (d, xh)) in dy.chunks(s).zip(cache.xhat.chunks(s)).enumerate() {
            sum_dy[k % c] += d.iter().copied().sum::<T>();
            sum_dy_xhat[k % c] += d.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
        }
        let gamma = self.gamma.value.as_slice().expect("contiguous");
        {
            let gg = self.gamma.grad.as_slice_mut().expect("contiguous");
            let bg = self.beta.grad.as_slice_mut().expect("contiguous");
            for ch in 0..c {
                gg[ch] += sum_dy_xhat[ch];
                bg[ch] += sum_dy[ch];
            }
        }
        let mut dx = dy.to_vec();
        for (k, (d, xh)) in dx.chunks_mut(s).zip(cache.xhat.chunks(s)).enumerate() {
            let ch = k % c;
            let scale = gamma[ch] * cache.inv_std[ch];
            if cache.batch_stats {
                let (m1, m2) = (sum_dy[ch] / cnt, sum_dy_xhat[ch] / cnt);
                d.iter_mut().zip(xh).for_each(|(v, &x)| *v = scale * (*v - m1 - x * m2));
            } else {
                d.iter_mut().for_each(|v| *v = scale * *v);
            }
        }
        dx
    }
}

impl<T: Scalar> Parameters<T> for BatchNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn training_output_is_standardized() {
        let mut bn = BatchNorm::<f64>::new(2);
        let x = array![[1.0, 10.0], [3.0, 20.0], [5.0, 30.0]];
        let y = bn.forward2(&x, Pass::TRAIN);
        for col in y.columns() {
            assert!(col.mean().unwrap().abs() < 1e-12);
            let var = col.mapv(|v| v * v).mean().unwrap();
            assert!((var - 1.0).abs() < 1e-4);
        }
        // running mean moved 10% toward the batch mean
        assert!((bn.running_mean.value[[0]] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.running_mean.value[[0]] = 2.0;
        bn.running_var.value[[0]] = 4.0 - 1e-5;
        let y = bn.forward2(&array![[4.0], [0.0]], Pass::EVAL);
        assert!((y[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((y[[1, 0]] + 1.0).abs() < 1e-12);
    }
}
