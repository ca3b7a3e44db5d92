use ndarray::{Array2, Array4};

use super::Pass;
use crate::scalar::Scalar;

/// Mean over the spatial axes: `N×C×H×W -> N×C`.
pub fn global_avg_pool<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let inv = T::one() / T::from_usize(h * w).expect("area");
    let x = x.as_standard_layout();
    let s = x.as_slice().expect("contiguous");
    Array2::from_shape_fn((n, c), |(b, ch)| {
        s[(b * c + ch) * h * w..(b * c + ch + 1) * h * w].iter().copied().sum::<T>() * inv
    })
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Array2<T>, h: usize, w: usize) -> Array4<T> {
    let (n, c) = dy.dim();
    let inv = T::one() / T::from_usize(h * w).expect("area");
    Array4::from_shape_fn((n, c, h, w), |(b, ch, _, _)| dy[[b, ch]] * inv)
}

/// Max pooling with square window and symmetric padding (padding never wins the max).
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<(Vec<usize>, (usize, usize, usize, usize))>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d { kernel, stride, padding, cache: None }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward<T: Scalar>(&mut self, x: &Array4<T>, pass: Pass) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.output_hw(h, w);
        let x = x.as_standard_layout();
        let s = x.as_slice().expect("contiguous");
        let mut out = Array4::<T>::zeros((n, c, oh, ow));
        let mut arg = vec![0usize; n * c * oh * ow];
        let o = out.as_slice_mut().expect("contiguous");
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for a in 0..self.kernel {
                        let ih = (i * self.stride + a) as isize - self.padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for b in 0..self.kernel {
                            let iw = (j * self.stride + b) as isize - self.padding as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let idx = base + ih as usize * w + iw as usize;
                            if best_idx == usize::MAX || s[idx] > best {
                                best = s[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let k = plane * oh * ow + i * ow + j;
                    o[k] = best;
                    arg[k] = best_idx;
                }
            }
        }
        self.cache = pass.record.then_some((arg, (n, c, h, w)));
        out
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Array4<T>) -> Array4<T> {
        let (arg, dim) = self.cache.take().expect("max-pool backward without recorded forward");
        let mut dx = Array4::<T>::zeros(dim);
        let d = dx.as_slice_mut().expect("contiguous");
        let dy = dy.as_standard_layout();
        for (k, &g) in dy.as_slice().expect("contiguous").iter().enumerate() {
            d[arg[k]] += g;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_halves_resolution() {
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let mut mp = MaxPool2d::new(3, 2, 1);
        let y = mp.forward(&x, Pass::TRAIN);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        assert_eq!(y[[0, 0, 1, 1]], 15.0);
        let dx = mp.backward(&Array4::from_elem((1, 1, 2, 2), 1.0));
        assert_eq!(dx.sum(), 4.0);
        assert_eq!(dx[[0, 0, 3, 3]], 1.0);
    }

    #[test]
    fn gap_backward_spreads_evenly() {
        let x = Array4::from_shape_fn((2, 3, 2, 2), |(b, c, i, j)| (b + c + i + j) as f64);
        let y = global_avg_pool(&x);
        assert_eq!(y[[1, 2, ]], 4.0);
        let dx = global_avg_pool_backward(&Array2::from_elem((2, 3), 4.0), 2, 2);
        assert!(dx.iter().all(|&v| v == 1.0));
    }
}
