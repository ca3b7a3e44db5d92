use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, Ix2};
use rand::Rng;

use super::{he_uniform, join, Param, Parameters, Pass};
use crate::scalar::Scalar;

/// 2-D convolution over NCHW tensors, lowered to a single GEMM per batch.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<ConvCache<T>>,
}

#[derive(Clone, Debug)]
struct ConvCache<T> {
    cols: Array2<T>,
    input_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = he_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
        Self::from_weight(weight, bias, stride, padding)
    }

    /// Wraps an explicit weight tensor of shape `[out, in, k, k]`.
    pub fn from_weight(weight: ndarray::ArrayD<T>, bias: bool, stride: usize, padding: usize) -> Self {
        let s = weight.shape().to_vec();
        assert_eq!(s.len(), 4, "conv weight must be 4-D");
        assert_eq!(s[2], s[3], "square kernels only");
        let bias = bias.then(|| Param::weight(ndarray::ArrayD::zeros(ndarray::IxDyn(&[s[0]]))));
        Conv2d {
            weight: Param::weight(weight),
            bias,
            in_channels: s[1],
            out_channels: s[0],
            kernel: s[2],
            stride,
            padding,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn geometry(&self, dim: (usize, usize, usize, usize)) -> Geometry {
        let (n, c, h, w) = dim;
        let (oh, ow) = self.output_hw(h, w);
        Geometry { n, c, h, w, k: self.kernel, stride: self.stride, pad: self.padding, oh, ow }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        let rows = self.out_channels;
        let cols = self.in_channels * self.kernel * self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((rows, cols))
            .expect("contiguous conv weight")
            .into_dimensionality::<Ix2>()
            .expect("2-D view")
    }

    pub fn forward(&mut self, x: &Array4<T>, pass: Pass) -> Array4<T> {
        assert_eq!(x.shape()[1], self.in_channels, "conv input channels");
        assert!(
            x.shape()[2] + 2 * self.padding >= self.kernel && x.shape()[3] + 2 * self.padding >= self.kernel,
            "conv input smaller than kernel"
        );
        let dim = x.dim();
        let g = self.geometry(dim);
        let x = x.as_standard_layout();
        let cols = im2col(x.as_slice().expect("standard layout"), &g);
        let m = g.n * g.oh * g.ow;
        let mut y2 = Array2::<T>::zeros((self.out_channels, m));
        general_mat_mul(T::one(), &self.weight_matrix(), &cols, T::zero(), &mut y2);

        let hw = g.oh * g.ow;
        let mut out = Array4::<T>::zeros((g.n, self.out_channels, g.oh, g.ow));
        {
            let src = y2.as_slice().expect("contiguous");
            let dst = out.as_slice_mut().expect("contiguous");
            for o in 0..self.out_channels {
                let b = self.bias.as_ref().map_or(T::zero(), |b| b.value[[o]]);
                for n in 0..g.n {
                    let s = &src[o * m + n * hw..o * m + (n + 1) * hw];
                    let d = &mut dst[(n * self.out_channels + o) * hw..(n * self.out_channels + o + 1) * hw];
                    for (dv, &sv) in d.iter_mut().zip(s) {
                        *dv = sv + b;
                    }
                }
            }
        }
        self.cache = pass.record.then(|| ConvCache { cols, input_dim: dim, out_hw: (g.oh, g.ow) });
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let cache = self.cache.take().expect("conv backward without recorded forward");
        let g = self.geometry(cache.input_dim);
        assert_eq!((g.oh, g.ow), cache.out_hw);
        assert_eq!(dy.dim(), (g.n, self.out_channels, g.oh, g.ow), "conv output gradient shape");
        let hw = g.oh * g.ow;
        let m = g.n * hw;
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("contiguous");
        let mut dy2 = Array2::<T>::zeros((self.out_channels, m));
        {
            let d = dy2.as_slice_mut().expect("contiguous");
            for n in 0..g.n {
                for o in 0..self.out_channels {
                    let s = &dys[(n * self.out_channels + o) * hw..(n * self.out_channels + o + 1) * hw];
                    d[o * m + n * hw..o * m + (n + 1) * hw].copy_from_slice(s);
                }
            }
        }
        if let Some(bias) = self.bias.as_mut() {
            for o in 0..self.out_channels {
                let row = dy2.row(o);
                bias.grad[[o]] += row.iter().copied().sum::<T>();
            }
        }
        {
            let rows = self.out_channels;
            let cols_n = self.in_channels * self.kernel * self.kernel;
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((rows, cols_n))
                .expect("contiguous grad")
                .into_dimensionality::<Ix2>()
                .expect("2-D view");
            general_mat_mul(T::one(), &dy2, &cache.cols.t(), T::one(), &mut gw);
        }
        let mut dcols = Array2::<T>::zeros(cache.cols.raw_dim());
        general_mat_mul(T::one(), &self.weight_matrix().t(), &dy2, T::zero(), &mut dcols);
        let mut dx = Array4::<T>::zeros(cache.input_dim);
        col2im(dcols.as_slice().expect("contiguous"), &g, dx.as_slice_mut().expect("contiguous"));
        dx
    }
}

impl<T: Scalar> Parameters<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Output positions `o` along one axis whose input index `o·stride + k − pad` falls inside `[0, len)`.
fn valid_range(k: usize, stride: usize, pad: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o·stride + k − pad ≤ len − 1
    let hi = if len + pad > k { ((len + pad - 1 - k) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Rows are `(c, ki, kj)`, columns are `(n, oh, ow)`.
fn im2col<T: Scalar>(x: &[T], g: &Geometry) -> Array2<T> {
    let rows = g.c * g.k * g.k;
    let hw = g.oh * g.ow;
    let m = g.n * hw;
    let mut cols = Array2::<T>::zeros((rows, m));
    let out = cols.as_slice_mut().expect("contiguous");
    for c in 0..g.c {
        for ki in 0..g.k {
            let (h0, h1) = valid_range(ki, g.stride, g.pad, g.h, g.oh);
            for kj in 0..g.k {
                let (w0, w1) = valid_range(kj, g.stride, g.pad, g.w, g.ow);
                // kernel taps that only ever see padding
                if h0 >= h1 || w0 >= w1 {
                    continue;
                }
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut out[row * m..(row + 1) * m];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oh in h0..h1 {
                        let ih = oh * g.stride + ki - g.pad;
                        let src_row = &plane[ih * g.w..(ih + 1) * g.w];
                        let dst = &mut dst_row[n * hw + oh * g.ow + w0..n * hw + oh * g.ow + w1];
                        let first = w0 * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            dst.copy_from_slice(&src_row[first..first + dst.len()]);
                        } else {
                            for (d, s) in dst.iter_mut().zip(src_row[first..].iter().step_by(g.stride)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let hw = g.oh * g.ow;
    let m = g.n * hw;
    for c in 0..g.c {
        for ki in 0..g.k {
            let (h0, h1) = valid_range(ki, g.stride, g.pad, g.h, g.oh);
            for kj in 0..g.k {
                let (w0, w1) = valid_range(kj, g.stride, g.pad, g.w, g.ow);
                // kernel taps that only ever see padding
                if h0 >= h1 || w0 >= w1 {
                    continue;
                }
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * m..(row + 1) * m];
                for n in 0..g.n {
                    let plane = &mut dx[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oh in h0..h1 {
                        let ih = oh * g.stride + ki - g.pad;
                        let src = &src_row[n * hw + oh * g.ow + w0..n * hw + oh * g.ow + w1];
                        let first = w0 * g.stride + kj - g.pad;
                        let dst_row = &mut plane[ih * g.w..(ih + 1) * g.w];
                        for (d, s) in dst_row[first..].iter_mut().step_by(g.stride).zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}
