//! Convolutional block attention: a channel gate followed by a spatial gate.
//!
//! The channel gate is `σ(MLP(avgpool F) + MLP(maxpool F) + b)` where the MLP
//! is `expand · relu(reduce · v)` and is shared between the two descriptors.
//! The spatial gate is `σ(conv_k([mean_c F'; max_c F']) + b)` with same
//! padding. The block output is `F'' = F' ⊙ spatial(F')` with
//! `F' = F ⊙ channel(F)`.

use ndarray::{Array2, Array4, ArrayD, Axis, Ix2, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, join, Conv2d, Param, Parameters, Pass};
use crate::scalar::{sigmoid, Scalar};

pub const DEFAULT_REDUCTION_RATIO: usize = 16;
pub const DEFAULT_SPATIAL_KERNEL: usize = 7;

/// Shape of one attention insertion point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CbamConfig {
    pub channels: usize,
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
}

impl CbamConfig {
    pub fn new(channels: usize) -> Self {
        CbamConfig {
            channels,
            reduction_ratio: DEFAULT_REDUCTION_RATIO,
            spatial_kernel: DEFAULT_SPATIAL_KERNEL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.reduction_ratio == 0 || self.channels % self.reduction_ratio != 0 {
            return Err(Error::InvalidConfig(format!(
                "reduction ratio {} must divide channel count {}",
                self.reduction_ratio, self.channels
            )));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "spatial attention kernel must be odd, got {}",
                self.spatial_kernel
            )));
        }
        Ok(())
    }
}

/// Shared bottleneck MLP of the channel gate.
#[derive(Clone, Debug)]
pub struct ChannelAttentionParams<T> {
    /// `C/r × C`
    pub reduce: Param<T>,
    /// `C × C/r`
    pub expand: Param<T>,
    /// Added once to the summed descriptor responses before the sigmoid.
    pub gate_bias: Param<T>,
    pub reduction_ratio: usize,
}

impl<T: Scalar> ChannelAttentionParams<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction_ratio: usize, rng: &mut R) -> Result<Self> {
        CbamConfig { channels, reduction_ratio, spatial_kernel: 1 }.validate()?;
        let hidden = channels / reduction_ratio;
        Ok(ChannelAttentionParams {
            reduce: Param::weight(fan_in_uniform(&[hidden, channels], channels, rng)),
            expand: Param::weight(fan_in_uniform(&[channels, hidden], hidden, rng)),
            gate_bias: Param::weight(ArrayD::zeros(IxDyn(&[channels]))),
            reduction_ratio,
        })
    }

    /// Builds from explicit matrices (`reduce`: `C/r × C`, `expand`: `C × C/r`).
    pub fn from_matrices(reduce: Array2<T>, expand: Array2<T>) -> Result<Self> {
        let (hidden, channels) = reduce.dim();
        if expand.dim() != (channels, hidden) || hidden == 0 || channels % hidden != 0 {
            return Err(Error::Shape(format!(
                "channel MLP matrices {:?} and {:?} are not a C/r×C, C×C/r pair",
                reduce.dim(),
                expand.dim()
            )));
        }
        Ok(ChannelAttentionParams {
            reduce: Param::weight(reduce.into_dyn()),
            expand: Param::weight(expand.into_dyn()),
            gate_bias: Param::weight(ArrayD::zeros(IxDyn(&[channels]))),
            reduction_ratio: channels / hidden,
        })
    }

    pub fn channels(&self) -> usize {
        self.reduce.value.shape()[1]
    }

    fn reduce_m(&self) -> ndarray::ArrayView2<'_, T> {
        self.reduce.value.view().into_dimensionality::<Ix2>().expect("2-D")
    }

    fn expand_m(&self) -> ndarray::ArrayView2<'_, T> {
        self.expand.value.view().into_dimensionality::<Ix2>().expect("2-D")
    }
}

/// `k×k` convolution from the stacked `[mean; max]` maps to one gate logit.
#[derive(Clone, Debug)]
pub struct SpatialAttentionParams<T> {
    pub conv: Conv2d<T>,
}

impl<T: Scalar> SpatialAttentionParams<T> {
    pub fn new<R: Rng + ?Sized>(kernel: usize, rng: &mut R) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!("spatial attention kernel must be odd, got {kernel}")));
        }
        let w = fan_in_uniform(&[1, 2, kernel, kernel], 2 * kernel * kernel, rng);
        Ok(SpatialAttentionParams { conv: Conv2d::from_weight(w, true, 1, kernel / 2) })
    }

    /// `kernel` has shape `2×k×k` (mean plane first).
    pub fn from_kernel(kernel: ndarray::Array3<T>, bias: T) -> Result<Self> {
        let (two, k, k2) = kernel.dim();
        if two != 2 || k != k2 {
            return Err(Error::Shape(format!("spatial kernel must be 2×k×k, got {:?}", kernel.dim())));
        }
        if k % 2 == 0 {
            return Err(Error::InvalidConfig(format!("spatial attention kernel must be odd, got {k}")));
        }
        let w = kernel.into_shape_with_order((1, 2, k, k)).expect("reshape").into_dyn();
        let mut conv = Conv2d::from_weight(w, true, 1, k / 2);
        conv.bias.as_mut().expect("bias").value[[0]] = bias;
        Ok(SpatialAttentionParams { conv })
    }

    pub fn kernel_size(&self) -> usize {
        self.conv.kernel
    }

    pub fn bias(&self) -> T {
        self.conv.bias.as_ref().expect("spatial gate has a bias").value[[0]]
    }

    pub fn set_bias(&mut self, v: T) {
        self.conv.bias.as_mut().expect("spatial gate has a bias").value[[0]] = v;
    }
}

/// Negative-control switch for gradient checking.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Drops the sigmoid derivative of the spatial gate.
    SpatialGateSlope,
}

#[derive(Clone, Debug)]
pub struct CbamBlock<T> {
    pub channel: ChannelAttentionParams<T>,
    pub spatial: SpatialAttentionParams<T>,
    #[doc(hidden)]
    pub backward_fault: Option<BackwardFault>,
    cache: Option<CbamCache<T>>,
}

#[derive(Clone, Debug)]
struct ChannelTrace<T> {
    avg: Array2<T>,
    max: Array2<T>,
    max_idx: Vec<usize>,
    hidden_avg: Array2<T>,
    hidden_max: Array2<T>,
    gate: Array2<T>,
}

#[derive(Clone, Debug)]
struct SpatialTrace<T> {
    max_channel: Vec<usize>,
    gate: Array4<T>,
}

#[derive(Clone, Debug)]
struct CbamCache<T> {
    input: Array4<T>,
    gated: Array4<T>,
    channel: ChannelTrace<T>,
    spatial: SpatialTrace<T>,
}

fn channel_forward<T: Scalar>(f: &Array4<T>, p: &ChannelAttentionParams<T>) -> Result<ChannelTrace<T>> {
    let (n, c, h, w) = f.dim();
    if c != p.channels() {
        return Err(Error::Shape(format!("channel attention expects {} channels, got {c}", p.channels())));
    }
    let hw = h * w;
    let f = f.as_standard_layout();
    let s = f.as_slice().expect("contiguous");
    let inv = T::one() / T::from_usize(hw).expect("area");
    let mut avg = Array2::<T>::zeros((n, c));
    let mut max = Array2::<T>::zeros((n, c));
    let mut max_idx = vec![0usize; n * c];
    for b in 0..n {
        for ch in 0..c {
            let plane = &s[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let mut best = plane[0];
            let mut bi = 0;
            let mut sum = T::zero();
            for (i, &v) in plane.iter().enumerate() {
                sum += v;
                if v > best {
                    best = v;
                    bi = i;
                }
            }
            avg[[b, ch]] = sum * inv;
            max[[b, ch]] = best;
            max_idx[b * c + ch] = bi;
        }
    }
    let mlp_hidden = |d: &Array2<T>| {
        let mut h = d.dot(&p.reduce_m().t());
        crate::nn::relu_inplace(&mut h);
        h
    };
    let hidden_avg = mlp_hidden(&avg);
    let hidden_max = mlp_hidden(&max);
    let bias = p.gate_bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1-D");
    let mut gate = hidden_avg.dot(&p.expand_m().t()) + hidden_max.dot(&p.expand_m().t());
    gate += &bias;
    gate.mapv_inplace(sigmoid);
    Ok(ChannelTrace { avg, max, max_idx, hidden_avg, hidden_max, gate })
}

fn spatial_descriptor<T: Scalar>(f: &Array4<T>) -> (Array4<T>, Vec<usize>) {
    let (n, c, h, w) = f.dim();
    let hw = h * w;
    let f = f.as_standard_layout();
    let s = f.as_slice().expect("contiguous");
    let inv = T::one() / T::from_usize(c).expect("channels");
    let mut desc = Array4::<T>::zeros((n, 2, h, w));
    let mut arg = vec![0usize; n * hw];
    {
        let d = desc.as_slice_mut().expect("contiguous");
        for b in 0..n {
            for i in 0..hw {
                let mut sum = T::zero();
                let mut best = s[(b * c) * hw + i];
                let mut bi = 0;
                for ch in 0..c {
                    let v = s[(b * c + ch) * hw + i];
                    sum += v;
                    if v > best {
                        best = v;
                        bi = ch;
                    }
                }
                d[(b * 2) * hw + i] = sum * inv;
                d[(b * 2 + 1) * hw + i] = best;
                arg[b * hw + i] = bi;
            }
        }
    }
    (desc, arg)
}

fn apply_channel_gate<T: Scalar>(f: &Array4<T>, gate: &Array2<T>) -> Array4<T> {
    let (_, _, h, w) = f.dim();
    let mut out = f.as_standard_layout().into_owned();
    let g = gate.as_standard_layout();
    let gs = g.as_slice().expect("contiguous");
    for (plane, &gv) in out.as_slice_mut().expect("contiguous").chunks_mut(h * w).zip(gs) {
        plane.iter_mut().for_each(|v| *v *= gv);
    }
    out
}

fn apply_spatial_gate<T: Scalar>(f: &Array4<T>, gate: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = f.dim();
    let hw = h * w;
    let mut out = f.as_standard_layout().into_owned();
    let g = gate.as_standard_layout();
    let gs = g.as_slice().expect("contiguous");
    for (k, plane) in out.as_slice_mut().expect("contiguous").chunks_mut(hw).enumerate() {
        let row = &gs[(k / c) * hw..(k / c + 1) * hw];
        plane.iter_mut().zip(row).for_each(|(v, &m)| *v *= m);
    }
    debug_assert_eq!(out.len(), n * c * hw);
    out
}

/// Channel gate `σ(MLP(avg) + MLP(max) + b)` for each map in the batch; `N×C`.
pub fn channel_attention<T: Scalar>(f: &Array4<T>, params: &ChannelAttentionParams<T>) -> Result<Array2<T>> {
    Ok(channel_forward(f, params)?.gate)
}

/// Spatial gate map `σ(conv([mean_c; max_c]) + b)`; `N×1×H×W`.
pub fn spatial_attention<T: Scalar>(f: &Array4<T>, params: &SpatialAttentionParams<T>) -> Result<Array4<T>> {
    if f.shape()[1] == 0 || f.shape()[2] == 0 || f.shape()[3] == 0 {
        return Err(Error::Shape(format!("empty feature map {:?}", f.shape())));
    }
    let (desc, _) = spatial_descriptor(f);
    let mut conv = params.conv.clone();
    let mut logits = conv.forward(&desc, Pass::EVAL);
    logits.mapv_inplace(sigmoid);
    Ok(logits)
}

/// Channel gating followed by spatial gating; output shape equals input shape.
pub fn cbam_forward<T: Scalar>(f: &Array4<T>, block: &CbamBlock<T>) -> Result<Array4<T>> {
    let gate = channel_attention(f, &block.channel)?;
    let gated = apply_channel_gate(f, &gate);
    let map = spatial_attention(&gated, &block.spatial)?;
    Ok(apply_spatial_gate(&gated, &map))
}

impl<T: Scalar> CbamBlock<T> {
    pub fn new<R: Rng + ?Sized>(config: CbamConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(CbamBlock {
            channel: ChannelAttentionParams::new(config.channels, config.reduction_ratio, rng)?,
            spatial: SpatialAttentionParams::new(config.spatial_kernel, rng)?,
            backward_fault: None,
            cache: None,
        })
    }

    pub fn from_parts(channel: ChannelAttentionParams<T>, spatial: SpatialAttentionParams<T>) -> Self {
        CbamBlock { channel, spatial, backward_fault: None, cache: None }
    }

    pub fn config(&self) -> CbamConfig {
        CbamConfig {
            channels: self.channel.channels(),
            reduction_ratio: self.channel.reduction_ratio,
            spatial_kernel: self.spatial.kernel_size(),
        }
    }

    /// Sets both gate biases; large positive values drive every gate toward 1.
    pub fn set_gate_biases(&mut self, bias: T) {
        self.channel.gate_bias.value.fill(bias);
        self.spatial.set_bias(bias);
    }

    /// Channel and spatial gate values from the most recent recorded forward.
    pub fn last_gates(&self) -> Option<(&Array2<T>, &Array4<T>)> {
        self.cache.as_ref().map(|c| (&c.channel.gate, &c.spatial.gate))
    }

    pub fn forward(&mut self, f: &Array4<T>, pass: Pass) -> Result<Array4<T>> {
        let channel = channel_forward(f, &self.channel)?;
        let gated = apply_channel_gate(f, &channel.gate);
        let (desc, max_channel) = spatial_descriptor(&gated);
        let mut logits = self.spatial.conv.forward(&desc, pass);
        logits.mapv_inplace(sigmoid);
        let out = apply_spatial_gate(&gated, &logits);
        if pass.record {
            self.cache = Some(CbamCache {
                input: f.to_owned(),
                gated,
                channel,
                spatial: SpatialTrace { max_channel, gate: logits },
            });
        } else {
            self.cache = None;
        }
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let cache = self.cache.take().expect("attention backward without recorded forward");
        let (n, c, h, w) = cache.input.dim();
        let hw = h * w;
        assert_eq!(dy.dim(), (n, c, h, w), "attention output gradient shape");

        // Spatial gate.
        let mut d_gated = apply_spatial_gate(dy, &cache.spatial.gate);
        let mut d_logit = Array4::<T>::zeros((n, 1, h, w));
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = T::zero();
                    for ch in 0..c {
                        acc += dy[[b, ch, i, j]] * cache.gated[[b, ch, i, j]];
                    }
                    let m = cache.spatial.gate[[b, 0, i, j]];
                    d_logit[[b, 0, i, j]] = match self.backward_fault {
                        Some(BackwardFault::SpatialGateSlope) => acc,
                        None => acc * m * (T::one() - m),
                    };
                }
            }
        }
        let d_desc = self.spatial.conv.backward(&d_logit);
        let inv_c = T::one() / T::from_usize(c).expect("channels");
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let dm = d_desc[[b, 0, i, j]] * inv_c;
                    for ch in 0..c {
                        d_gated[[b, ch, i, j]] += dm;
                    }
                    let mc = cache.spatial.max_channel[b * hw + i * w + j];
                    d_gated[[b, mc, i, j]] += d_desc[[b, 1, i, j]];
                }
            }
        }

        // Channel gate.
        let ch_trace = &cache.channel;
        let mut dx = apply_channel_gate(&d_gated, &ch_trace.gate);
        let mut d_s = Array2::<T>::zeros((n, c));
        for b in 0..n {
            for ch in 0..c {
                let mut acc = T::zero();
                for i in 0..h {
                    for j in 0..w {
                        acc += d_gated[[b, ch, i, j]] * cache.input[[b, ch, i, j]];
                    }
                }
                let g = ch_trace.gate[[b, ch]];
                d_s[[b, ch]] = acc * g * (T::one() - g);
            }
        }
        self.channel.gate_bias.grad.zip_mut_with(&d_s.sum_axis(Axis(0)).into_dyn(), |g, &d| *g += d);
        let expand = self.channel.expand_m().to_owned();
        let reduce = self.channel.reduce_m().to_owned();
        let mut d_expand = Array2::<T>::zeros(expand.raw_dim());
        let mut d_reduce = Array2::<T>::zeros(reduce.raw_dim());
        let mut d_desc_c = [Array2::<T>::zeros((n, c)), Array2::<T>::zeros((n, c))];
        for (k, (hidden, input)) in [(&ch_trace.hidden_avg, &ch_trace.avg), (&ch_trace.hidden_max, &ch_trace.max)]
            .into_iter()
            .enumerate()
        {
            d_expand += &d_s.t().dot(hidden);
            let mut d_hidden = d_s.dot(&expand);
            crate::nn::relu_backward_inplace(&mut d_hidden, hidden);
            d_reduce += &d_hidden.t().dot(input);
            d_desc_c[k] = d_hidden.dot(&reduce);
        }
        self.channel.expand.grad.zip_mut_with(&d_expand.into_dyn(), |g, &d| *g += d);
        self.channel.reduce.grad.zip_mut_with(&d_reduce.into_dyn(), |g, &d| *g += d);
        let inv_hw = T::one() / T::from_usize(hw).expect("area");
        for b in 0..n {
            for ch in 0..c {
                let da = d_desc_c[0][[b, ch]] * inv_hw;
                for i in 0..h {
                    for j in 0..w {
                        dx[[b, ch, i, j]] += da;
                    }
                }
                let mi = ch_trace.max_idx[b * c + ch];
                dx[[b, ch, mi / w, mi % w]] += d_desc_c[1][[b, ch]];
            }
        }
        dx
    }
}

impl<T: Scalar> Parameters<T> for CbamBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "channel.reduce"), &self.channel.reduce);
        f(&join(prefix, "channel.expand"), &self.channel.expand);
        f(&join(prefix, "channel.gate_bias"), &self.channel.gate_bias);
        self.spatial.conv.visit(&join(prefix, "spatial"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "channel.reduce"), &mut self.channel.reduce);
        f(&join(prefix, "channel.expand"), &mut self.channel.expand);
        f(&join(prefix, "channel.gate_bias"), &mut self.channel.gate_bias);
        self.spatial.conv.visit_mut(&join(prefix, "spatial"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn random_map(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn block(c: usize, r: usize, k: usize, seed: u64) -> CbamBlock<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CbamBlock::new(CbamConfig { channels: c, reduction_ratio: r, spatial_kernel: k }, &mut rng).unwrap()
    }

    #[test]
    fn zero_mlp_gives_half() {
        let p = ChannelAttentionParams::from_matrices(Array2::zeros((2, 4)), Array2::zeros((4, 2))).unwrap();
        let g = channel_attention(&random_map((3, 4, 5, 5), 1), &p).unwrap();
        assert!(g.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_mlp_hand_case() {
        // channel 0: avg 0.1, max 0.3; channel 1: avg -0.2, max 0.0
        let f = array![[[[0.3, 0.1], [0.0, 0.0]], [[0.0, -0.2], [-0.3, -0.3]]]];
        let p = ChannelAttentionParams::from_matrices(Array2::eye(2), Array2::eye(2)).unwrap();
        let g = channel_attention(&f, &p).unwrap();
        assert!((g[[0, 0]] - sig(0.4)).abs() < 1e-12);
        // the hidden rectifier zeroes both negative-or-zero descriptors
        assert!((g[[0, 1]] - sig(0.0)).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_error() {
        let p = ChannelAttentionParams::<f64>::from_matrices(Array2::eye(2), Array2::eye(2)).unwrap();
        assert!(channel_attention(&random_map((1, 3, 2, 2), 0), &p).is_err());
        assert!(ChannelAttentionParams::<f64>::from_matrices(Array2::eye(2), Array2::eye(3)).is_err());
    }

    #[test]
    fn zero_kernel_gives_uniform_half() {
        let p = SpatialAttentionParams::from_kernel(Array3::zeros((2, 3, 3)), 0.0).unwrap();
        let m = spatial_attention(&random_map((2, 3, 4, 6), 2), &p).unwrap();
        assert_eq!(m.dim(), (2, 1, 4, 6));
        assert!(m.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn constant_field_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kernel = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-0.5..0.5));
        let p = SpatialAttentionParams::from_kernel(kernel.clone(), 0.25).unwrap();
        // channel values 1, 2, -0.6: mean 0.8, max 2
        let f = Array4::from_shape_fn((1, 3, 5, 5), |(_, c, _, _)| [1.0, 2.0, -0.6][c]);
        let m = spatial_attention(&f, &p).unwrap();
        let sums = [kernel.index_axis(Axis(0), 0).sum(), kernel.index_axis(Axis(0), 1).sum()];
        let want = sig(0.25 + sums[0] * 0.8 + sums[1] * 2.0);
        for i in 1..4 {
            for j in 1..4 {
                assert!((m[[0, 0, i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn even_kernel_is_rejected() {
        assert!(SpatialAttentionParams::<f64>::from_kernel(Array3::zeros((2, 4, 4)), 0.0).is_err());
        assert!(CbamConfig { channels: 8, reduction_ratio: 2, spatial_kernel: 4 }.validate().is_err());
        assert!(CbamConfig { channels: 8, reduction_ratio: 3, spatial_kernel: 3 }.validate().is_err());
    }

    #[test]
    fn zero_input_gives_zero() {
        let b = block(8, 4, 3, 4);
        let out = cbam_forward(&Array4::zeros((2, 8, 5, 5)), &b).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_are_identity() {
        let mut b = block(8, 4, 7, 5);
        b.set_gate_biases(20.0);
        let f = random_map((2, 8, 6, 6), 6);
        let out = cbam_forward(&f, &b).unwrap();
        let err = (&out - &f).mapv(f64::abs).fold(0.0, |a: f64, &v| a.max(v));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fused_op_equals_two_step_composition() {
        let mut b = block(16, 4, 3, 7);
        let f = random_map((3, 16, 7, 5), 8).mapv(|v| v * 0.1);
        // independent two-step pipeline, broadcasting through ndarray
        let g = channel_attention(&f, &b.channel).unwrap();
        let g4 = g.clone().into_shape_with_order((3, 16, 1, 1)).unwrap();
        let gated = &f * &g4;
        let m = spatial_attention(&gated, &b.spatial).unwrap();
        let want = &gated * &m;
        let got = b.forward(&f, Pass::EVAL_RECORD).unwrap();
        let err = (&got - &want).mapv(f64::abs).fold(0.0, |a: f64, &v| a.max(v));
        assert!(err < 1e-14, "{err}");
        let (cg, sg) = b.last_gates().unwrap();
        assert_eq!(cg, &g);
        assert_eq!(sg, &m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn shape_and_gate_range(c in 1usize..9, h in 1usize..9, w in 1usize..9, seed in 0u64..1000) {
            let r = if c % 2 == 0 { 2 } else { 1 };
            let mut b = block(c, r, 3, seed);
            let f = random_map((2, c, h, w), seed + 1).mapv(|v| v * 3.0);
            let out = b.forward(&f, Pass::EVAL_RECORD).unwrap();
            prop_assert_eq!(out.dim(), f.dim());
            let (cg, sg) = b.last_gates().unwrap();
            prop_assert!(cg.iter().chain(sg.iter()).all(|&v| v > 0.0 && v < 1.0));
            prop_assert!(out.iter().zip(f.iter()).all(|(o, x)| o.abs() <= x.abs()));
        }
    }
}
