//! Residual feature extractors with optional attention blocks, and the
//! fully connected classification head.

use std::path::PathBuf;

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{CbamBlock, CbamConfig, DEFAULT_REDUCTION_RATIO, DEFAULT_SPATIAL_KERNEL};
use crate::dataset::{patches_to_tensor, PatchRecord};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, join, relu_backward_inplace, relu_inplace, BatchNorm, Conv2d,
    Linear, MaxPool2d, Param, Parameters, Pass,
};
use crate::scalar::Scalar;
use crate::training::TrainMode;

pub const NUM_CLASSES: usize = 6;
pub const RESNET50_FEATURE_DIM: usize = 2048;
pub const TINY_FEATURE_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Resnet50,
    Tiny,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::Resnet50 => "resnet50",
            Architecture::Tiny => "tiny",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet50" => Ok(Architecture::Resnet50),
            "tiny" => Ok(Architecture::Tiny),
            other => Err(Error::InvalidConfig(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainedInit {
    Imagenet,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub architecture: Architecture,
    pub attention_enabled: bool,
    pub pretrained_init: PretrainedInit,
    /// Weight file for `pretrained_init = imagenet` (a checkpoint holding an extractor).
    #[serde(default)]
    pub pretrained_path: Option<PathBuf>,
    /// Side of the square input patches.
    pub input_size: usize,
    pub reduction_ratio: usize,
    pub spatial_kernel: usize,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

impl BackboneSpec {
    pub fn resnet50(attention_enabled: bool) -> Self {
        BackboneSpec {
            architecture: Architecture::Resnet50,
            attention_enabled,
            pretrained_init: PretrainedInit::Random,
            pretrained_path: None,
            input_size: 256,
            reduction_ratio: DEFAULT_REDUCTION_RATIO,
            spatial_kernel: DEFAULT_SPATIAL_KERNEL,
            init_seed: 0,
        }
    }

    /// Four single-convolution residual blocks on 32×32 inputs, 64-wide features.
    pub fn tiny(attention_enabled: bool) -> Self {
        BackboneSpec {
            architecture: Architecture::Tiny,
            attention_enabled,
            pretrained_init: PretrainedInit::Random,
            pretrained_path: None,
            input_size: 32,
            reduction_ratio: 4,
            spatial_kernel: 3,
            init_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn feature_dim(&self) -> usize {
        match self.architecture {
            Architecture::Resnet50 => RESNET50_FEATURE_DIM,
            Architecture::Tiny => TINY_FEATURE_DIM,
        }
    }

    /// Residual blocks in the extractor; one attention insertion point each.
    pub fn conv_block_count(&self) -> usize {
        match self.architecture {
            Architecture::Resnet50 => RESNET50_STAGES.iter().map(|s| s.0).sum(),
            Architecture::Tiny => TINY_BLOCKS.len(),
        }
    }

    /// Two specs describe the same parameter layout.
    pub fn same_layout(&self, other: &BackboneSpec) -> bool {
        self.architecture == other.architecture
            && self.attention_enabled == other.attention_enabled
            && self.input_size == other.input_size
            && (!self.attention_enabled
                || (self.reduction_ratio == other.reduction_ratio && self.spatial_kernel == other.spatial_kernel))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    /// Widths of the stacked linear layers; the last one is the class count.
    pub layer_widths: Vec<usize>,
    pub dropout_probability: f64,
    pub batch_normalization: bool,
    /// Expected input width; `None` accepts whatever feeds the head.
    #[serde(default)]
    pub input_dim: Option<usize>,
}

impl Default for HeadSpec {
    fn default() -> Self {
        HeadSpec {
            layer_widths: vec![512, 256, NUM_CLASSES],
            dropout_probability: 0.5,
            batch_normalization: true,
            input_dim: None,
        }
    }
}

impl HeadSpec {
    pub fn validate(&self) -> Result<()> {
        match self.layer_widths.last() {
            Some(&NUM_CLASSES) => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "head must end in {NUM_CLASSES} outputs, got {other:?}"
                )))
            }
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidConfig("head layer of width 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_probability) {
            return Err(Error::InvalidConfig(format!(
                "dropout probability {} outside [0, 1)",
                self.dropout_probability
            )));
        }
        Ok(())
    }
}

// (blocks, bottleneck width, first stride)
const RESNET50_STAGES: [(usize, usize, usize); 4] = [(3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)];
// (out channels, stride)
const TINY_BLOCKS: [(usize, usize); 4] = [(8, 1), (16, 2), (32, 2), (64, 2)];
const TINY_STEM_CHANNELS: usize = 8;

struct InitRngs {
    conv: ChaCha8Rng,
    attention: ChaCha8Rng,
}

#[derive(Clone, Debug)]
struct ConvBn<T> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
}

impl<T: Scalar> ConvBn<T> {
    fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut R) -> Self {
        ConvBn { conv: Conv2d::new(cin, cout, k, stride, pad, false, rng), bn: BatchNorm::new(cout) }
    }

    fn forward(&mut self, x: &Array4<T>, pass: Pass) -> Array4<T> {
        let y = self.conv.forward(x, pass);
        self.bn.forward4(&y, pass)
    }

    fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let d = self.bn.backward4(dy);
        self.conv.backward(&d)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Residual block: `relu(attention(branch(x)) + shortcut(x))`.
///
/// The attention block gates the residual branch before the skip sum.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    branch: Vec<ConvBn<T>>,
    shortcut: Option<ConvBn<T>>,
    pub attention: Option<CbamBlock<T>>,
    hidden_out: Vec<Array4<T>>,
    output: Option<Array4<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn bottleneck(cin: usize, width: usize, stride: usize, spec: &BackboneSpec, rngs: &mut InitRngs) -> Result<Self> {
        let rng = &mut rngs.conv;
        let cout = width * 4;
        let branch = vec![
            ConvBn::new(cin, width, 1, 1, 0, rng),
            ConvBn::new(width, width, 3, stride, 1, rng),
            ConvBn::new(width, cout, 1, 1, 0, rng),
        ];
        let shortcut = (stride != 1 || cin != cout).then(|| ConvBn::new(cin, cout, 1, stride, 0, rng));
        Self::assemble(branch, shortcut, cout, spec, &mut rngs.attention)
    }

    fn single(cin: usize, cout: usize, stride: usize, spec: &BackboneSpec, rngs: &mut InitRngs) -> Result<Self> {
        let rng = &mut rngs.conv;
        let branch = vec![ConvBn::new(cin, cout, 3, stride, 1, rng)];
        let shortcut = (stride != 1 || cin != cout).then(|| ConvBn::new(cin, cout, 1, stride, 0, rng));
        Self::assemble(branch, shortcut, cout, spec, &mut rngs.attention)
    }

    fn assemble<R: Rng + ?Sized>(
        branch: Vec<ConvBn<T>>,
        shortcut: Option<ConvBn<T>>,
        cout: usize,
        spec: &BackboneSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let attention = if spec.attention_enabled {
            let cfg = CbamConfig {
                channels: cout,
                reduction_ratio: spec.reduction_ratio,
                spatial_kernel: spec.spatial_kernel,
            };
            Some(CbamBlock::new(cfg, rng)?)
        } else {
            None
        };
        Ok(ResidualBlock { branch, shortcut, attention, hidden_out: Vec::new(), output: None })
    }

    fn forward(&mut self, x: &Array4<T>, pass: Pass) -> Result<Array4<T>> {
        self.hidden_out.clear();
        let last = self.branch.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.branch.iter_mut().enumerate() {
            h = layer.forward(&h, pass);
            if i < last {
                relu_inplace(&mut h);
                if pass.record {
                    self.hidden_out.push(h.clone());
                }
            }
        }
        if let Some(att) = self.attention.as_mut() {
            h = att.forward(&h, pass)?;
        }
        match self.shortcut.as_mut() {
            Some(sc) => h += &sc.forward(x, pass),
            None => h += x,
        }
        relu_inplace(&mut h);
        self.output = pass.record.then(|| h.clone());
        Ok(h)
    }

    fn backward(&mut self, dy: &Array4<T>) -> Array4<T> {
        let out = self.output.take().expect("block backward without recorded forward");
        let mut d = dy.clone();
        relu_backward_inplace(&mut d, &out);
        let d_skip = match self.shortcut.as_mut() {
            Some(sc) => sc.backward(&d),
            None => d.clone(),
        };
        let mut dh = match self.attention.as_mut() {
            Some(att) => att.backward(&d),
            None => d,
        };
        let last = self.branch.len() - 1;
        for i in (0..self.branch.len()).rev() {
            if i < last {
                relu_backward_inplace(&mut dh, &self.hidden_out[i]);
            }
            dh = self.branch[i].backward(&dh);
        }
        self.hidden_out.clear();
        dh + d_skip
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, l) in self.branch.iter().enumerate() {
            l.visit(&join(prefix, &format!("branch{i}")), f);
        }
        if let Some(sc) = &self.shortcut {
            sc.visit(&join(prefix, "shortcut"), f);
        }
        if let Some(att) = &self.attention {
            att.visit(&join(prefix, "attention"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, l) in self.branch.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("branch{i}")), f);
        }
        if let Some(sc) = &mut self.shortcut {
            sc.visit_mut(&join(prefix, "shortcut"), f);
        }
        if let Some(att) = &mut self.attention {
            att.visit_mut(&join(prefix, "attention"), f);
        }
    }
}

#[derive(Clone, Debug)]
struct Stem<T> {
    layer: ConvBn<T>,
    pool: Option<MaxPool2d>,
    relu_out: Option<Array4<T>>,
}

/// Convolutional trunk ending in global average pooling.
#[derive(Clone, Debug)]
pub struct Extractor<T> {
    pub spec: BackboneSpec,
    stem: Stem<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pooled_hw: Option<(usize, usize)>,
}

impl<T: Scalar> Extractor<T> {
    pub fn new(spec: &BackboneSpec) -> Result<Self> {
        // Attention weights draw from their own stream so the convolutions do not depend on attention_enabled.
        let mut rngs = InitRngs {
            conv: ChaCha8Rng::seed_from_u64(spec.init_seed),
            attention: ChaCha8Rng::seed_from_u64(spec.init_seed ^ 0xa77e_0000),
        };
        let mut blocks = Vec::new();
        let stem = match spec.architecture {
            Architecture::Resnet50 => {
                let mut cin = 64;
                for &(count, width, stride) in &RESNET50_STAGES {
                    for b in 0..count {
                        let s = if b == 0 { stride } else { 1 };
                        blocks.push(ResidualBlock::bottleneck(cin, width, s, spec, &mut rngs)?);
                        cin = width * 4;
                    }
                }
                Stem {
                    layer: ConvBn::new(3, 64, 7, 2, 3, &mut rngs.conv),
                    pool: Some(MaxPool2d::new(3, 2, 1)),
                    relu_out: None,
                }
            }
            Architecture::Tiny => {
                let mut cin = TINY_STEM_CHANNELS;
                for &(cout, stride) in &TINY_BLOCKS {
                    blocks.push(ResidualBlock::single(cin, cout, stride, spec, &mut rngs)?);
                    cin = cout;
                }
                Stem { layer: ConvBn::new(3, TINY_STEM_CHANNELS, 4, 4, 0, &mut rngs.conv), pool: None, relu_out: None }
            }
        };
        Ok(Extractor { spec: spec.clone(), stem, blocks, pooled_hw: None })
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn attention_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.attention.is_some()).count()
    }

    pub fn attention_blocks_mut(&mut self) -> impl Iterator<Item = &mut CbamBlock<T>> {
        self.blocks.iter_mut().filter_map(|b| b.attention.as_mut())
    }

    pub fn attention_blocks_iter(&self) -> impl Iterator<Item = &CbamBlock<T>> {
        self.blocks.iter().filter_map(|b| b.attention.as_ref())
    }

    /// Sets every attention gate bias; `+20` saturates all gates to ≈1.
    pub fn set_gate_biases(&mut self, bias: T) {
        for att in self.attention_blocks_mut() {
            att.set_gate_biases(bias);
        }
    }

    pub fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let s = self.spec.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::Shape(format!(
                "expected batch of 3×{s}×{s} patches, got {c}×{h}×{w}"
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Array4<T>, pass: Pass) -> Result<Array2<T>> {
        self.check_input(x)?;
        let mut h = self.stem.layer.forward(x, pass);
        relu_inplace(&mut h);
        if let Some(pool) = self.stem.pool.as_mut() {
            self.stem.relu_out = pass.record.then(|| h.clone());
            h = pool.forward(&h, pass);
        } else {
            self.stem.relu_out = pass.record.then(|| h.clone());
        }
        for block in &mut self.blocks {
            h = block.forward(&h, pass)?;
        }
        let (_, _, hh, ww) = h.dim();
        self.pooled_hw = Some((hh, ww));
        Ok(global_avg_pool(&h))
    }

    /// Inference-mode features for a list of patches, computed in chunks of `batch`.
    pub fn features_of(&mut self, patches: &[&PatchRecord], batch: usize) -> Result<Array2<T>> {
        let mut out = Array2::<T>::zeros((patches.len(), self.feature_dim()));
        for (k, chunk) in patches.chunks(batch.max(1)).enumerate() {
            let x = patches_to_tensor::<T>(chunk)?;
            let f = self.forward(&x, Pass::EVAL)?;
            let start = k * batch.max(1);
            out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&f);
        }
        Ok(out)
    }

    /// Backpropagates a feature gradient; returns the input gradient.
    pub fn backward(&mut self, d_features: &Array2<T>) -> Array4<T> {
        let (hh, ww) = self.pooled_hw.expect("extractor backward without forward");
        let mut d = global_avg_pool_backward(d_features, hh, ww);
        for block in self.blocks.iter_mut().rev() {
            d = block.backward(&d);
        }
        if let Some(pool) = self.stem.pool.as_mut() {
            d = pool.backward(&d);
        }
        let relu_out = self.stem.relu_out.take().expect("stem activations");
        relu_backward_inplace(&mut d, &relu_out);
        self.stem.layer.backward(&d)
    }
}

impl<T: Scalar> Parameters<T> for Extractor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.layer.visit(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.layer.visit_mut(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

#[derive(Clone, Debug)]
struct HiddenLayer<T> {
    linear: Linear<T>,
    bn: Option<BatchNorm<T>>,
    relu_out: Option<Array2<T>>,
    dropout_mask: Option<Array2<T>>,
}

/// Linear → batch-norm → rectifier → dropout for each hidden width, then a final linear layer.
#[derive(Clone, Debug)]
pub struct Head<T> {
    pub spec: HeadSpec,
    hidden: Vec<HiddenLayer<T>>,
    pub output: Linear<T>,
    dropout_rng: ChaCha8Rng,
}

impl<T: Scalar> Head<T> {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, spec: &HeadSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        if let Some(expected) = spec.input_dim {
            if expected != input_dim {
                return Err(Error::Shape(format!(
                    "head expects {expected} input features but the extractor produces {input_dim}"
                )));
            }
        }
        let mut hidden = Vec::new();
        let mut width = input_dim;
        let (&out, hidden_widths) = spec.layer_widths.split_last().expect("validated");
        for &w in hidden_widths {
            hidden.push(HiddenLayer {
                linear: Linear::new(width, w, rng),
                bn: spec.batch_normalization.then(|| BatchNorm::new(w)),
                relu_out: None,
                dropout_mask: None,
            });
            width = w;
        }
        let output = Linear::new(width, out, rng);
        let dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        Ok(Head { spec: spec.clone(), hidden, output, dropout_rng })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().map_or(self.output.inputs(), |l| l.linear.inputs())
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Zeroes the final layer so every input maps to uniform class probabilities.
    pub fn zero_output_layer(&mut self) {
        self.output.weight.value.fill(T::zero());
        self.output.bias.value.fill(T::zero());
    }

    pub fn forward(&mut self, x: &Array2<T>, pass: Pass) -> Result<Array2<T>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "head expects width {}, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let p = self.spec.dropout_probability;
        let keep = T::lit(1.0 / (1.0 - p));
        let mut h = x.clone();
        for layer in &mut self.hidden {
            h = layer.linear.forward(&h, pass);
            if let Some(bn) = layer.bn.as_mut() {
                h = bn.forward2(&h, pass);
            }
            relu_inplace(&mut h);
            layer.relu_out = pass.record.then(|| h.clone());
            if pass.training && p > 0.0 {
                let rng = &mut self.dropout_rng;
                let mask = Array2::from_shape_fn(h.raw_dim(), |_| if rng.gen::<f64>() < p { T::zero() } else { keep });
                h *= &mask;
                layer.dropout_mask = pass.record.then_some(mask);
            } else {
                layer.dropout_mask = None;
            }
        }
        Ok(self.output.forward(&h, pass))
    }

    pub fn backward(&mut self, d_logits: &Array2<T>) -> Array2<T> {
        let mut d = self.output.backward(d_logits);
        for layer in self.hidden.iter_mut().rev() {
            if let Some(mask) = layer.dropout_mask.take() {
                d *= &mask;
            }
            let out = layer.relu_out.take().expect("head activations");
            relu_backward_inplace(&mut d, &out);
            if let Some(bn) = layer.bn.as_mut() {
                d = bn.backward2(&d);
            }
            d = layer.linear.backward(&d);
        }
        d
    }
}

impl<T: Scalar> Parameters<T> for Head<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, l) in self.hidden.iter().enumerate() {
            l.linear.visit(&join(prefix, &format!("fc{i}")), f);
            if let Some(bn) = &l.bn {
                bn.visit(&join(prefix, &format!("bn{i}")), f);
            }
        }
        self.output.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, l) in self.hidden.iter_mut().enumerate() {
            l.linear.visit_mut(&join(prefix, &format!("fc{i}")), f);
            if let Some(bn) = &mut l.bn {
                bn.visit_mut(&join(prefix, &format!("bn{i}")), f);
            }
        }
        self.output.visit_mut(&join(prefix, "out"), f);
    }
}

/// Backbone plus classification head.
#[derive(Clone, Debug)]
pub struct SingleViewModel<T> {
    pub extractor: Extractor<T>,
    pub head: Head<T>,
    /// Extractor parameters are excluded from optimization when set.
    pub frozen: bool,
    /// Set once the model has been trained.
    pub trained_on: Option<TrainMode>,
}

/// Builds a fresh model. Pretrained extractor weights are loaded from
/// `spec.pretrained_path` when `pretrained_init` is `imagenet`; attention
/// and head weights are always freshly initialized.
pub fn build_model<T: Scalar>(spec: &BackboneSpec, head: &HeadSpec) -> Result<SingleViewModel<T>> {
    let mut extractor = Extractor::new(spec)?;
    if spec.pretrained_init == PretrainedInit::Imagenet {
        let path = spec
            .pretrained_path
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("pretrained initialization requested without a weight file".into()))?;
        crate::training::checkpoint::load_pretrained_into(&mut extractor, path)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed ^ 0x5eed_4ead);
    let head = Head::new(extractor.feature_dim(), head, &mut rng)?;
    Ok(SingleViewModel { extractor, head, frozen: false, trained_on: None })
}

/// Number of attention blocks inserted into the model's extractor.
pub fn count_attention_blocks<T: Scalar>(model: &SingleViewModel<T>) -> usize {
    model.extractor.attention_blocks()
}

/// Pooled pre-head representation in inference mode; `B×feature_dim`.
pub fn forward_features<T: Scalar>(model: &mut SingleViewModel<T>, batch: &Array4<T>) -> Result<Array2<T>> {
    model.extractor.forward(batch, Pass::EVAL)
}

/// Class logits in inference mode; `B×6`.
pub fn forward_logits<T: Scalar>(model: &mut SingleViewModel<T>, batch: &Array4<T>) -> Result<Array2<T>> {
    model.forward(batch, Pass::EVAL)
}

impl<T: Scalar> SingleViewModel<T> {
    pub fn forward(&mut self, batch: &Array4<T>, pass: Pass) -> Result<Array2<T>> {
        let extractor_pass = if self.frozen { Pass { training: false, record: false } } else { pass };
        let features = self.extractor.forward(batch, extractor_pass)?;
        self.head.forward(&features, pass)
    }

    /// Backpropagates logit gradients. The extractor is skipped when frozen.
    pub fn backward(&mut self, d_logits: &Array2<T>) -> Option<Array4<T>> {
        let d_features = self.head.backward(d_logits);
        (!self.frozen).then(|| self.extractor.backward(&d_features))
    }
}

impl<T: Scalar> Parameters<T> for SingleViewModel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.extractor.visit(&join(prefix, "extractor"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.extractor.visit_mut(&join(prefix, "extractor"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax;

    fn batch(n: usize, size: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((n, 3, size, size), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn tiny_attention_count_and_shapes() {
        let mut m = build_model::<f64>(&BackboneSpec::tiny(true), &HeadSpec::default()).unwrap();
        assert_eq!(count_attention_blocks(&m), 4);
        let f = forward_features(&mut m, &batch(3, 32, 1)).unwrap();
        assert_eq!(f.dim(), (3, 64));
        let l = forward_logits(&mut m, &batch(1, 32, 2)).unwrap();
        assert_eq!(l.dim(), (1, 6));
    }

    #[test]
    fn attention_off_has_no_blocks() {
        let m = build_model::<f32>(&BackboneSpec::tiny(false), &HeadSpec::default()).unwrap();
        assert_eq!(count_attention_blocks(&m), 0);
    }

    #[test]
    fn wrong_spatial_size_is_rejected() {
        let mut m = build_model::<f64>(&BackboneSpec::tiny(true), &HeadSpec::default()).unwrap();
        assert!(matches!(forward_features(&mut m, &batch(1, 40, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn eval_forward_is_bit_stable_and_rowwise() {
        let mut m = build_model::<f32>(&BackboneSpec::tiny(true), &HeadSpec::default()).unwrap();
        let one = batch(1, 32, 4).mapv(|v| v as f32);
        let mut two = Array4::zeros((2, 3, 32, 32));
        two.slice_mut(ndarray::s![0..1, .., .., ..]).assign(&one);
        two.slice_mut(ndarray::s![1..2, .., .., ..]).assign(&one);
        let a = forward_logits(&mut m, &two).unwrap();
        let b = forward_logits(&mut m, &two).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.row(0), a.row(1));
        let p = softmax(&a);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zeroed_output_layer_is_uniform() {
        let mut m = build_model::<f64>(&BackboneSpec::tiny(true), &HeadSpec::default()).unwrap();
        m.head.zero_output_layer();
        let p = softmax(&forward_logits(&mut m, &batch(2, 32, 9)).unwrap());
        for v in p.iter() {
            assert!((v - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn head_input_mismatch_is_an_error() {
        let head = HeadSpec { input_dim: Some(128), ..HeadSpec::default() };
        assert!(build_model::<f32>(&BackboneSpec::tiny(false), &head).is_err());
        let bad = HeadSpec { layer_widths: vec![512, 5], ..HeadSpec::default() };
        assert!(build_model::<f32>(&BackboneSpec::tiny(false), &bad).is_err());
    }

    #[test]
    fn pretrained_without_file_fails() {
        let mut spec = BackboneSpec::tiny(true);
        spec.pretrained_init = PretrainedInit::Imagenet;
        assert!(build_model::<f32>(&spec, &HeadSpec::default()).is_err());
        spec.pretrained_path = Some("/nonexistent/weights.ckpt".into());
        assert!(build_model::<f32>(&spec, &HeadSpec::default()).is_err());
    }
}
