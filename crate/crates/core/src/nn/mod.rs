//! Minimal layer toolkit with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs when the forward pass is
//! run with [`Pass::record`] set. Parameter gradients are accumulated into
//! [`Param::grad`] and consumed by [`Adam`].

mod conv;
mod init;
mod linear;
mod loss;
mod norm;
mod optim;
mod pool;

pub use conv::Conv2d;
pub use init::{fan_in_uniform, he_uniform};
pub use linear::Linear;
pub use loss::{softmax, softmax_cross_entropy};
pub use norm::BatchNorm;
pub use optim::{Adam, AdamConfig};
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2d};

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;

/// Forward-pass flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    /// Batch statistics in normalization layers, active dropout.
    pub training: bool,
    /// Keep intermediates for a later backward call.
    pub record: bool,
}

impl Pass {
    pub const TRAIN: Pass = Pass { training: true, record: true };
    pub const EVAL: Pass = Pass { training: false, record: false };
    /// Inference-mode forward that still supports backward (gradient checks).
    pub const EVAL_RECORD: Pass = Pass { training: false, record: true };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable tensor updated by the optimizer.
    Weight,
    /// State carried by the layer but never differentiated (running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    pub fn weight(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad, kind: ParamKind::Weight }
    }

    pub fn buffer(value: ArrayD<T>) -> Self {
        Param { value, grad: ArrayD::zeros(IxDyn(&[0])), kind: ParamKind::Buffer }
    }

    pub fn is_weight(&self) -> bool {
        self.kind == ParamKind::Weight
    }

    pub fn zero_grad(&mut self) {
        if self.is_weight() {
            self.grad.fill(T::zero());
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Named traversal over every parameter and buffer of a module tree.
pub trait Parameters<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    /// Number of learnable scalars.
    fn num_weights(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.is_weight() {
                n += p.numel();
            }
        });
        n
    }

    /// SHA-256 over names, shapes and values of every weight and buffer.
    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut bytes = Vec::new();
        self.visit("", &mut |name, p| {
            hasher.update(name.as_bytes());
            for d in p.value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            bytes.clear();
            for v in p.value.iter() {
                v.write_le(&mut bytes);
            }
            hasher.update(&bytes);
        });
        hex::encode(hasher.finalize())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Rectifier applied in place; returns the output for later masking.
pub(crate) fn relu_inplace<T: Scalar, D: ndarray::Dimension>(x: &mut ndarray::Array<T, D>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Zeroes gradient entries where the rectifier output was not positive.
pub(crate) fn relu_backward_inplace<T: Scalar, D: ndarray::Dimension>(
    grad: &mut ndarray::Array<T, D>,
    output: &ndarray::Array<T, D>,
) {
    ndarray::Zip::from(grad).and(output).for_each(|g, &y| {
        if y <= T::zero() {
            *g = T::zero();
        }
    });
}
