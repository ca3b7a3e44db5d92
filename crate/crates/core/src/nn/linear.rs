use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn};
use rand::Rng;

use super::{he_uniform, join, Param, Parameters, Pass};
use crate::scalar::Scalar;

/// Fully connected layer, `y = x W^T + b` with `W` of shape `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Array2<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let weight = he_uniform(&[outputs, inputs], inputs, rng);
        Linear {
            weight: Param::weight(weight),
            bias: Param::weight(ArrayD::zeros(IxDyn(&[outputs]))),
            input: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn w(&self) -> ndarray::ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D weight")
    }

    pub fn forward(&mut self, x: &Array2<T>, pass: Pass) -> Array2<T> {
        assert_eq!(x.ncols(), self.inputs(), "linear input width");
        let mut y = Array2::<T>::zeros((x.nrows(), self.outputs()));
        general_mat_mul(T::one(), x, &self.w().t(), T::zero(), &mut y);
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1-D bias");
        y += &b;
        self.input = pass.record.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array2<T>) -> Array2<T> {
        let x = self.input.take().expect("linear backward without recorded forward");
        {
            let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D grad");
            general_mat_mul(T::one(), &dy.t(), &x, T::one(), &mut gw);
        }
        let db = dy.sum_axis(Axis(0));
        self.bias.grad.zip_mut_with(&db.into_dyn(), |g, &d| *g += d);
        let mut dx = Array2::<T>::zeros(x.raw_dim());
        general_mat_mul(T::one(), dy, &self.w(), T::zero(), &mut dx);
        dx
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
