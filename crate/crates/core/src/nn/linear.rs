use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::param::join;
use super::{HasParams, Param};
use crate::error::{shape_err, Result};
use crate::Scalar;

/// Row-wise affine map `y = x Wᵀ + b` on `[rows, in]` matrices.
#[derive(Debug, Clone)]
pub struct Affine<T> {
    /// `[out, in]`.
    pub weight: Param<T>,
    /// `[out]`.
    pub bias: Param<T>,
}

impl<T: Scalar> Affine<T> {
    /// Uniform(±1/√in) weights, zero bias.
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let weight = ArrayD::from_shape_simple_fn(IxDyn(&[output, input]), || {
            T::lit(dist.sample(rng))
        });
        Self {
            weight: Param::new(weight),
            bias: Param::zeros(&[output]),
        }
    }

    pub fn from_parts(weight: Array2<T>, bias: Vec<T>) -> Self {
        Self {
            weight: Param::new(weight.into_dyn()),
            bias: Param::new(ndarray::Array1::from(bias).into_dyn()),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn weight_view(&self) -> ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("affine weight is rank 2")
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.input_dim() {
            return shape_err(format!(
                "affine expects {} input features, got {}",
                self.input_dim(),
                x.ncols()
            ));
        }
        let b = self
            .bias
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("affine bias is rank 1");
        Ok(x.dot(&self.weight_view().t()) + b)
    }

    pub fn backward(&mut self, x: ArrayView2<T>, dy: ArrayView2<T>) -> Array2<T> {
        let dw = dy.t().dot(&x);
        let mut gw = self
            .weight
            .grad
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("affine weight is rank 2");
        gw += &dw;
        let mut gb = self
            .bias
            .grad
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("affine bias is rank 1");
        gb += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight_view())
    }
}

impl<T: Scalar> HasParams<T> for Affine<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
