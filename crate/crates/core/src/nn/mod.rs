//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Every layer keeps its forward pass pure (`&self`); training-mode forwards
//! return a cache that the matching `backward` consumes. Backward passes
//! accumulate into [`Param::grad`] and return the gradient of the input.

mod conv;
mod linear;
mod norm;
mod param;
mod pool;

pub use conv::Conv2d;
pub use linear::Affine;
pub use norm::{BatchNorm2d, BnCache};
pub use param::{HasParams, Param};
pub use pool::{MaxPool2d, PoolCache};

use std::hash::Hasher;

use ndarray::{Array4, Zip};

use crate::Scalar;

pub(crate) fn relu_inplace<T: Scalar>(x: &mut Array4<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Gradient of a rectifier given its output.
pub(crate) fn relu_backward<T: Scalar>(out: &Array4<T>, dy: &mut Array4<T>) {
    Zip::from(dy).and(out).for_each(|g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
}

/// Feeds the sign pattern of `values` into `h`; two evaluations with equal
/// patterns lie on the same smooth piece of every rectifier.
pub(crate) fn hash_signs<'a, T: Scalar + 'a>(values: impl IntoIterator<Item = &'a T>, h: &mut impl Hasher) {
    for v in values {
        h.write_i8(if *v > T::zero() {
            1
        } else if *v < T::zero() {
            -1
        } else {
            0
        });
    }
}
