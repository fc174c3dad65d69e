//! Reprojection of evolved vertex features back to pixels and the change head:
//! absolute bitemporal difference, 1×1 convolution, bilinear upsampling of the
//! logits to input resolution, sigmoid.

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Ix1, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::encoder::FeatureMap;
use crate::error::{shape_err, Result};
use crate::nn::{HasParams, Param};
use crate::scalar::sigmoid;
use crate::Scalar;

/// Per-pixel change logits and probabilities at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeMap<T> {
    pub logits: Array2<T>,
    pub probabilities: Array2<T>,
}

impl<T: Scalar> ChangeMap<T> {
    pub fn from_logits(logits: Array2<T>) -> Self {
        let probabilities = logits.mapv(sigmoid);
        Self { logits, probabilities }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.logits.dim()
    }
}

/// `X_new = reshape(Q · Z̃) + X`.
pub fn reproject<T: Scalar>(q: &Array2<T>, z_tilde: &Array2<T>, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if q.nrows() != x.pixels() || q.ncols() != z_tilde.nrows() || z_tilde.ncols() != x.channels() {
        return shape_err(format!(
            "reprojection mismatch: assignment {:?}, vertices {:?}, map {:?}",
            q.dim(),
            z_tilde.dim(),
            x.data.dim()
        ));
    }
    let rows = x.to_pixel_rows() + q.dot(z_tilde);
    Ok(FeatureMap::from_pixel_rows(rows.view(), x.height(), x.width(), x.stride))
}

/// Interpolation matrix `[out, inp]` for half-pixel-centred bilinear resizing
/// (edge-clamped, corners not aligned).
pub fn bilinear_matrix<T: Scalar>(out: usize, inp: usize) -> Array2<T> {
    let mut m = Array2::zeros((out, inp));
    let scale = inp as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = if i0 + 1 < inp { i0 + 1 } else { i0 };
        let frac = src - i0 as f64;
        m[[i, i0]] += T::lit(1.0 - frac);
        m[[i, i1]] += T::lit(frac);
    }
    m
}

/// 1×1 convolution from `d` channels to a single change logit.
#[derive(Debug, Clone)]
pub struct ChangeHead<T> {
    /// `[d]`.
    pub weight: Param<T>,
    /// `[1]`.
    pub bias: Param<T>,
}

pub(crate) struct HeadCache<T> {
    diff_sign: Array2<T>,
    abs_diff: Array2<T>,
    h: usize,
    w: usize,
    up_rows: Array2<T>,
    up_cols: Array2<T>,
}

impl<T: Scalar> HeadCache<T> {
    pub(crate) fn hash_pattern(&self, h: &mut impl std::hash::Hasher) {
        crate::nn::hash_signs(self.diff_sign.iter(), h);
    }
}

impl<T: Scalar> ChangeHead<T> {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        Self {
            weight: Param::new(ArrayD::from_shape_simple_fn(IxDyn(&[dim]), || T::lit(dist.sample(rng)))),
            bias: Param::zeros(&[1]),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.len()
    }

    fn weight_view(&self) -> ArrayView1<'_, T> {
        self.weight.value.view().into_dimensionality::<Ix1>().expect("head weight is [d]")
    }

    /// Logits at input resolution from pixel rows `[h·w, d]` of both phases.
    pub(crate) fn forward_rows(
        &self,
        x1: ArrayView2<T>,
        x2: ArrayView2<T>,
        (h, w): (usize, usize),
        (out_h, out_w): (usize, usize),
    ) -> (Array2<T>, HeadCache<T>) {
        let diff = &x1 - &x2;
        let abs_diff = diff.mapv(T::abs);
        let diff_sign = diff.mapv(|v| {
            if v > T::zero() {
                T::one()
            } else if v < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        });
        let low = (abs_diff.dot(&self.weight_view()) + self.bias.value[0])
            .into_shape((h, w))
            .expect("h*w rows");
        let up_rows = bilinear_matrix::<T>(out_h, h);
        let up_cols = bilinear_matrix::<T>(out_w, w);
        let logits = up_rows.dot(&low).dot(&up_cols.t());
        (
            logits,
            HeadCache {
                diff_sign,
                abs_diff,
                h,
                w,
                up_rows,
                up_cols,
            },
        )
    }

    /// Returns gradients of the two phases' pixel rows.
    pub(crate) fn backward_rows(&mut self, cache: &HeadCache<T>, d_logits: ArrayView2<T>) -> (Array2<T>, Array2<T>) {
        let d_low = cache.up_rows.t().dot(&d_logits).dot(&cache.up_cols);
        let d_low: Array1<T> = d_low.into_shape(cache.h * cache.w).expect("contiguous");
        {
            let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix1>().expect("[d]");
            gw += &cache.abs_diff.t().dot(&d_low);
        }
        self.bias.grad[0] += d_low.sum();
        let w = self.weight_view();
        let mut dx1 = Array2::zeros(cache.abs_diff.dim());
        for ((mut row, &g), sign) in dx1.outer_iter_mut().zip(d_low.iter()).zip(cache.diff_sign.outer_iter()) {
            for ((v, &wc), &s) in row.iter_mut().zip(w.iter()).zip(sign.iter()) {
                *v = g * wc * s;
            }
        }
        let dx2 = dx1.mapv(|v| -v);
        (dx1, dx2)
    }
}

impl<T: Scalar> HasParams<T> for ChangeHead<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Change probability map for two (reprojected) feature maps.
pub fn change_head<T: Scalar>(
    x1_new: &FeatureMap<T>,
    x2_new: &FeatureMap<T>,
    head: &ChangeHead<T>,
) -> Result<ChangeMap<T>> {
    if x1_new.data.dim() != x2_new.data.dim() || x1_new.stride != x2_new.stride {
        return shape_err(format!(
            "head inputs differ: {:?} vs {:?}",
            x1_new.data.dim(),
            x2_new.data.dim()
        ));
    }
    if x1_new.channels() != head.dim() {
        return shape_err(format!(
            "head expects {} channels, got {}",
            head.dim(),
            x1_new.channels()
        ));
    }
    let (h, w) = (x1_new.height(), x1_new.width());
    let (logits, _) = head.forward_rows(
        x1_new.to_pixel_rows().view(),
        x2_new.to_pixel_rows().view(),
        (h, w),
        (h * x1_new.stride, w * x1_new.stride),
    );
    Ok(ChangeMap::from_logits(logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn bilinear_rows_are_convex_combinations() {
        let m = bilinear_matrix::<f64>(64, 4);
        for row in m.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
        // 2x upsampling of [a, b]: (a, 0.75a+0.25b, 0.25a+0.75b, b)
        let m = bilinear_matrix::<f64>(4, 2);
        assert_eq!(m, array![[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]]);
        assert_eq!(bilinear_matrix::<f64>(3, 3), Array2::<f64>::eye(3));
    }

    #[test]
    fn zero_vertices_leave_map_unchanged() {
        let x = FeatureMap::new(Array3::from_shape_fn((3, 2, 2), |(a, b, c)| (a + 2 * b + 3 * c) as f64), 8);
        let q = Array2::from_elem((4, 2), 0.5);
        assert_eq!(reproject(&q, &Array2::zeros((2, 3)), &x).unwrap(), x);
        assert!(reproject(&q, &Array2::zeros((3, 3)), &x).is_err());
    }

    #[test]
    fn single_vertex_broadcasts() {
        let x = FeatureMap::new(Array3::<f64>::zeros((2, 2, 3)), 4);
        let q = Array2::ones((6, 1));
        let out = reproject(&q, &array![[1.5, -2.0]], &x).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(out.data[[0, i, j]], 1.5);
                assert_eq!(out.data[[1, i, j]], -2.0);
            }
        }
    }

    #[test]
    fn identical_inputs_give_bias_map() {
        let mut rng = rand::thread_rng();
        let mut head = ChangeHead::<f64>::new(3, &mut rng);
        head.bias.value[0] = -1.25;
        let x = FeatureMap::new(Array3::from_shape_fn((3, 2, 2), |(a, b, c)| (a * b + c) as f64), 16);
        let map = change_head(&x, &x, &head).unwrap();
        assert_eq!(map.dim(), (32, 32));
        assert!(map.logits.iter().all(|&v| v == -1.25));
    }
}
