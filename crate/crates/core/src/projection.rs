//! Graph projection: soft-assign every pixel feature to K learned anchors,
//! encode each vertex as the normalized, scale-whitened mean residual of its
//! pixels, and form the vertex affinity `A = Z Zᵀ`.
//!
//! With `r = (x_ij − w_k) / σ_k` taken elementwise, the assignment is
//! `q_ij^k = softmax_k(−‖r‖² / 2)`, the vertex feature is
//! `z_k = (Σ q (x − w_k) / Σ q) / σ_k`, and `z'_k = z_k / ‖z_k‖`.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoder::FeatureMap;
use crate::error::{shape_err, Result};
use crate::nn::{HasParams, Param};
use crate::scalar::sigmoid;
use crate::Scalar;

/// Rows with norm below this are returned as zeros.
pub const ZERO_NORM: f64 = 1e-8;
/// Vertices whose total assignment mass falls below this are starved.
pub const MIN_MASS: f64 = 1e-12;

/// Anchors `W` and the pre-sigmoid scales of `Σ`, both `[K, d]`.
#[derive(Debug, Clone)]
pub struct ProjectionParams<T> {
    pub anchors: Param<T>,
    pub scale_logits: Param<T>,
}

impl<T: Scalar> ProjectionParams<T> {
    /// Anchors ~ N(0, 1/d), scale logits 0 (σ = 0.5).
    pub fn new<R: Rng>(vertices: usize, dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let anchors = ArrayD::from_shape_simple_fn(IxDyn(&[vertices, dim]), || {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        });
        Self {
            anchors: Param::new(anchors),
            scale_logits: Param::zeros(&[vertices, dim]),
        }
    }

    pub fn from_arrays(anchors: Array2<T>, scale_logits: Array2<T>) -> Result<Self> {
        if anchors.dim() != scale_logits.dim() || anchors.nrows() == 0 {
            return shape_err(format!(
                "anchors {:?} and scale logits {:?} must share a non-empty [K, d] shape",
                anchors.dim(),
                scale_logits.dim()
            ));
        }
        Ok(Self {
            anchors: Param::new(anchors.into_dyn()),
            scale_logits: Param::new(scale_logits.into_dyn()),
        })
    }

    pub fn vertices(&self) -> usize {
        self.anchors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.anchors.shape()[1]
    }

    pub fn anchors_view(&self) -> ArrayView2<'_, T> {
        self.anchors.value.view().into_dimensionality::<Ix2>().expect("anchors are [K, d]")
    }

    /// `σ = sigmoid(scale_logits)`, strictly inside (0, 1) for finite logits.
    pub fn sigma(&self) -> Array2<T> {
        self.scale_logits
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("scale logits are [K, d]")
            .mapv(sigmoid)
    }
}

impl<T: Scalar> HasParams<T> for ProjectionParams<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&format!("{prefix}.anchors"), &self.anchors);
        f(&format!("{prefix}.scale_logits"), &self.scale_logits);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.anchors"), &mut self.anchors);
        f(&format!("{prefix}.scale_logits"), &mut self.scale_logits);
    }
}

/// One phase's graph: vertex features `Z` `[K, d]`, affinity `A` `[K, K]`,
/// and the pixel-to-vertex assignment `Q` `[N, K]` kept for reprojection.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEmbedding<T> {
    pub vertex_features: Array2<T>,
    pub affinity: Array2<T>,
    pub assignment: Array2<T>,
    /// Vertices that received (numerically) no assignment mass.
    pub starved_vertices: Vec<usize>,
}

impl<T: Scalar> GraphEmbedding<T> {
    pub fn vertices(&self) -> usize {
        self.vertex_features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vertex_features.ncols()
    }
}

/// Output of vertex encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexFeatures<T> {
    pub features: Array2<T>,
    pub starved_vertices: Vec<usize>,
}

fn check_features<T: Scalar>(x: &FeatureMap<T>, params: &ProjectionParams<T>) -> Result<()> {
    if x.channels() != params.dim() {
        return shape_err(format!(
            "feature dimension {} does not match anchor dimension {}",
            x.channels(),
            params.dim()
        ));
    }
    x.ensure_finite("feature map")
}

pub fn soft_assign<T: Scalar>(x: &FeatureMap<T>, params: &ProjectionParams<T>) -> Result<Array2<T>> {
    check_features(x, params)?;
    Ok(assign_rows(x.to_pixel_rows().view(), params.anchors_view(), params.sigma().view()))
}

pub fn encode_vertices<T: Scalar>(
    x: &FeatureMap<T>,
    q: &Array2<T>,
    params: &ProjectionParams<T>,
) -> Result<VertexFeatures<T>> {
    check_features(x, params)?;
    if q.dim() != (x.pixels(), params.vertices()) {
        return shape_err(format!(
            "assignment {:?} does not match [{}, {}]",
            q.dim(),
            x.pixels(),
            params.vertices()
        ));
    }
    let enc = encode_rows(x.to_pixel_rows().view(), q.view(), params.anchors_view(), params.sigma().view());
    Ok(VertexFeatures {
        starved_vertices: enc.starved(),
        features: enc.unit,
    })
}

pub fn affinity<T: Scalar>(z: &Array2<T>) -> Array2<T> {
    let mut a = z.dot(&z.t());
    // Enforce exact symmetry; GEMM blocking can round the two triangles differently.
    let k = a.nrows();
    for i in 0..k {
        for j in (i + 1)..k {
            let v = a[[i, j]];
            a[[j, i]] = v;
        }
    }
    a
}

pub fn project<T: Scalar>(x: &FeatureMap<T>, params: &ProjectionParams<T>) -> Result<GraphEmbedding<T>> {
    check_features(x, params)?;
    let (embedding, _) = project_rows(x.to_pixel_rows(), params);
    Ok(embedding)
}

/// `Q` for pixel rows `x` `[N, d]`.
///
/// The scaled distances are expanded as `x²·Vᵀ − 2 x·(W∘V)ᵀ + Σ_c w²v` with
/// `V = σ⁻²`, which turns the triple loop into two GEMMs.
pub(crate) fn assign_rows<T: Scalar>(
    x: ArrayView2<T>,
    anchors: ArrayView2<T>,
    sigma: ArrayView2<T>,
) -> Array2<T> {
    let inv_var = sigma.mapv(|s| T::one() / (s * s));
    let wv = &anchors * &inv_var;
    let bias: Array1<T> = (&wv * &anchors).sum_axis(Axis(1));
    let two = T::lit(2.0);
    let half = T::lit(-0.5);
    let mut q = x.mapv(|v| v * v).dot(&inv_var.t());
    q -= &(x.dot(&wv.t()) * two);
    q += &bias.view().insert_axis(Axis(0));
    q.mapv_inplace(|v| v * half);
    let mut q = q.as_standard_layout().into_owned();
    for mut qi in q.outer_iter_mut() {
        softmax_inplace(qi.as_slice_mut().expect("row is contiguous"));
    }
    q
}

pub(crate) fn softmax_inplace<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Intermediate quantities of vertex encoding, retained for backward.
#[derive(Debug, Clone)]
pub(crate) struct VertexEncoding<T> {
    /// `Σ_ij q^k_ij`.
    mass: Array1<T>,
    /// `Qᵀ X`.
    weighted_sum: Array2<T>,
    /// `z_k`.
    raw: Array2<T>,
    norms: Array1<T>,
    /// `z'_k`, zero for degenerate rows.
    unit: Array2<T>,
}

impl<T: Scalar> VertexEncoding<T> {
    fn starved(&self) -> Vec<usize> {
        self.mass
            .iter()
            .enumerate()
            .filter(|(_, &m)| m.as_f64() < MIN_MASS)
            .map(|(k, _)| k)
            .collect()
    }

    fn is_zero_row(&self, k: usize) -> bool {
        self.mass[k].as_f64() < MIN_MASS || self.norms[k].as_f64() < ZERO_NORM
    }
}

pub(crate) fn encode_rows<T: Scalar>(
    x: ArrayView2<T>,
    q: ArrayView2<T>,
    anchors: ArrayView2<T>,
    sigma: ArrayView2<T>,
) -> VertexEncoding<T> {
    let (kv, d) = anchors.dim();
    let mass = q.sum_axis(Axis(0));
    let weighted_sum = q.t().dot(&x);
    let mut raw = Array2::<T>::zeros((kv, d));
    let mut norms = Array1::<T>::zeros(kv);
    let mut unit = Array2::<T>::zeros((kv, d));
    for k in 0..kv {
        if mass[k].as_f64() < MIN_MASS {
            log::debug!("vertex {k} received no assignment mass");
            continue;
        }
        let mut sq = T::zero();
        for c in 0..d {
            let u = weighted_sum[[k, c]] / mass[k] - anchors[[k, c]];
            let z = u / sigma[[k, c]];
            raw[[k, c]] = z;
            sq += z * z;
        }
        let norm = sq.sqrt();
        norms[k] = norm;
        if norm.as_f64() >= ZERO_NORM {
            for c in 0..d {
                unit[[k, c]] = raw[[k, c]] / norm;
            }
        }
    }
    VertexEncoding {
        mass,
        weighted_sum,
        raw,
        norms,
        unit,
    }
}

/// Everything projection backward needs for one phase.
#[derive(Debug, Clone)]
pub(crate) struct ProjectionCache<T> {
    x: Array2<T>,
    q: Array2<T>,
    sigma: Array2<T>,
    enc: VertexEncoding<T>,
}

pub(crate) fn project_rows<T: Scalar>(
    x: Array2<T>,
    params: &ProjectionParams<T>,
) -> (GraphEmbedding<T>, ProjectionCache<T>) {
    let sigma = params.sigma();
    let anchors = params.anchors_view();
    let q = assign_rows(x.view(), anchors, sigma.view());
    let enc = encode_rows(x.view(), q.view(), anchors, sigma.view());
    let embedding = GraphEmbedding {
        affinity: affinity(&enc.unit),
        vertex_features: enc.unit.clone(),
        assignment: q.clone(),
        starved_vertices: enc.starved(),
    };
    (embedding, ProjectionCache { x, q, sigma, enc })
}

/// Backpropagates gradients of the unit vertex features `dz` `[K, d]` and of
/// the assignment `dq` `[N, K]`; accumulates parameter gradients and returns
/// the gradient of the pixel rows `[N, d]`.
pub(crate) fn project_backward<T: Scalar>(
    params: &mut ProjectionParams<T>,
    cache: &ProjectionCache<T>,
    dz_unit: ArrayView2<T>,
    dq: ArrayView2<T>,
) -> Array2<T> {
    let ProjectionCache { x, q, sigma, enc } = cache;
    let (n, d) = x.dim();
    let kv = sigma.nrows();
    let anchors = params.anchors_view().to_owned();

    let mut d_sigma = Array2::<T>::zeros((kv, d));
    let mut d_anchor = Array2::<T>::zeros((kv, d));
    let mut d_weighted = Array2::<T>::zeros((kv, d));
    let mut d_mass = Array1::<T>::zeros(kv);

    for k in 0..kv {
        if enc.is_zero_row(k) {
            continue;
        }
        // z' = z / ‖z‖
        let norm = enc.norms[k];
        let proj = (0..d).fold(T::zero(), |a, c| a + enc.unit[[k, c]] * dz_unit[[k, c]]);
        let mut d_mean_dot_sum = T::zero();
        for c in 0..d {
            let dz = (dz_unit[[k, c]] - enc.unit[[k, c]] * proj) / norm;
            // z = ū / σ
            let s = sigma[[k, c]];
            let du = dz / s;
            d_sigma[[k, c]] -= dz * enc.raw[[k, c]] / s;
            // ū = P / m − w
            d_weighted[[k, c]] = du / enc.mass[k];
            d_mean_dot_sum += du * enc.weighted_sum[[k, c]];
            d_anchor[[k, c]] -= du;
        }
        d_mass[k] = -d_mean_dot_sum / (enc.mass[k] * enc.mass[k]);
    }

    // P = Qᵀ X, m = Σ_n Q
    let mut dq_total = dq.to_owned();
    dq_total += &x.dot(&d_weighted.t());
    dq_total += &d_mass.view().insert_axis(Axis(0));
    let mut dx = q.dot(&d_weighted);

    // softmax over vertices
    let mut de = Array2::<T>::zeros((n, kv));
    for i in 0..n {
        let dot = (0..kv).fold(T::zero(), |a, k| a + q[[i, k]] * dq_total[[i, k]]);
        for k in 0..kv {
            de[[i, k]] = q[[i, k]] * (dq_total[[i, k]] - dot);
        }
    }

    // e = −½ Σ_c (x − w)² v, v = σ⁻²
    let inv_var = sigma.mapv(|s| T::one() / (s * s));
    let de_sum = de.sum_axis(Axis(0));
    let gx = de.t().dot(x);
    let gxx = de.t().dot(&x.mapv(|v| v * v));
    dx -= &(x * &de.dot(&inv_var));
    dx += &de.dot(&(&anchors * &inv_var));
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let mut d_inv_var = Array2::<T>::zeros((kv, d));
    for k in 0..kv {
        for c in 0..d {
            let w = anchors[[k, c]];
            let v = inv_var[[k, c]];
            d_anchor[[k, c]] += v * (gx[[k, c]] - w * de_sum[k]);
            d_inv_var[[k, c]] = -half * (gxx[[k, c]] - two * w * gx[[k, c]] + w * w * de_sum[k]);
        }
    }
    // σ = sigmoid(logit)
    let mut d_logit = Array2::<T>::zeros((kv, d));
    for k in 0..kv {
        for c in 0..d {
            let s = sigma[[k, c]];
            let ds = d_sigma[[k, c]] - two * d_inv_var[[k, c]] / (s * s * s);
            d_logit[[k, c]] = ds * s * (T::one() - s);
        }
    }
    accumulate(&mut params.anchors, d_anchor.view());
    accumulate(&mut params.scale_logits, d_logit.view());
    dx
}

pub(crate) fn accumulate<T: Scalar>(p: &mut Param<T>, g: ArrayView2<T>) {
    let mut view: ArrayViewMut2<T> = p.grad.view_mut().into_dimensionality().expect("rank-2 parameter");
    view += &g;
}
