//! Cross-graph interaction between the two phases' vertex features.
//!
//! Each phase's vertices are mapped to queries (`d → d/2`), keys and values
//! (`d → d`). The two half-width queries are concatenated into one unified
//! query, which is scored against each phase's keys to give the row-softmax
//! affinities `A_{1→2}` (against phase-2 keys) and `A_{2→1}` (against phase-1
//! keys). Messages and a one-layer graph convolution follow:
//!
//! ```text
//! Z'_1 = A_{2→1} Zv_1 + Z_1        Z̃_1 = relu(A_{2→1} Z'_1 W_1)
//! Z'_2 = A_{1→2} Zv_2 + Z_2        Z̃_2 = relu(A_{1→2} Z'_2 W_2)
//! ```

use ndarray::{concatenate, s, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Affine, HasParams, Param};
use crate::projection::{accumulate, softmax_inplace, GraphEmbedding};
use crate::Scalar;

/// Time phase selector for the per-phase transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    First,
    Second,
}

impl TryFrom<u8> for Phase {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Phase::First),
            2 => Ok(Phase::Second),
            other => Err(Error::InvalidArgument(format!("phase must be 1 or 2, got {other}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct InteractionParams<T> {
    pub query_1: Affine<T>,
    pub query_2: Affine<T>,
    pub key_1: Affine<T>,
    pub key_2: Affine<T>,
    pub value_1: Affine<T>,
    pub value_2: Affine<T>,
    /// `[d, d]`, right-multiplied.
    pub gcn_1: Param<T>,
    pub gcn_2: Param<T>,
}

impl<T: Scalar> InteractionParams<T> {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!("interaction dimension must be even, got {dim}")));
        }
        let half = dim / 2;
        let bound = 1.0 / (dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let mut gcn = || Param::new(ArrayD::from_shape_simple_fn(IxDyn(&[dim, dim]), || T::lit(dist.sample(rng))));
        let (gcn_1, gcn_2) = (gcn(), gcn());
        Ok(Self {
            query_1: Affine::new(dim, half, rng),
            query_2: Affine::new(dim, half, rng),
            key_1: Affine::new(dim, dim, rng),
            key_2: Affine::new(dim, dim, rng),
            value_1: Affine::new(dim, dim, rng),
            value_2: Affine::new(dim, dim, rng),
            gcn_1,
            gcn_2,
        })
    }

    pub fn dim(&self) -> usize {
        self.key_1.input_dim()
    }

    fn transforms(&self, phase: Phase) -> (&Affine<T>, &Affine<T>, &Affine<T>) {
        match phase {
            Phase::First => (&self.query_1, &self.key_1, &self.value_1),
            Phase::Second => (&self.query_2, &self.key_2, &self.value_2),
        }
    }

    pub fn gcn_weight(&self, phase: Phase) -> ArrayView2<'_, T> {
        let p = match phase {
            Phase::First => &self.gcn_1,
            Phase::Second => &self.gcn_2,
        };
        p.value.view().into_dimensionality::<Ix2>().expect("gcn weight is [d, d]")
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if !d.is_multiple_of(2) {
            return shape_err(format!("interaction dimension {d} is odd"));
        }
        for a in [&self.query_1, &self.query_2] {
            if a.input_dim() != d || a.output_dim() != d / 2 {
                return shape_err("query transforms must map d -> d/2");
            }
        }
        for a in [&self.key_1, &self.key_2, &self.value_1, &self.value_2] {
            if a.input_dim() != d || a.output_dim() != d {
                return shape_err("key/value transforms must map d -> d");
            }
        }
        for g in [&self.gcn_1, &self.gcn_2] {
            if g.shape() != [d, d] {
                return shape_err("gcn weights must be [d, d]");
            }
        }
        Ok(())
    }
}

impl<T: Scalar> HasParams<T> for InteractionParams<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.query_1.visit_params(&format!("{prefix}.query_1"), f);
        self.query_2.visit_params(&format!("{prefix}.query_2"), f);
        self.key_1.visit_params(&format!("{prefix}.key_1"), f);
        self.key_2.visit_params(&format!("{prefix}.key_2"), f);
        self.value_1.visit_params(&format!("{prefix}.value_1"), f);
        self.value_2.visit_params(&format!("{prefix}.value_2"), f);
        f(&format!("{prefix}.gcn_1"), &self.gcn_1);
        f(&format!("{prefix}.gcn_2"), &self.gcn_2);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.query_1.visit_params_mut(&format!("{prefix}.query_1"), f);
        self.query_2.visit_params_mut(&format!("{prefix}.query_2"), f);
        self.key_1.visit_params_mut(&format!("{prefix}.key_1"), f);
        self.key_2.visit_params_mut(&format!("{prefix}.key_2"), f);
        self.value_1.visit_params_mut(&format!("{prefix}.value_1"), f);
        self.value_2.visit_params_mut(&format!("{prefix}.value_2"), f);
        f(&format!("{prefix}.gcn_1"), &mut self.gcn_1);
        f(&format!("{prefix}.gcn_2"), &mut self.gcn_2);
    }
}

/// Both directional inter-graph affinities, each row-stochastic `[K, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterAffinity<T> {
    pub a_1to2: Array2<T>,
    pub a_2to1: Array2<T>,
}

/// Query, key and value graphs of one phase.
pub fn qkv_transform<T: Scalar>(
    z: &Array2<T>,
    params: &InteractionParams<T>,
    phase: Phase,
) -> Result<(Array2<T>, Array2<T>, Array2<T>)> {
    let (q, k, v) = params.transforms(phase);
    Ok((q.forward(z.view())?, k.forward(z.view())?, v.forward(z.view())?))
}

/// Feature-axis concatenation: phase-1 query columns first.
pub fn unify_queries<T: Scalar>(z_q1: &Array2<T>, z_q2: &Array2<T>) -> Result<Array2<T>> {
    if z_q1.dim() != z_q2.dim() {
        return shape_err(format!(
            "query graphs differ in shape: {:?} vs {:?}",
            z_q1.dim(),
            z_q2.dim()
        ));
    }
    Ok(concatenate(Axis(1), &[z_q1.view(), z_q2.view()]).expect("equal row counts"))
}

/// Row-softmax of `z_q · z_kᵀ`; row `r` weighs target vertices for source `r`.
pub fn inter_affinity<T: Scalar>(z_q: &Array2<T>, z_k_target: &Array2<T>) -> Result<Array2<T>> {
    if z_q.ncols() != z_k_target.ncols() {
        return shape_err(format!(
            "query width {} does not match key width {}",
            z_q.ncols(),
            z_k_target.ncols()
        ));
    }
    let mut scores = z_q.dot(&z_k_target.t()).as_standard_layout().into_owned();
    for mut row in scores.outer_iter_mut() {
        softmax_inplace(row.as_slice_mut().expect("row is contiguous"));
    }
    Ok(scores)
}

/// `a_inter · z_v_source + z_residual`.
pub fn cross_message<T: Scalar>(
    a_inter: &Array2<T>,
    z_v_source: &Array2<T>,
    z_residual: &Array2<T>,
) -> Result<Array2<T>> {
    if a_inter.ncols() != z_v_source.nrows() || (a_inter.nrows(), z_v_source.ncols()) != z_residual.dim() {
        return shape_err(format!(
            "cannot combine affinity {:?}, values {:?}, residual {:?}",
            a_inter.dim(),
            z_v_source.dim(),
            z_residual.dim()
        ));
    }
    Ok(a_inter.dot(z_v_source) + z_residual)
}

/// `relu(a_inter · z_prime · W)`.
pub fn intra_gcn<T: Scalar>(
    z_prime: &Array2<T>,
    a_inter: &Array2<T>,
    gcn_weight: ArrayView2<T>,
) -> Result<Array2<T>> {
    if a_inter.ncols() != z_prime.nrows() || gcn_weight.nrows() != z_prime.ncols() {
        return shape_err(format!(
            "cannot apply gcn: affinity {:?}, features {:?}, weight {:?}",
            a_inter.dim(),
            z_prime.dim(),
            gcn_weight.dim()
        ));
    }
    Ok(a_inter.dot(&z_prime.dot(&gcn_weight)).mapv(|v| v.max(T::zero())))
}

/// Full interaction; returns the evolved vertex features `(Z̃_1, Z̃_2)`.
pub fn interact<T: Scalar>(
    g1: &GraphEmbedding<T>,
    g2: &GraphEmbedding<T>,
    params: &InteractionParams<T>,
) -> Result<(Array2<T>, Array2<T>)> {
    let (out, _) = interact_rows(g1.vertex_features.view(), g2.vertex_features.view(), params)?;
    Ok(out)
}

/// Forward state retained for [`interact_backward`].
#[derive(Debug, Clone)]
pub(crate) struct InteractionCache<T> {
    z1: Array2<T>,
    z2: Array2<T>,
    zq: Array2<T>,
    zk1: Array2<T>,
    zk2: Array2<T>,
    zv1: Array2<T>,
    zv2: Array2<T>,
    pub(crate) affinity: InterAffinity<T>,
    z1p: Array2<T>,
    z2p: Array2<T>,
    m1: Array2<T>,
    m2: Array2<T>,
    out1: Array2<T>,
    out2: Array2<T>,
}

impl<T: Scalar> InteractionCache<T> {
    pub(crate) fn hash_pattern(&self, h: &mut impl std::hash::Hasher) {
        crate::nn::hash_signs(self.out1.iter(), h);
        crate::nn::hash_signs(self.out2.iter(), h);
    }
}

pub(crate) fn interact_rows<T: Scalar>(
    z1: ArrayView2<T>,
    z2: ArrayView2<T>,
    params: &InteractionParams<T>,
) -> Result<((Array2<T>, Array2<T>), InteractionCache<T>)> {
    params.validate()?;
    if z1.dim() != z2.dim() {
        return shape_err(format!(
            "graph embeddings differ: {:?} vs {:?}",
            z1.dim(),
            z2.dim()
        ));
    }
    if z1.ncols() != params.dim() {
        return shape_err(format!(
            "vertex dimension {} does not match interaction dimension {}",
            z1.ncols(),
            params.dim()
        ));
    }
    let (z1, z2) = (z1.to_owned(), z2.to_owned());
    let (zq1, zk1, zv1) = qkv_transform(&z1, params, Phase::First)?;
    let (zq2, zk2, zv2) = qkv_transform(&z2, params, Phase::Second)?;
    let zq = unify_queries(&zq1, &zq2)?;
    let a_1to2 = inter_affinity(&zq, &zk2)?;
    let a_2to1 = inter_affinity(&zq, &zk1)?;
    let z1p = cross_message(&a_2to1, &zv1, &z1)?;
    let z2p = cross_message(&a_1to2, &zv2, &z2)?;
    let m1 = z1p.dot(&params.gcn_weight(Phase::First));
    let m2 = z2p.dot(&params.gcn_weight(Phase::Second));
    let out1 = a_2to1.dot(&m1).mapv(|v| v.max(T::zero()));
    let out2 = a_1to2.dot(&m2).mapv(|v| v.max(T::zero()));
    let cache = InteractionCache {
        z1,
        z2,
        zq,
        zk1,
        zk2,
        zv1,
        zv2,
        affinity: InterAffinity { a_1to2, a_2to1 },
        z1p,
        z2p,
        m1,
        m2,
        out1: out1.clone(),
        out2: out2.clone(),
    };
    Ok(((out1, out2), cache))
}

fn softmax_rows_backward<T: Scalar>(a: &Array2<T>, da: &Array2<T>) -> Array2<T> {
    let mut ds = Array2::zeros(a.dim());
    for ((ar, dar), mut dsr) in a.outer_iter().zip(da.outer_iter()).zip(ds.outer_iter_mut()) {
        let dot = ar.dot(&dar);
        for ((d, &p), &g) in dsr.iter_mut().zip(ar.iter()).zip(dar.iter()) {
            *d = p * (g - dot);
        }
    }
    ds
}

/// Returns gradients of the two input vertex-feature matrices.
pub(crate) fn interact_backward<T: Scalar>(
    params: &mut InteractionParams<T>,
    cache: &InteractionCache<T>,
    d_out1: ArrayView2<T>,
    d_out2: ArrayView2<T>,
) -> (Array2<T>, Array2<T>) {
    let c = cache;
    let a12 = &c.affinity.a_1to2;
    let a21 = &c.affinity.a_2to1;
    let relu_mask = |out: &Array2<T>, g: ArrayView2<T>| {
        let mut g = g.to_owned();
        ndarray::Zip::from(&mut g).and(out).for_each(|g, &o| {
            if o <= T::zero() {
                *g = T::zero();
            }
        });
        g
    };

    // Z̃ = relu(A · Z' W)
    let dpre1 = relu_mask(&c.out1, d_out1);
    let dpre2 = relu_mask(&c.out2, d_out2);
    let mut da21 = dpre1.dot(&c.m1.t());
    let mut da12 = dpre2.dot(&c.m2.t());
    let dm1 = a21.t().dot(&dpre1);
    let dm2 = a12.t().dot(&dpre2);
    accumulate(&mut params.gcn_1, c.z1p.t().dot(&dm1).view());
    accumulate(&mut params.gcn_2, c.z2p.t().dot(&dm2).view());
    let dz1p = dm1.dot(&params.gcn_weight(Phase::First).t());
    let dz2p = dm2.dot(&params.gcn_weight(Phase::Second).t());

    // Z' = A · Zv + Z
    da21 += &dz1p.dot(&c.zv1.t());
    da12 += &dz2p.dot(&c.zv2.t());
    let dzv1 = a21.t().dot(&dz1p);
    let dzv2 = a12.t().dot(&dz2p);
    let mut dz1 = dz1p;
    let mut dz2 = dz2p;

    // A = softmax(Zq Zkᵀ)
    let ds21 = softmax_rows_backward(a21, &da21);
    let ds12 = softmax_rows_backward(a12, &da12);
    let dzq = ds21.dot(&c.zk1) + ds12.dot(&c.zk2);
    let dzk1 = ds21.t().dot(&c.zq);
    let dzk2 = ds12.t().dot(&c.zq);
    let half = c.zq.ncols() / 2;

    dz1 += &params.query_1.backward(c.z1.view(), dzq.slice(s![.., ..half]));
    dz2 += &params.query_2.backward(c.z2.view(), dzq.slice(s![.., half..]));
    dz1 += &params.key_1.backward(c.z1.view(), dzk1.view());
    dz2 += &params.key_2.backward(c.z2.view(), dzk2.view());
    dz1 += &params.value_1.backward(c.z1.view(), dzv1.view());
    dz2 += &params.value_2.backward(c.z2.view(), dzv2.view());
    (dz1, dz2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_params(d: usize) -> InteractionParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = InteractionParams::new(d, &mut rng).unwrap();
        for a in [&mut p.key_1, &mut p.key_2, &mut p.value_1, &mut p.value_2] {
            *a = Affine::from_parts(Array2::eye(d), vec![0.0; d]);
        }
        let mut q = Array2::zeros((d / 2, d));
        for i in 0..d / 2 {
            q[[i, i]] = 1.0;
        }
        p.query_1 = Affine::from_parts(q.clone(), vec![0.0; d / 2]);
        p.query_2 = Affine::from_parts(q, vec![0.0; d / 2]);
        p
    }

    #[test]
    fn identity_transforms_pass_features_through() {
        let p = identity_params(4);
        let z = array![[0.1, 0.2, 0.3, 0.4], [1.0, -1.0, 0.5, 0.0]];
        let (q, k, v) = qkv_transform(&z, &p, Phase::Second).unwrap();
        assert_eq!(k, z);
        assert_eq!(v, z);
        assert_eq!(q, z.slice(s![.., ..2]).to_owned());
    }

    #[test]
    fn zero_transforms_give_zero_graphs() {
        let mut p = identity_params(4);
        p.visit_params_mut("", &mut |_, p| p.value.fill(0.0));
        let z = Array2::from_elem((3, 4), 0.7);
        let (q, k, v) = qkv_transform(&z, &p, Phase::First).unwrap();
        assert!(q.iter().chain(k.iter()).chain(v.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn phase_parses_from_index() {
        assert_eq!(Phase::try_from(1).unwrap(), Phase::First);
        assert_eq!(Phase::try_from(2).unwrap(), Phase::Second);
        assert!(Phase::try_from(3).is_err());
    }

    #[test]
    fn unify_concatenates_features() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[5.0, 6.0], [7.0, 8.0]];
        let ab = unify_queries(&a, &b).unwrap();
        assert_eq!(ab, array![[1.0, 2.0, 5.0, 6.0], [3.0, 4.0, 7.0, 8.0]]);
        let ba = unify_queries(&b, &a).unwrap();
        assert_eq!(ab.slice(s![.., ..2]), ba.slice(s![.., 2..]));
        assert_eq!(unify_queries(&Array2::<f64>::zeros((3, 2)), &Array2::zeros((3, 2))).unwrap(), Array2::<f64>::zeros((3, 4)));
        assert!(unify_queries(&a, &Array2::zeros((3, 2))).is_err());
    }

    #[test]
    fn affinity_saturates_and_flattens() {
        let zq = Array2::<f64>::zeros((3, 2));
        let zk = array![[1.0, 2.0], [3.0, -1.0], [0.0, 5.0]];
        let a = inter_affinity(&zq, &zk).unwrap();
        assert!(a.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let zq = array![[100.0, 0.0]];
        let zk = array![[0.0, 1.0], [1.0, 0.0], [0.0, -1.0]];
        let a = inter_affinity(&zq, &zk).unwrap();
        assert!((a[[0, 1]] - 1.0f64).abs() < 1e-12);
    }

    #[test]
    fn cross_message_cases() {
        let z = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let r = array![[0.5, 0.5, 0.5], [-1.0, 0.0, 1.0]];
        assert_eq!(cross_message(&Array2::eye(2), &z, &r).unwrap(), &z + &r);
        let uniform = Array2::from_elem((2, 2), 0.5);
        let out = cross_message(&uniform, &z, &r).unwrap();
        let mean = z.mean_axis(Axis(0)).unwrap();
        for (row, res) in out.outer_iter().zip(r.outer_iter()) {
            assert_eq!(row.to_owned(), &mean + &res);
        }
        assert_eq!(cross_message(&Array2::zeros((2, 2)), &z, &r).unwrap(), r);
    }

    #[test]
    fn gcn_clips_negative() {
        let w = Array2::<f64>::eye(2);
        assert_eq!(intra_gcn(&Array2::<f64>::zeros((2, 2)), &Array2::eye(2), w.view()).unwrap(), Array2::<f64>::zeros((2, 2)));
        let z = array![[-1.0, -2.0], [-0.5, -3.0]];
        let a = Array2::from_elem((2, 2), 0.5);
        assert_eq!(intra_gcn(&z, &a, w.view()).unwrap(), Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn odd_dimension_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(InteractionParams::<f32>::new(5, &mut rng).is_err());
    }
}
