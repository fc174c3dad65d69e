//! Scalar-loop transcriptions of graph projection and interaction. They share
//! no code with the production kernels and are only used as references.

use ndarray::{Array2, Ix1, Ix2};

use crate::interaction::InteractionParams;
use crate::nn::Affine;
use crate::projection::ProjectionParams;

type Mat = Vec<Vec<f64>>;

/// Plain nested-vector result of [`naive_project`].
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveGraph {
    /// `[N][K]`.
    pub assignment: Mat,
    /// `[K][d]`, unit rows or zeros.
    pub vertex_features: Mat,
    /// `[K][K]`.
    pub affinity: Mat,
}

fn to_mat(a: &Array2<f64>) -> Mat {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

pub fn mat_to_array(m: &Mat) -> Array2<f64> {
    let cols = m.first().map_or(0, Vec::len);
    Array2::from_shape_fn((m.len(), cols), |(i, j)| m[i][j])
}

/// `x` holds pixel rows `[N][d]`.
pub fn naive_project(x: &Mat, params: &ProjectionParams<f64>) -> NaiveGraph {
    let anchors = to_mat(&params.anchors.value.clone().into_dimensionality::<Ix2>().expect("[K, d]"));
    let logits = to_mat(&params.scale_logits.value.clone().into_dimensionality::<Ix2>().expect("[K, d]"));
    let n = x.len();
    let k = anchors.len();
    let d = anchors[0].len();

    let mut sigma = vec![vec![0.0; d]; k];
    for v in 0..k {
        for c in 0..d {
            sigma[v][c] = 1.0 / (1.0 + (-logits[v][c]).exp());
        }
    }

    let mut q = vec![vec![0.0; k]; n];
    for i in 0..n {
        let mut score = vec![0.0; k];
        for v in 0..k {
            let mut s = 0.0;
            for c in 0..d {
                let r = (x[i][c] - anchors[v][c]) / sigma[v][c];
                s += r * r;
            }
            score[v] = -0.5 * s;
        }
        let mut top = f64::NEG_INFINITY;
        for v in 0..k {
            if score[v] > top {
                top = score[v];
            }
        }
        let mut total = 0.0;
        for v in 0..k {
            total += (score[v] - top).exp();
        }
        for v in 0..k {
            q[i][v] = (score[v] - top).exp() / total;
        }
    }

    let mut z = vec![vec![0.0; d]; k];
    for v in 0..k {
        let mut mass = 0.0;
        for i in 0..n {
            mass += q[i][v];
        }
        if mass < 1e-12 {
            continue;
        }
        let mut raw = vec![0.0; d];
        for c in 0..d {
            let mut acc = 0.0;
            for i in 0..n {
                acc += q[i][v] * x[i][c];
            }
            raw[c] = (acc / mass - anchors[v][c]) / sigma[v][c];
        }
        let mut norm = 0.0;
        for c in 0..d {
            norm += raw[c] * raw[c];
        }
        norm = norm.sqrt();
        if norm >= 1e-8 {
            for c in 0..d {
                z[v][c] = raw[c] / norm;
            }
        }
    }

    let mut a = vec![vec![0.0; k]; k];
    for u in 0..k {
        for v in 0..k {
            let mut s = 0.0;
            for c in 0..d {
                s += z[u][c] * z[v][c];
            }
            a[u][v] = s;
        }
    }
    NaiveGraph {
        assignment: q,
        vertex_features: z,
        affinity: a,
    }
}

fn affine(layer: &Affine<f64>, x: &Mat) -> Mat {
    let w = layer.weight.value.clone().into_dimensionality::<Ix2>().expect("[out, in]");
    let b = layer.bias.value.clone().into_dimensionality::<Ix1>().expect("[out]");
    let (out, inp) = w.dim();
    let mut y = vec![vec![0.0; out]; x.len()];
    for r in 0..x.len() {
        for o in 0..out {
            let mut s = b[o];
            for i in 0..inp {
                s += x[r][i] * w[[o, i]];
            }
            y[r][o] = s;
        }
    }
    y
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, m, p) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            let mut s = 0.0;
            for t in 0..m {
                s += a[i][t] * b[t][j];
            }
            c[i][j] = s;
        }
    }
    c
}

fn softmax_scores(q: &Mat, keys: &Mat) -> Mat {
    let k = q.len();
    let mut a = vec![vec![0.0; k]; k];
    for i in 0..k {
        let mut row = vec![0.0; k];
        for j in 0..k {
            let mut s = 0.0;
            for c in 0..q[i].len() {
                s += q[i][c] * keys[j][c];
            }
            row[j] = s;
        }
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|v| (v - top).exp()).sum();
        for j in 0..k {
            a[i][j] = (row[j] - top).exp() / total;
        }
    }
    a
}

/// Vertex features of both phases `[K][d]` in, evolved features out.
pub fn naive_interact(z1: &Mat, z2: &Mat, params: &InteractionParams<f64>) -> (Mat, Mat) {
    let k = z1.len();
    let q1 = affine(&params.query_1, z1);
    let q2 = affine(&params.query_2, z2);
    let k1 = affine(&params.key_1, z1);
    let k2 = affine(&params.key_2, z2);
    let v1 = affine(&params.value_1, z1);
    let v2 = affine(&params.value_2, z2);

    let mut q = vec![Vec::new(); k];
    for i in 0..k {
        q[i].extend_from_slice(&q1[i]);
        q[i].extend_from_slice(&q2[i]);
    }
    let a12 = softmax_scores(&q, &k2);
    let a21 = softmax_scores(&q, &k1);

    let mut z1p = matmul(&a21, &v1);
    let mut z2p = matmul(&a12, &v2);
    for i in 0..k {
        for c in 0..z1[i].len() {
            z1p[i][c] += z1[i][c];
            z2p[i][c] += z2[i][c];
        }
    }
    let w1 = to_mat(&params.gcn_1.value.clone().into_dimensionality::<Ix2>().expect("[d, d]"));
    let w2 = to_mat(&params.gcn_2.value.clone().into_dimensionality::<Ix2>().expect("[d, d]"));
    let relu = |m: Mat| -> Mat { m.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect() };
    let out1 = relu(matmul(&a21, &matmul(&z1p, &w1)));
    let out2 = relu(matmul(&a12, &matmul(&z2p, &w2)));
    (out1, out2)
}

/// Largest absolute elementwise difference; infinite on shape mismatch.
pub fn max_abs_diff(a: &Array2<f64>, b: &Mat) -> f64 {
    if a.nrows() != b.len() || b.iter().any(|r| r.len() != a.ncols()) {
        return f64::INFINITY;
    }
    let mut m: f64 = 0.0;
    for (i, row) in b.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m = m.max((a[[i, j]] - v).abs());
        }
    }
    m
}
