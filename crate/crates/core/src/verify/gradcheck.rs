//! Central finite differences against the hand-written backward passes.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use ndarray::{Array2, Array3, Array4, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::interaction::{interact_backward, interact_rows, InteractionParams};
use crate::loss::{batch_loss_and_grad, loss_and_grad, LossConfig};
use crate::model::{BgiNet, ModelConfig};
use crate::nn::HasParams;
use crate::projection::{project_backward, project_rows, ProjectionParams};

/// Denominator floor of the elementwise relative error.
pub const REL_FLOOR: f64 = 1e-12;
/// A group's error is measured against at least this fraction of the largest
/// gradient anywhere in the target, so groups whose true gradient is exactly
/// zero are judged on round-off rather than on a ratio of noise to noise.
pub const GROUP_FLOOR: f64 = 1e-6;

/// A differentiable scalar function of named tensors (parameter groups).
pub trait GradTarget {
    /// Group names and element counts, in a fixed order.
    fn groups(&self) -> Vec<(String, usize)>;
    /// Applies `f` to one scalar of one group.
    fn update(&mut self, group: usize, index: usize, f: &mut dyn FnMut(&mut f64));
    fn loss(&mut self) -> Result<f64>;
    /// Loss and analytic gradients, one flat vector per group in [`GradTarget::groups`] order.
    fn loss_and_grads(&mut self) -> Result<(f64, Vec<Vec<f64>>)>;
    /// Branch pattern of the most recent evaluation; `None` for smooth targets.
    fn signature(&self) -> Option<u64> {
        None
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub len: usize,
    /// Max over elements of `|a − n| / max(|a|, |n|, 1e-12)`.
    pub max_rel_error: f64,
    /// `max |a − n| / max(max |a|, max |n|, floor)` over the group.
    pub scaled_error: f64,
    pub max_abs_error: f64,
    pub max_abs_grad: f64,
    /// Coordinates whose ±step evaluations switched a rectifier, pooling or
    /// absolute-value branch; a central difference across a kink is not a
    /// derivative estimate, so they are excluded from the errors.
    pub kinked: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub precision: &'static str,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_scaled_error(&self) -> f64 {
        self.groups.iter().map(|g| g.scaled_error).fold(0.0, f64::max)
    }

    pub fn kinked(&self) -> usize {
        self.groups.iter().map(|g| g.kinked).sum()
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.len - g.kinked).sum()
    }

    pub fn worst_group(&self) -> Option<&GroupReport> {
        self.groups.iter().max_by(|a, b| a.scaled_error.total_cmp(&b.scaled_error))
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences for every scalar of every group.
pub fn finite_diff_grad(target: &mut dyn GradTarget, step: f64) -> Result<GradCheckReport> {
    let (_, analytic) = target.loss_and_grads()?;
    let base = target.signature();
    let global = analytic.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut groups = Vec::new();
    for (g, (name, len)) in target.groups().into_iter().enumerate() {
        let mut report = GroupReport {
            name,
            len,
            max_rel_error: 0.0,
            scaled_error: 0.0,
            max_abs_error: 0.0,
            max_abs_grad: 0.0,
            kinked: 0,
        };
        for i in 0..len {
            let mut orig = 0.0;
            target.update(g, i, &mut |v| orig = *v);
            target.update(g, i, &mut |v| *v = orig + step);
            let plus = target.loss()?;
            let sig_plus = target.signature();
            target.update(g, i, &mut |v| *v = orig - step);
            let minus = target.loss()?;
            let sig_minus = target.signature();
            target.update(g, i, &mut |v| *v = orig);
            if sig_plus != base || sig_minus != base {
                report.kinked += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[g][i];
            report.max_rel_error = report.max_rel_error.max(rel_error(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_abs_grad = report.max_abs_grad.max(a.abs()).max(numeric.abs());
        }
        report.scaled_error = report.max_abs_error / report.max_abs_grad.max(GROUP_FLOOR * global).max(REL_FLOOR);
        groups.push(report);
    }
    Ok(GradCheckReport {
        step,
        precision: "f64",
        groups,
    })
}

fn flat(a: &mut ArrayD<f64>, index: usize) -> &mut f64 {
    a.iter_mut().nth(index).expect("index within group")
}

/// A target over a plain parameter vector with closure-defined loss and gradient.
pub struct FnTarget<F, G> {
    pub theta: Vec<f64>,
    pub f: F,
    pub grad: G,
}

impl<F: Fn(&[f64]) -> f64, G: Fn(&[f64]) -> Vec<f64>> GradTarget for FnTarget<F, G> {
    fn groups(&self) -> Vec<(String, usize)> {
        vec![("theta".into(), self.theta.len())]
    }

    fn update(&mut self, _: usize, index: usize, f: &mut dyn FnMut(&mut f64)) {
        f(&mut self.theta[index])
    }

    fn loss(&mut self) -> Result<f64> {
        Ok((self.f)(&self.theta))
    }

    fn loss_and_grads(&mut self) -> Result<(f64, Vec<Vec<f64>>)> {
        Ok(((self.f)(&self.theta), vec![(self.grad)(&self.theta)]))
    }
}

fn normal_array<R: Rng>(shape: (usize, usize), scale: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || scale * rng.sample::<f64, _>(StandardNormal))
}

fn weighted_sum(a: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (a * w).sum()
}

/// Loss with respect to the logits of one map.
pub struct LossTarget {
    pub logits: Array2<f64>,
    pub gt: Array2<u8>,
    pub cfg: LossConfig,
}

impl LossTarget {
    pub fn random(seed: u64, h: usize, w: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            logits: normal_array((h, w), 2.0, &mut rng),
            gt: Array2::from_shape_simple_fn((h, w), || u8::from(rng.gen_bool(0.4))),
            cfg: LossConfig::default(),
        }
    }
}

impl GradTarget for LossTarget {
    fn groups(&self) -> Vec<(String, usize)> {
        vec![("logits".into(), self.logits.len())]
    }

    fn update(&mut self, _: usize, index: usize, f: &mut dyn FnMut(&mut f64)) {
        let w = self.logits.ncols();
        f(&mut self.logits[[index / w, index % w]])
    }

    fn loss(&mut self) -> Result<f64> {
        Ok(loss_and_grad(self.logits.view(), self.gt.view(), &self.cfg)?.0.total)
    }

    fn loss_and_grads(&mut self) -> Result<(f64, Vec<Vec<f64>>)> {
        let (parts, g) = loss_and_grad(self.logits.view(), self.gt.view(), &self.cfg)?;
        Ok((parts.total, vec![g.iter().copied().collect()]))
    }
}

/// Projection of pixel rows; the loss is a fixed random linear functional of
/// the unit vertex features and the assignment.
pub struct ProjectionTarget {
    pub x: Array2<f64>,
    pub params: ProjectionParams<f64>,
    dz: Array2<f64>,
    dq: Array2<f64>,
}

impl ProjectionTarget {
    pub fn random(seed: u64, pixels: usize, dim: usize, vertices: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal_array((pixels, dim), 0.5, &mut rng);
        let anchors = normal_array((vertices, dim), 0.5, &mut rng);
        let logits = normal_array((vertices, dim), 0.5, &mut rng);
        let params = ProjectionParams::from_arrays(anchors, logits).expect("matching shapes");
        Self {
            dz: normal_array((vertices, dim), 1.0, &mut rng),
            dq: normal_array((pixels, vertices), 1.0, &mut rng),
            x,
            params,
        }
    }
}

impl GradTarget for ProjectionTarget {
    fn groups(&self) -> Vec<(String, usize)> {
        vec![
            ("x".into(), self.x.len()),
            ("anchors".into(), self.params.anchors.len()),
            ("scale_logits".into(), self.params.scale_logits.len()),
        ]
    }

    fn update(&mut self, group: usize, index: usize, f: &mut dyn FnMut(&mut f64)) {
        let v = match group {
            0 => {
                let w = self.x.ncols();
                &mut self.x[[index / w, index % w]]
            }
            1 => flat(&mut self.params.anchors.value, index),
            _ => flat(&mut self.params.scale_logits.value, index),
        };
        f(v)
    }

    fn loss(&mut self) -> Result<f64> {
        let (g, _) = project_rows(self.x.clone(), &self.params);
        Ok(weighted_sum(&g.vertex_features, &self.dz) + weighted_sum(&g.assignment, &self.dq))
    }

    fn loss_and_grads(&mut self) -> Result<(f64, Vec<Vec<f64>>)> {
        let loss = self.loss()?;
        let (_, cache) = project_rows(self.x.clone(), &self.params);
        self.params.zero_grad();
        let dx = project_backward(&mut self.params, &cache, self.dz.view(), self.dq.view());
        Ok((
            loss,
            vec![
                dx.iter().copied().collect(),
                self.params.anchors.grad.iter().copied().collect(),
                self.params.scale_logits.grad.iter().copied().collect(),
            ],
        ))
    }
}

/// Graph interaction; the loss is a random linear functional of both outputs.
pub struct InteractionTarget {
    pub z1: Array2<f64>,
    pub z2: Array2<f64>,
    pub params: InteractionParams<f64>,
    d1: Array2<f64>,
    d2: Array2<f64>,
    last_signature: Option<u64>,
}

impl InteractionTarget {
    pub fn random(seed: u64, vertices: usize, dim: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = InteractionParams::new(dim, &mut rng)?;
        // non-zero biases so their gradients are exercised too
        params.visit_params_mut("", &mut |_, p| {
            if p.value.ndim() == 1 {
                for v in p.value.iter_mut() {
                    *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
                }
            }
        });
        Ok(Self {
            z1: normal_array((vertices, dim), 1.0, &mut rng),
            z2: normal_array((vertices, dim), 1.0, &mut rng),
            d1: normal_array((vertices, dim), 1.0, &mut rng),
            d2: normal_array((vertices, dim), 1.0, &mut rng),
            params,
            last_signature: None,
        })
    }
}

impl GradTarget for InteractionTarget {
    fn groups(&self) -> Vec<(String, usize)> {
        let mut g = vec![("z1".into(), self.z1.len()), ("z2".into(), self.z2.len())];
        self.params.visit_params("interaction", &mut |n, p| g.push((n.to_string(), p.len())));
        g
    }

    fn update(&mut self, group: usize, index: usize, f: &mut dyn FnMut(&mut f64)) {
        let w = self.z1.ncols();
        let p = &mut self.params;
        let v = match group {
            0 => &mut self.z1[[index / w, index % w]],
            1 => &mut self.z2[[index / w, index % w]],
            2 => flat(&mut p.query_1.weight.value, index),
            3 => flat(&mut p.query_1.bias.value, index),
            4 => flat(&mut p.query_2.weight.value, index),
            5 => flat(&mut p.query_2.bias.value, index),
            6 => flat(&mut p.key_1.weight.value, index),
            7 => flat(&mut p.key_1.bias.value, index),
            8 => flat(&mut p.key_2.weight.value, index),
            9 => flat(&mut p.key_2.bias.value, index),
            10 => flat(&mut p.value_1.weight.value, index),
            11 => flat(&mut p.value_1.bias.value, index),
            12 => flat(&mut p.value_2.weight.value, index),
            13 => flat(&mut p.value_2.bias.value, index),
            14 => flat(&mut p.gcn_1.value, index),
            _ => flat(&mut p.gcn_2.value, index),
        };
        f(v)
    }

    fn loss(&mut self) -> Result<f64> {
        let ((o1, o2), cache) = interact_rows(self.z1.view(), self.z2.view(), &self.params)?;
        let mut h = DefaultHasher::new();
        cache.hash_pattern(&mut h);
        self.last_signature = Some(h.finish());
        Ok(weighted_sum(&o1, &self.d1) + weighted_sum(&o2, &self.d2))
    }

    fn loss_and_grads(&mut self) -> Result<(f64, Vec<Vec<f64>>)> {
        let loss = self.loss()?;
        let (_, cache) = interact_rows(self.z1.view(), self.z2.view(), &self.params)?;
        self.params.zero_grad();
        let (dz1, dz2) = interact_backward(&mut self.params, &cache, self.d1.view(), self.d2.view());
        let mut grads = vec![dz1.iter().copied().collect(), dz2.iter().copied().collect()];
        self.params.visit_params("", &mut |_, p| grads.push(p.grad.iter().copied().collect()));
        Ok((loss, grads))
    }

    fn signature(&self) -> Option<u64> {
        self.last_signature
    }
}

/// The reduced architecture used for whole-model gradient checks.
pub fn reduced_model_config(vertices: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            in_channels: 3,
            stage_channels: vec![4, 4, 8, 8],
            output_stride: 4,
            blocks_per_stage: vec![1, 1, 1],
        },
        vertices,
        use_gim: true,
    }
}

/// Training-mode forward, joint loss, full backward.
pub struct ModelTarget {
    pub model: BgiNet<f64>,
    pub image1: Array4<f64>,
    pub image2: Array4<f64>,
    pub masks: Array3<u8>,
    pub loss_cfg: LossConfig,
    last_signature: Option<u64>,
}

impl ModelTarget {
    pub fn random(config: &ModelConfig, seed: u64, batch: usize, size: usize) -> Result<Self> {
        let model = BgiNet::new(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let mut image = || Array4::from_shape_simple_fn((batch, 3, size, size), || rng.sample::<f64, _>(StandardNormal));
        let (image1, image2) = (image(), image());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ed);
        let masks = Array3::from_shape_simple_fn((batch, size, size), || u8::from(rng.gen_bool(0.3)));
        Ok(Self {
            model,
            image1,
            image2,
            masks,
            loss_cfg: LossConfig::default(),
            last_signature: None,
        })
    }
}

impl GradTarget for ModelTarget {
    fn groups(&self) -> Vec<(String, usize)> {
        let mut g = Vec::new();
        self.model.visit_params("", &mut |n, p| g.push((n.to_string(), p.len())));
        g
    }

    fn update(&mut self, group: usize, index: usize, f: &mut dyn FnMut(&mut f64)) {
        let mut k = 0;
        self.model.visit_params_mut("", &mut |_, p| {
            if k == group {
                f(flat(&mut p.value, index));
            }
            k += 1;
        });
    }

    fn loss(&mut self) -> Result<f64> {
        let (out, cache) = self.model.forward_train(&self.image1, &self.image2)?;
        self.last_signature = Some(cache.activation_signature());
        Ok(batch_loss_and_grad(&out.logits, &self.masks, &self.loss_cfg)?.0.total)
    }

    fn loss_and_grads(&mut self) -> Result<(f64, Vec<Vec<f64>>)> {
        self.model.zero_grad();
        let (out, cache) = self.model.forward_train(&self.image1, &self.image2)?;
        self.last_signature = Some(cache.activation_signature());
        let (parts, d_logits) = batch_loss_and_grad(&out.logits, &self.masks, &self.loss_cfg)?;
        self.model.backward(cache, &d_logits);
        let mut grads = Vec::new();
        self.model.visit_params("", &mut |_, p| grads.push(p.grad.iter().copied().collect()));
        Ok((parts.total, grads))
    }

    fn signature(&self) -> Option<u64> {
        self.last_signature
    }
}
