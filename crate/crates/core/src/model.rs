//! The full change detector: siamese encoder, graph interaction branch, head.

use std::hash::Hasher;

use ndarray::{s, Array2, Array3, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderCache, EncoderConfig, FeatureMap};
use crate::error::{shape_err, Error, Result};
use crate::head::{ChangeHead, ChangeMap, HeadCache};
use crate::interaction::{interact_backward, interact_rows, InteractionCache, InteractionParams};
use crate::nn::{HasParams, Param};
use crate::projection::{project_backward, project_rows, ProjectionCache, ProjectionParams};
use crate::Scalar;

/// Architecture hyperparameters; everything a checkpoint must agree on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Number of graph vertices K.
    pub vertices: usize,
    /// `false` is the ablation baseline: encoder features go straight to the head.
    pub use_gim: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            vertices: 32,
            use_gim: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.vertices == 0 {
            return Err(Error::Config("vertices must be >= 1".into()));
        }
        if self.use_gim && !self.encoder.out_channels().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "graph interaction needs an even feature width, got {}",
                self.encoder.out_channels()
            )));
        }
        Ok(())
    }
}

/// Graph projection and interaction parameters.
#[derive(Debug, Clone)]
pub struct Gim<T> {
    pub projection: ProjectionParams<T>,
    pub interaction: InteractionParams<T>,
}

#[derive(Debug, Clone)]
pub struct BgiNet<T> {
    config: ModelConfig,
    pub encoder: Encoder<T>,
    pub gim: Option<Gim<T>>,
    pub head: ChangeHead<T>,
}

struct GimCache<T> {
    proj1: ProjectionCache<T>,
    proj2: ProjectionCache<T>,
    inter: InteractionCache<T>,
    q1: Array2<T>,
    q2: Array2<T>,
    zt1: Array2<T>,
    zt2: Array2<T>,
}

struct SampleCache<T> {
    gim: Option<GimCache<T>>,
    head: HeadCache<T>,
}

/// State retained between [`BgiNet::forward_train`] and [`BgiNet::backward`].
pub struct ForwardCache<T> {
    enc1: EncoderCache<T>,
    enc2: EncoderCache<T>,
    samples: Vec<SampleCache<T>>,
    feature_dim: (usize, usize, usize, usize),
}

impl<T: Scalar> ForwardCache<T> {
    /// Hash of every rectifier, max-pool and absolute-value branch taken in
    /// the forward pass. Equal signatures mean the loss is smooth between
    /// the two evaluations.
    pub fn activation_signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.enc1.hash_pattern(&mut h);
        self.enc2.hash_pattern(&mut h);
        for s in &self.samples {
            if let Some(g) = &s.gim {
                g.inter.hash_pattern(&mut h);
            }
            s.head.hash_pattern(&mut h);
        }
        h.finish()
    }
}

/// Per-pair output of a training forward pass.
pub struct TrainOutput<T> {
    /// `[batch, H, W]`.
    pub logits: Array3<T>,
    /// Vertices with no assignment mass, per sample and phase.
    pub starved_vertices: usize,
}

fn rows_of<T: Scalar>(x: &Array4<T>, b: usize) -> Array2<T> {
    let (_, d, h, w) = x.dim();
    x.slice(s![b, .., .., ..])
        .into_shape((d, h * w))
        .expect("contiguous sample")
        .t()
        .to_owned()
}

impl<T: Scalar> BgiNet<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config.encoder, &mut rng)?;
        let d = config.encoder.out_channels();
        let gim = if config.use_gim {
            Some(Gim {
                projection: ProjectionParams::new(config.vertices, d, &mut rng),
                interaction: InteractionParams::new(d, &mut rng)?,
            })
        } else {
            None
        };
        let head = ChangeHead::new(d, &mut rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            gim,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_pair(&self, a: &Array4<T>, b: &Array4<T>) -> Result<()> {
        if a.dim() != b.dim() {
            return shape_err(format!("bitemporal batches differ: {:?} vs {:?}", a.dim(), b.dim()));
        }
        self.encoder.check_input(a)
    }

    /// Graph branch on pixel rows of both phases; returns reprojected rows.
    fn gim_rows(&self, x1: Array2<T>, x2: Array2<T>) -> Result<(Array2<T>, Array2<T>, Option<GimCache<T>>, usize)> {
        let Some(gim) = &self.gim else {
            return Ok((x1, x2, None, 0));
        };
        let (g1, proj1) = project_rows(x1.clone(), &gim.projection);
        let (g2, proj2) = project_rows(x2.clone(), &gim.projection);
        let starved = g1.starved_vertices.len() + g2.starved_vertices.len();
        let ((zt1, zt2), inter) = interact_rows(g1.vertex_features.view(), g2.vertex_features.view(), &gim.interaction)?;
        let x1_new = x1 + g1.assignment.dot(&zt1);
        let x2_new = x2 + g2.assignment.dot(&zt2);
        let cache = GimCache {
            proj1,
            proj2,
            inter,
            q1: g1.assignment,
            q2: g2.assignment,
            zt1,
            zt2,
        };
        Ok((x1_new, x2_new, Some(cache), starved))
    }

    /// Evaluation-mode forward over a batch of pairs `[batch, 3, H, W]`.
    pub fn forward(&self, image1: &Array4<T>, image2: &Array4<T>) -> Result<Vec<ChangeMap<T>>> {
        self.check_pair(image1, image2)?;
        let f1 = self.encoder.forward_eval(image1)?;
        let f2 = self.encoder.forward_eval(image2)?;
        let (batch, _, h, w) = f1.dim();
        let (_, _, out_h, out_w) = image1.dim();
        (0..batch)
            .map(|b| {
                let (x1, x2, _, _) = self.gim_rows(rows_of(&f1, b), rows_of(&f2, b))?;
                let (logits, _) = self.head.forward_rows(x1.view(), x2.view(), (h, w), (out_h, out_w));
                Ok(ChangeMap::from_logits(logits))
            })
            .collect()
    }

    /// Training-mode forward: batch-statistics normalization and cached activations.
    pub fn forward_train(&mut self, image1: &Array4<T>, image2: &Array4<T>) -> Result<(TrainOutput<T>, ForwardCache<T>)> {
        self.check_pair(image1, image2)?;
        let (f1, enc1) = self.encoder.forward_train(image1)?;
        let (f2, enc2) = self.encoder.forward_train(image2)?;
        let (batch, _, h, w) = f1.dim();
        let (_, _, out_h, out_w) = image1.dim();
        let mut logits = Array3::zeros((batch, out_h, out_w));
        let mut samples = Vec::with_capacity(batch);
        let mut starved_vertices = 0;
        for b in 0..batch {
            let (x1, x2, gim, starved) = self.gim_rows(rows_of(&f1, b), rows_of(&f2, b))?;
            starved_vertices += starved;
            let (l, head) = self.head.forward_rows(x1.view(), x2.view(), (h, w), (out_h, out_w));
            logits.slice_mut(s![b, .., ..]).assign(&l);
            samples.push(SampleCache { gim, head });
        }
        Ok((
            TrainOutput { logits, starved_vertices },
            ForwardCache {
                enc1,
                enc2,
                samples,
                feature_dim: f1.dim(),
            },
        ))
    }

    /// Accumulates parameter gradients of a scalar loss given `dL/dlogits`.
    pub fn backward(&mut self, cache: ForwardCache<T>, d_logits: &Array3<T>) {
        let (batch, d, h, w) = cache.feature_dim;
        let mut df1 = Array4::zeros((batch, d, h, w));
        let mut df2 = Array4::zeros((batch, d, h, w));
        for (b, sample) in cache.samples.iter().enumerate() {
            let (mut dx1, mut dx2) = self.head.backward_rows(&sample.head, d_logits.index_axis(Axis(0), b));
            if let (Some(gc), Some(gim)) = (&sample.gim, &mut self.gim) {
                let dq1 = dx1.dot(&gc.zt1.t());
                let dq2 = dx2.dot(&gc.zt2.t());
                let dzt1 = gc.q1.t().dot(&dx1);
                let dzt2 = gc.q2.t().dot(&dx2);
                let (dz1, dz2) = interact_backward(&mut gim.interaction, &gc.inter, dzt1.view(), dzt2.view());
                dx1 += &project_backward(&mut gim.projection, &gc.proj1, dz1.view(), dq1.view());
                dx2 += &project_backward(&mut gim.projection, &gc.proj2, dz2.view(), dq2.view());
            }
            for (dst, src) in [(&mut df1, &dx1), (&mut df2, &dx2)] {
                dst.slice_mut(s![b, .., .., ..])
                    .into_shape((d, h * w))
                    .expect("contiguous sample")
                    .assign(&src.t());
            }
        }
        self.encoder.backward(cache.enc1, df1);
        self.encoder.backward(cache.enc2, df2);
    }

    pub fn num_params(&self) -> usize {
        HasParams::num_params(self)
    }
}

impl<T: Scalar> HasParams<T> for BgiNet<T> {
    fn visit_params(&self, _prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit_params("encoder", f);
        if let Some(gim) = &self.gim {
            gim.projection.visit_params("projection", f);
            gim.interaction.visit_params("interaction", f);
        }
        self.head.visit_params("head", f);
    }

    fn visit_params_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_params_mut("encoder", f);
        if let Some(gim) = &mut self.gim {
            gim.projection.visit_params_mut("projection", f);
            gim.interaction.visit_params_mut("interaction", f);
        }
        self.head.visit_params_mut("head", f);
    }

    fn visit_buffers(&self, _prefix: &str, f: &mut dyn FnMut(&str, &ArrayD<T>)) {
        self.encoder.visit_buffers("encoder", f);
    }

    fn visit_buffers_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {
        self.encoder.visit_buffers_mut("encoder", f);
    }
}

/// Evaluation-mode change map for one pair of `[3, H, W]` images.
pub fn bginet_forward<T: Scalar>(image1: &Array3<T>, image2: &Array3<T>, model: &BgiNet<T>) -> Result<ChangeMap<T>> {
    let a = image1.clone().insert_axis(Axis(0));
    let b = image2.clone().insert_axis(Axis(0));
    Ok(model.forward(&a, &b)?.remove(0))
}

/// Evaluation-mode features of one image, for composing the stages by hand.
pub fn features<T: Scalar>(image: &Array3<T>, model: &BgiNet<T>) -> Result<FeatureMap<T>> {
    crate::encoder::encode(image, &model.encoder)
}
