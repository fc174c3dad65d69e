//! Baseline versus graph-interaction training on synthetic pseudo-change data.

use std::time::Instant;

use serde::Serialize;

use crate::data::{synth_generate, SynthConfig};
use crate::error::{Error, Result};
use crate::train::{evaluate, train_on, TrainConfig};

#[derive(Debug, Clone)]
pub struct AblationConfig {
    /// Generates `train_pairs + val_pairs + test_pairs` scenes, split in that order.
    pub synth: SynthConfig,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub test_pairs: usize,
    /// Shared by both arms; `model.use_gim` and `seed` are overridden per run.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    /// Reduced-width encoder and synthetic difficulty calibrated so the
    /// baseline lands well below saturation after 100 epochs.
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.model.encoder.stage_channels = vec![16, 16, 32, 64];
        train.model.encoder.output_stride = 8;
        Self {
            synth: SynthConfig::default(),
            train_pairs: 200,
            val_pairs: 40,
            test_pairs: 40,
            train,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRun {
    pub use_gim: bool,
    pub seed: u64,
    /// Test F1 in [0, 1] of the best-validation checkpoint.
    pub test_f1: f64,
    pub best_epoch: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn mean_f1(&self, use_gim: bool) -> f64 {
        let f: Vec<f64> = self.runs.iter().filter(|r| r.use_gim == use_gim).map(|r| r.test_f1).collect();
        f.iter().sum::<f64>() / f.len().max(1) as f64
    }
}

pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationReport> {
    let total = cfg.train_pairs + cfg.val_pairs + cfg.test_pairs;
    let records = synth_generate(&SynthConfig {
        pairs: total,
        ..cfg.synth.clone()
    })?;
    if cfg.train_pairs == 0 || cfg.test_pairs == 0 {
        return Err(Error::Config("ablation needs training and test pairs".into()));
    }
    let (train, rest) = records.split_at(cfg.train_pairs);
    let (val, test) = rest.split_at(cfg.val_pairs);
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for use_gim in [false, true] {
            let mut tc = cfg.train.clone();
            tc.seed = seed;
            tc.model.use_gim = use_gim;
            let start = Instant::now();
            let outcome = train_on(&tc, train, val)?;
            let report = evaluate(&outcome.best.model, test, tc.threshold, "test", None)?;
            let run = AblationRun {
                use_gim,
                seed,
                test_f1: report.scores.f1 / 100.0,
                best_epoch: outcome.best.epoch,
                seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "ablation seed {seed} gim {use_gim}: test F1 {:.4} (best epoch {}, {:.0}s)",
                run.test_f1,
                run.best_epoch,
                run.seconds
            );
            runs.push(run);
        }
    }
    Ok(AblationReport { runs })
}
