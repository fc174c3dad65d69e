use std::path::Path;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::poly;
use super::{AdamW, Checkpoint, TrainConfig};
use crate::data::{binarize, load_dataset, render_comparison_map, save_mask, save_rgb, to_batch, to_tensor, Augment, SampleRecord};
use crate::error::{Error, Result};
use crate::head::ChangeMap;
use crate::loss::batch_loss_and_grad;
use crate::metrics::{confusion, ConfusionCounts, MetricReport, Scores};
use crate::model::{bginet_forward, BgiNet};
use crate::nn::HasParams;

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's batches.
    pub loss: f64,
    pub focal: f64,
    pub dice: f64,
    pub batch_losses: Vec<f64>,
    pub starved_vertices: usize,
    pub val: Option<Scores>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the highest validation F1 (the last epoch without validation data).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochLog>,
}

fn check_records(records: &[SampleRecord], stride: usize, what: &str) -> Result<()> {
    let Some(first) = records.first() else {
        return Ok(());
    };
    let dims = first.mask.dim();
    for r in records {
        if r.mask.dim() != dims {
            return Err(Error::Dataset(format!("{what}: {} is {:?}, expected {:?}", r.id, r.mask.dim(), dims)));
        }
    }
    if dims.0 % stride != 0 || dims.1 % stride != 0 {
        return Err(Error::Dataset(format!("{what}: size {dims:?} is not divisible by output stride {stride}")));
    }
    Ok(())
}

/// Trains on `data_dir/train`, selects on `data_dir/val`, writes `best.ckpt`,
/// `last.ckpt` and `history.json` into `out_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let root = cfg
        .data_dir
        .as_ref()
        .ok_or_else(|| Error::Config("data_dir is required for training".into()))?;
    let train_set = load_dataset(&root.join("train"))?;
    let val_dir = root.join("val");
    let val_set = if val_dir.exists() { load_dataset(&val_dir)? } else { Vec::new() };
    let outcome = train_on(cfg, &train_set, &val_set)?;
    outcome.best.save(&cfg.out_dir.join("best.ckpt"))?;
    outcome.last.save(&cfg.out_dir.join("last.ckpt"))?;
    let history = serde_json::to_string_pretty(&outcome.history)?;
    let path = cfg.out_dir.join("history.json");
    std::fs::write(&path, history).map_err(|source| Error::Io { path, source })?;
    Ok(outcome)
}

/// Deterministic training loop over in-memory records.
pub fn train_on(cfg: &TrainConfig, train_set: &[SampleRecord], val_set: &[SampleRecord]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let stride = cfg.model.encoder.output_stride;
    check_records(train_set, stride, "train")?;
    check_records(val_set, stride, "val")?;

    let mut model = BgiNet::<f32>::new(&cfg.model, cfg.seed)?;
    let mut optimizer = AdamW::new(&model, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let bs = cfg.batch_size;
    let per_epoch = train_set.len().div_ceil(bs);
    let epochs = match cfg.total_steps {
        Some(t) => t.div_ceil(per_epoch),
        None => cfg.total_epochs,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = 0usize;

    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let epoch_lr = lr_for(cfg, epoch, step);
        let mut log = EpochLog {
            epoch,
            lr: epoch_lr,
            loss: 0.0,
            focal: 0.0,
            dice: 0.0,
            batch_losses: Vec::with_capacity(per_epoch),
            starved_vertices: 0,
            val: None,
        };
        for (b, idx) in order.chunks(bs).enumerate() {
            if cfg.total_steps.is_some_and(|t| step >= t) {
                break;
            }
            // a lone sample gives degenerate batch statistics
            if idx.len() == 1 && bs > 1 {
                continue;
            }
            let batch: Vec<SampleRecord> = idx
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        train_set[i].augmented(Augment::ALL[rng.gen_range(0..Augment::ALL.len())])
                    } else {
                        train_set[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&SampleRecord> = batch.iter().collect();
            let (a, bimg, masks) = to_batch::<f32>(&refs);

            model.zero_grad();
            let (out, cache) = model.forward_train(&a, &bimg)?;
            let (parts, grad) = batch_loss_and_grad(&out.logits, &masks, &cfg.loss)?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    focal: parts.focal,
                    dice: parts.dice,
                });
            }
            model.backward(cache, &grad);
            optimizer.step(&mut model, lr_for(cfg, epoch, step));
            step += 1;

            log.batch_losses.push(parts.total);
            log.focal += parts.focal;
            log.dice += parts.dice;
            log.starved_vertices += out.starved_vertices;
        }
        let n = log.batch_losses.len().max(1) as f64;
        log.loss = log.batch_losses.iter().sum::<f64>() / n;
        log.focal /= n;
        log.dice /= n;
        if !val_set.is_empty() {
            let report = evaluate(&model, val_set, cfg.threshold, "val", None)?;
            log.val = Some(report.scores);
        }
        log::info!(
            "epoch {epoch}: lr = {:.3e} loss = {:.5} focal = {:.5} dice = {:.5} val_f1 = {}",
            log.lr,
            log.loss,
            log.focal,
            log.dice,
            log.val.map_or("-".to_string(), |s| format!("{:.3}", s.f1))
        );
        if log.starved_vertices > 0 {
            log::debug!("epoch {epoch}: {} starved vertex slots", log.starved_vertices);
        }
        let snapshot = |best_f1| Checkpoint {
            model: model.clone(),
            optimizer: optimizer.clone(),
            epoch: epoch + 1,
            best_val_f1: best_f1,
            config: cfg.clone(),
        };
        if let Some(scores) = log.val {
            if best.as_ref().is_none_or(|(f, _)| scores.f1 > *f) {
                best = Some((scores.f1, snapshot(Some(scores.f1))));
            }
        }
        history.push(log);
    }

    let best_f1 = best.as_ref().map(|(f, _)| *f);
    let last = Checkpoint {
        model,
        optimizer,
        epoch: epochs,
        best_val_f1: best_f1,
        config: cfg.clone(),
    };
    let best = best.map_or_else(|| last.clone(), |(_, c)| c);
    Ok(TrainOutcome { best, last, history })
}

fn lr_for(cfg: &TrainConfig, epoch: usize, step: usize) -> f64 {
    match cfg.total_steps {
        Some(t) => poly(cfg.lr, step, t, cfg.poly_power),
        None => poly(cfg.lr, epoch, cfg.total_epochs, cfg.poly_power),
    }
}

/// Change probabilities for one pair of `[H, W, 3]` images.
pub fn predict(model: &BgiNet<f32>, image_t1: &Array3<u8>, image_t2: &Array3<u8>) -> Result<ChangeMap<f32>> {
    if image_t1.dim() != image_t2.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", image_t1.dim(), image_t2.dim())));
    }
    bginet_forward(&to_tensor(image_t1.view()), &to_tensor(image_t2.view()), model)
}

/// Writes a probability map as a `.npy` array.
pub fn write_npy(path: &Path, prob: &Array2<f32>) -> Result<()> {
    ndarray_npy::write_npy(path, prob).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}

/// Micro-averaged report over `records`. With `dump_dir`, also writes
/// `<id>_pred.png`, `<id>_prob.npy` and `<id>_map.png` per tile.
pub fn evaluate(
    model: &BgiNet<f32>,
    records: &[SampleRecord],
    threshold: f64,
    split: &str,
    dump_dir: Option<&Path>,
) -> Result<MetricReport> {
    if let Some(dir) = dump_dir {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let mut counts = ConfusionCounts::default();
    for r in records {
        let map = predict(model, &r.image_t1, &r.image_t2)?;
        counts += confusion(map.probabilities.view(), r.mask.view(), threshold)?;
        if let Some(dir) = dump_dir {
            let pred = binarize(&map.probabilities, threshold);
            save_mask(&dir.join(format!("{}_pred.png", r.id)), &pred)?;
            write_npy(&dir.join(format!("{}_prob.npy", r.id)), &map.probabilities)?;
            let gt = r.mask.mapv(|v| u8::from(v != 0));
            save_rgb(&dir.join(format!("{}_map.png", r.id)), &render_comparison_map(pred.view(), gt.view())?)?;
        }
    }
    Ok(MetricReport::new(split, records.len(), threshold, counts))
}
