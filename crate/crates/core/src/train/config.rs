use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;

/// Everything a training run depends on. Read from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub total_epochs: usize,
    /// Optimizer-step budget; when set, the schedule decays per step instead of per epoch.
    pub total_steps: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub augment: bool,
    pub threshold: f64,
    /// Holds `train/`, `val/`, `test/`, each with `A/`, `B/`, `label/`.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub device: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            lr: 4e-4,
            weight_decay: 1e-4,
            poly_power: 0.9,
            total_epochs: 100,
            total_steps: None,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            augment: false,
            threshold: 0.5,
            data_dir: None,
            out_dir: PathBuf::from("runs"),
            device: "cpu".into(),
        }
    }
}

/// Polynomial decay `lr · (1 − epoch / total)^power`, clamped at the endpoint.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    poly(cfg.lr, epoch, cfg.total_epochs, cfg.poly_power)
}

pub(crate) fn poly(base: f64, t: usize, total: usize, power: f64) -> f64 {
    let frac = (t.min(total) as f64) / total as f64;
    base * (1.0 - frac).powf(power)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true/false, got `{value}`"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if self.total_epochs == 0 {
            return bad("total_epochs must be >= 1");
        }
        if self.total_steps == Some(0) {
            return bad("total_steps must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.weight_decay < 0.0 || self.poly_power < 0.0 {
            return bad("weight_decay and poly_power must be >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("optimizer moments must lie in [0, 1) and eps must be > 0");
        }
        if self.device != "cpu" {
            return Err(Error::Config(format!("unsupported device `{}` (only `cpu`)", self.device)));
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let enc = &mut self.model.encoder;
        match key {
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "poly_power" => self.poly_power = parse(key, value)?,
            "total_epochs" => self.total_epochs = parse(key, value)?,
            "total_steps" => self.total_steps = Some(parse(key, value)?),
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "gamma" => self.loss.gamma = parse(key, value)?,
            "alpha" => self.loss.alpha = parse(key, value)?,
            "lambda1" => self.loss.lambda1 = parse(key, value)?,
            "lambda2" => self.loss.lambda2 = parse(key, value)?,
            "dice_epsilon" => self.loss.epsilon = parse(key, value)?,
            "vertices" => self.model.vertices = parse(key, value)?,
            "use_gim" => self.model.use_gim = parse_bool(key, value)?,
            "in_channels" => enc.in_channels = parse(key, value)?,
            "stage_channels" => enc.stage_channels = parse_list(key, value)?,
            "blocks_per_stage" => enc.blocks_per_stage = parse_list(key, value)?,
            "output_stride" => enc.output_stride = parse(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "device" => self.device = value.to_string(),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Inverse of [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let enc = &self.model.encoder;
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("lr", self.lr.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("poly_power", self.poly_power.to_string());
        kv("total_epochs", self.total_epochs.to_string());
        if let Some(t) = self.total_steps {
            kv("total_steps", t.to_string());
        }
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("adam_eps", self.adam_eps.to_string());
        kv("augment", self.augment.to_string());
        kv("threshold", self.threshold.to_string());
        kv("gamma", self.loss.gamma.to_string());
        kv("alpha", self.loss.alpha.to_string());
        kv("lambda1", self.loss.lambda1.to_string());
        kv("lambda2", self.loss.lambda2.to_string());
        kv("dice_epsilon", self.loss.epsilon.to_string());
        kv("vertices", self.model.vertices.to_string());
        kv("use_gim", self.model.use_gim.to_string());
        kv("in_channels", enc.in_channels.to_string());
        kv("stage_channels", join(&enc.stage_channels));
        kv("blocks_per_stage", join(&enc.blocks_per_stage));
        kv("output_stride", enc.output_stride.to_string());
        if let Some(d) = &self.data_dir {
            kv("data_dir", d.display().to_string());
        }
        kv("out_dir", self.out_dir.display().to_string());
        kv("device", self.device.clone());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.0004);
        assert_eq!(lr_at(100, &cfg), 0.0);
        let mid = 0.0004 * 0.5f64.powf(0.9);
        assert!((lr_at(50, &cfg) - mid).abs() < 1e-18);
        let lrs: Vec<f64> = (0..=100).map(|e| lr_at(e, &cfg)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn parse_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.model.encoder.stage_channels = vec![8, 8, 16, 32];
        cfg.model.use_gim = false;
        cfg.total_steps = Some(17);
        cfg.data_dir = Some("data/synth".into());
        cfg.lr = 1.25e-3;
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parse_errors() {
        assert!(TrainConfig::parse("learning_rate = 0.1").is_err());
        assert!(TrainConfig::parse("lr 0.1").is_err());
        assert!(TrainConfig::parse("lr = fast").is_err());
        assert!(TrainConfig::parse("lr = 0").is_err());
        assert!(TrainConfig::parse("device = cuda").is_err());
        assert!(TrainConfig::parse("use_gim = maybe").is_err());
        let ok = TrainConfig::parse("# comment\n\nlr = 0.001  # trailing\nvertices = 8\n").unwrap();
        assert_eq!((ok.lr, ok.model.vertices), (0.001, 8));
    }
}
