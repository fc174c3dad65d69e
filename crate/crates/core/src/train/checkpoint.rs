//! Binary checkpoint: an 8-byte magic, a little-endian `u64` header length, a
//! JSON header, then raw little-endian tensor data in header order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{AdamW, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{BgiNet, ModelConfig};
use crate::nn::HasParams;
use crate::Scalar;

const MAGIC: &[u8; 8] = b"BGINCKP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Param,
    Buffer,
    FirstMoment,
    SecondMoment,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: Kind,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    epoch: usize,
    best_val_f1: Option<f64>,
    config: TrainConfig,
    adam_step: u64,
    tensors: Vec<TensorEntry>,
}

/// Model weights, normalization statistics, optimizer state and run metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: BgiNet<f32>,
    pub optimizer: AdamW<f32>,
    /// Epochs completed.
    pub epoch: usize,
    pub best_val_f1: Option<f64>,
    pub config: TrainConfig,
}

fn ckpt_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, Kind, ArrayD<f32>)> {
        let mut out = Vec::new();
        self.model
            .visit_params("", &mut |n, p| out.push((n.to_string(), Kind::Param, p.value.clone())));
        self.model
            .visit_buffers("", &mut |n, b| out.push((n.to_string(), Kind::Buffer, b.clone())));
        let names: Vec<String> = out.iter().filter(|t| t.1 == Kind::Param).map(|t| t.0.clone()).collect();
        for (n, m) in names.iter().zip(&self.optimizer.first_moment) {
            out.push((n.clone(), Kind::FirstMoment, m.clone()));
        }
        for (n, v) in names.iter().zip(&self.optimizer.second_moment) {
            out.push((n.clone(), Kind::SecondMoment, v.clone()));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self.tensors();
        let header = Header {
            dtype: f32::DTYPE.into(),
            epoch: self.epoch,
            best_val_f1: self.best_val_f1,
            config: self.config.clone(),
            adam_step: self.optimizer.step,
            tensors: tensors
                .iter()
                .map(|(n, k, a)| TensorEntry {
                    name: n.clone(),
                    kind: *k,
                    shape: a.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(json.len() + 16);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, _, a) in &tensors {
            for v in a.iter() {
                v.write_le(&mut buf);
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&buf).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(path))?;
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return ckpt_err(format!("{} is not a checkpoint", path.display()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.dtype != f32::DTYPE {
            return ckpt_err(format!("unsupported dtype {}", header.dtype));
        }
        header.config.validate()?;
        let model = BgiNet::<f32>::new(&header.config.model, 0)?;
        let mut ckpt = Checkpoint {
            optimizer: AdamW::new(
                &model,
                header.config.beta1,
                header.config.beta2,
                header.config.adam_eps,
                header.config.weight_decay,
            ),
            model,
            epoch: header.epoch,
            best_val_f1: header.best_val_f1,
            config: header.config.clone(),
        };
        ckpt.optimizer.step = header.adam_step;

        let mut data = &bytes[16 + hlen..];
        let mut loaded = std::collections::HashMap::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let need = n * f32::BYTES;
            if data.len() < need {
                return ckpt_err(format!("truncated data for {}", entry.name));
            }
            let values: Vec<f32> = data[..need].chunks_exact(f32::BYTES).map(f32::read_le).collect();
            data = &data[need..];
            let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?;
            loaded.insert((entry.name.clone(), entry.kind), arr);
        }
        if !data.is_empty() {
            return ckpt_err("trailing bytes after tensor data");
        }

        let mut fill = |name: &str, kind: Kind, dst: &mut ArrayD<f32>| -> Result<()> {
            let src = loaded
                .remove(&(name.to_string(), kind))
                .ok_or_else(|| Error::Checkpoint(format!("missing {kind:?} tensor {name}")))?;
            if src.shape() != dst.shape() {
                return ckpt_err(format!("{name}: shape {:?}, model expects {:?}", src.shape(), dst.shape()));
            }
            *dst = src;
            Ok(())
        };
        let mut result = Ok(());
        let Checkpoint { model, optimizer, .. } = &mut ckpt;
        let mut idx = 0;
        model.visit_params_mut("", &mut |n, p| {
            if result.is_ok() {
                result = fill(n, Kind::Param, &mut p.value)
                    .and_then(|_| fill(n, Kind::FirstMoment, &mut optimizer.first_moment[idx]))
                    .and_then(|_| fill(n, Kind::SecondMoment, &mut optimizer.second_moment[idx]));
            }
            idx += 1;
        });
        result?;
        let mut result = Ok(());
        model.visit_buffers_mut("", &mut |n, b| {
            if result.is_ok() {
                result = fill(n, Kind::Buffer, b);
            }
        });
        result?;
        if let Some(((name, _), _)) = loaded.into_iter().next() {
            return ckpt_err(format!("unexpected tensor {name}"));
        }
        Ok(ckpt)
    }

    /// Loads and rejects checkpoints whose architecture differs from `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.model.config() != expected {
            return ckpt_err(format!(
                "architecture mismatch: checkpoint has {:?}, expected {:?}",
                ckpt.model.config(),
                expected
            ));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn small() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model = ModelConfig {
            encoder: EncoderConfig {
                stage_channels: vec![4, 4, 8, 8],
                blocks_per_stage: vec![1, 1, 1],
                ..EncoderConfig::default()
            },
            vertices: 3,
            use_gim: true,
        };
        cfg
    }

    fn checkpoint(cfg: &TrainConfig) -> Checkpoint {
        let mut model = BgiNet::new(&cfg.model, 5).unwrap();
        model.visit_buffers_mut("", &mut |_, b| b.mapv_inplace(|v| v + 0.25));
        let mut optimizer = AdamW::new(&model, 0.9, 0.999, 1e-8, 1e-4);
        optimizer.step = 7;
        optimizer.first_moment[0].fill(0.5);
        Checkpoint {
            model,
            optimizer,
            epoch: 3,
            best_val_f1: Some(0.75),
            config: cfg.clone(),
        }
    }

    fn flat(c: &Checkpoint) -> Vec<u32> {
        c.tensors().iter().flat_map(|(_, _, a)| a.iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = checkpoint(&small());
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(flat(&c), flat(&back));
        assert_eq!((back.epoch, back.best_val_f1, back.optimizer.step), (3, Some(0.75), 7));
        assert_eq!(back.config, c.config);
        let again = dir.path().join("b.ckpt");
        back.save(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn rejects_mismatch_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let cfg = small();
        checkpoint(&cfg).save(&path).unwrap();
        let mut other = cfg.model.clone();
        other.vertices = 4;
        assert!(Checkpoint::load_expecting(&path, &other).is_err());
        assert!(Checkpoint::load_expecting(&path, &cfg.model).is_ok());

        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"not a checkpoint at all").unwrap();
        assert!(matches!(Checkpoint::load(&bad), Err(Error::Checkpoint(_))));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&bad, bytes).unwrap();
        assert!(Checkpoint::load(&bad).is_err());
    }
}
