//! JSON checkpoints with base64 little-endian tensor payloads.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use codecforge_core::params::RunningStats;
use codecforge_core::{Model, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::config::TrainConfig;
use crate::error::{HarnessError, Result};

pub const FORMAT: &str = "codecforge-checkpoint v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedStats {
    pub name: String,
    pub mean: String,
    pub var: String,
    pub updates: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedAdam {
    pub step: u64,
    pub m: Vec<String>,
    pub v: Vec<String>,
}

/// Every random stream of epoch `e` derives from `(seed, e)`, so the
/// position of the run is the whole generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub scalar: String,
    pub config_hash: String,
    pub config: TrainConfig,
    pub classes: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub params: Vec<EncodedTensor>,
    pub running: Vec<EncodedStats>,
    pub optimizer: EncodedAdam,
}

fn encode<T: Scalar>(values: &[T]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * T::BYTES);
    for &v in values {
        v.write_le(&mut bytes);
    }
    STANDARD.encode(bytes)
}

fn decode<T: Scalar>(text: &str, expect: usize, what: &str) -> Result<Vec<T>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| HarnessError::Checkpoint(format!("{what}: {e}")))?;
    if bytes.len() != expect * T::BYTES {
        return Err(HarnessError::Checkpoint(format!(
            "{what}: {} bytes for {expect} values of {}",
            bytes.len(),
            T::NAME
        )));
    }
    Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
}

impl Checkpoint {
    pub fn capture<T: Scalar>(config: &TrainConfig, model: &Model<T>, adam: &AdamState<T>, epoch: usize) -> Self {
        let params = model
            .params
            .iter()
            .map(|(name, t)| EncodedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: encode(t.data()),
            })
            .collect();
        let running = model
            .params
            .running
            .iter()
            .map(|(name, s)| EncodedStats {
                name: name.clone(),
                mean: encode(&s.mean),
                var: encode(&s.var),
                updates: s.updates,
            })
            .collect();
        Self {
            format: FORMAT.into(),
            scalar: T::NAME.into(),
            config_hash: config.hash(),
            config: config.clone(),
            classes: model.classes,
            epoch,
            rng: RngState {
                seed: config.seed,
                next_epoch: epoch as u64,
            },
            params,
            running,
            optimizer: EncodedAdam {
                step: adam.step,
                m: adam.m.iter().map(|t| encode(t.data())).collect(),
                v: adam.v.iter().map(|t| encode(t.data())).collect(),
            },
        }
    }

    /// Fails unless `config` hashes to the stored configuration hash.
    pub fn verify_config(&self, config: &TrainConfig) -> Result<()> {
        let hash = config.hash();
        if hash != self.config_hash {
            return Err(HarnessError::Checkpoint(format!(
                "configuration hash {} does not match checkpoint {}",
                &hash[..12],
                &self.config_hash[..12.min(self.config_hash.len())]
            )));
        }
        Ok(())
    }

    /// Rebuilds the model and optimizer state exactly as captured.
    pub fn restore<T: Scalar>(&self) -> Result<(Model<T>, AdamState<T>)> {
        if self.format != FORMAT {
            return Err(HarnessError::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        if self.scalar != T::NAME {
            return Err(HarnessError::Checkpoint(format!(
                "checkpoint holds {} values, expected {}",
                self.scalar,
                T::NAME
            )));
        }
        self.verify_config(&self.config)?;
        let mut model = Model::<T>::new(self.config.graph()?, self.config.features, self.classes, self.config.seed)?;
        if model.params.len() != self.params.len() {
            return Err(HarnessError::Checkpoint(format!(
                "{} stored tensors, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for stored in &self.params {
            let slot = model
                .params
                .get_mut(&stored.name)
                .ok_or_else(|| HarnessError::Checkpoint(format!("unknown parameter `{}`", stored.name)))?;
            if slot.shape() != stored.shape.as_slice() {
                return Err(HarnessError::Checkpoint(format!(
                    "`{}` has shape {:?}, model expects {:?}",
                    stored.name,
                    stored.shape,
                    slot.shape()
                )));
            }
            let data = decode(&stored.data, slot.numel(), &stored.name)?;
            *slot = Tensor::new(stored.shape.clone(), data)?;
        }
        for stored in &self.running {
            let slot = model
                .params
                .running
                .get_mut(&stored.name)
                .ok_or_else(|| HarnessError::Checkpoint(format!("unknown statistics `{}`", stored.name)))?;
            let width = slot.mean.len();
            *slot = RunningStats {
                mean: decode(&stored.mean, width, &stored.name)?,
                var: decode(&stored.var, width, &stored.name)?,
                updates: stored.updates,
            };
        }
        let shapes: Vec<Vec<usize>> = model.params.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let moments = |enc: &[String], what: &str| -> Result<Vec<Tensor<T>>> {
            if enc.len() != shapes.len() {
                return Err(HarnessError::Checkpoint(format!("{} {what} tensors for {} parameters", enc.len(), shapes.len())));
            }
            enc.iter()
                .zip(&shapes)
                .map(|(e, s)| Ok(Tensor::new(s.clone(), decode(e, s.iter().product(), what)?)?))
                .collect()
        };
        let adam = AdamState {
            step: self.optimizer.step,
            m: moments(&self.optimizer.m, "first moment")?,
            v: moments(&self.optimizer.v, "second moment")?,
        };
        Ok((model, adam))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint is always serializable")
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_json()).map_err(|e| HarnessError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adam::{adam_step, AdamConfig};

    fn small_config() -> TrainConfig {
        let mut cfg = TrainConfig::new(11);
        cfg.levels = 2;
        cfg.dims = vec![4, 6, 8];
        cfg.ratios = vec![2, 2, 2];
        cfg.points = 64;
        cfg
    }

    fn trained_state() -> (TrainConfig, Model<f32>, AdamState<f32>) {
        let cfg = small_config();
        let mut model = Model::<f32>::new(cfg.graph().unwrap(), 6, 6, 1).unwrap();
        let mut adam = AdamState::new(&model.params);
        let grads: Vec<Tensor<f32>> = model.params.tensors().iter().map(|t| t.map(|v| v * 0.5 + 0.1)).collect();
        adam_step(&mut model.params, &grads, &mut adam, 0.01, &AdamConfig::default()).unwrap();
        model.params.running.values_mut().next().unwrap().mean[0] = 0.123;
        (cfg, model, adam)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (cfg, model, adam) = trained_state();
        let ck = Checkpoint::capture(&cfg, &model, &adam, 3);
        let parsed: Checkpoint = serde_json::from_str(&ck.to_json()).unwrap();
        assert_eq!(parsed, ck);
        let (m2, a2) = parsed.restore::<f32>().unwrap();
        assert_eq!(m2.params.tensors(), model.params.tensors());
        assert_eq!(m2.params.running, model.params.running);
        assert_eq!(a2, adam);
        assert_eq!(Checkpoint::capture(&cfg, &m2, &a2, 3), ck);
    }

    #[test]
    fn config_mismatch_is_an_error() {
        let (cfg, model, adam) = trained_state();
        let ck = Checkpoint::capture(&cfg, &model, &adam, 1);
        let mut other = cfg.clone();
        other.lr = 0.5;
        assert!(matches!(ck.verify_config(&other), Err(HarnessError::Checkpoint(_))));
        other = cfg.clone();
        other.epochs = 500;
        ck.verify_config(&other).unwrap();
    }

    #[test]
    fn wrong_scalar_and_corrupt_payloads_are_rejected() {
        let (cfg, model, adam) = trained_state();
        let ck = Checkpoint::capture(&cfg, &model, &adam, 1);
        assert!(ck.restore::<f64>().is_err());
        let mut bad = ck.clone();
        bad.params[0].data = STANDARD.encode([0u8; 3]);
        assert!(matches!(bad.restore::<f32>(), Err(HarnessError::Checkpoint(_))));
        let mut bad = ck;
        bad.config.lr = 0.7;
        assert!(bad.restore::<f32>().is_err());
    }

    #[test]
    fn save_and_load_files() {
        let (cfg, model, adam) = trained_state();
        let ck = Checkpoint::capture(&cfg, &model, &adam, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(!dir.path().join("checkpoint.json.tmp").exists());
    }
}
