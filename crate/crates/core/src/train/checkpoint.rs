//! Single-file checkpoints: an 8-byte magic, the manifest length as a
//! little-endian u64, a JSON manifest, then every tensor in the binary
//! tensor format back to back.

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, Trainer};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::EvfSam;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"EVFSAMC1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Slot {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    slot: Slot,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    iteration: usize,
    optimizer_step: u64,
    config: RunConfig,
    tensors: Vec<Entry>,
}

/// Parameters by name, AdamW moments and the run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: usize,
    pub optimizer_step: u64,
    pub params: Vec<(String, Tensor)>,
    /// `(name, m, v)` for parameters the optimizer has touched.
    pub moments: Vec<(String, Tensor, Tensor)>,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer, config: &RunConfig) -> Self {
        let store = &trainer.model.store;
        let params = store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        let moments = store
            .iter()
            .filter_map(|(id, p)| {
                let (m, v) = trainer.optimizer.moments(id)?;
                Some((p.name.clone(), m.clone(), v.clone()))
            })
            .collect();
        Self {
            config: config.clone(),
            iteration: trainer.iteration,
            optimizer_step: trainer.optimizer.step,
            params,
            moments,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: &str, slot: Slot, t: &Tensor, blob: &mut Vec<u8>| {
            let b = t.to_bytes();
            tensors.push(Entry {
                name: name.to_string(),
                slot,
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
                bytes: b.len() as u64,
            });
            blob.extend(b);
        };
        for (name, t) in &self.params {
            push(name, Slot::Param, t, &mut blob);
        }
        for (name, m, v) in &self.moments {
            push(name, Slot::AdamM, m, &mut blob);
            push(name, Slot::AdamV, v, &mut blob);
        }
        let manifest = Manifest {
            iteration: self.iteration,
            optimizer_step: self.optimizer_step,
            config: self.config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend(json);
        out.extend(blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
        let blob = &bytes[16 + len..];
        let read = |e: &Entry| -> Result<Tensor> {
            let (start, end) = (e.offset as usize, (e.offset + e.bytes) as usize);
            let chunk = blob
                .get(start..end)
                .ok_or_else(|| bad(format!("{} lies outside the file", e.name)))?;
            let t = Tensor::read_from(&mut Cursor::new(chunk)).map_err(|err| bad(format!("{}: {err}", e.name)))?;
            if t.shape() != e.shape.as_slice() {
                return Err(bad(format!(
                    "{} has shape {:?}, manifest says {:?}",
                    e.name,
                    t.shape(),
                    e.shape
                )));
            }
            Ok(t)
        };
        let mut params = Vec::new();
        let mut moments: Vec<(String, Tensor, Tensor)> = Vec::new();
        let mut pending_m: Option<(String, Tensor)> = None;
        for e in &manifest.tensors {
            let t = read(e)?;
            match e.slot {
                Slot::Param => params.push((e.name.clone(), t)),
                Slot::AdamM => pending_m = Some((e.name.clone(), t)),
                Slot::AdamV => match pending_m.take() {
                    Some((name, m)) if name == e.name => moments.push((name, m, t)),
                    _ => return Err(bad(format!("second moment of {} has no first moment", e.name))),
                },
            }
        }
        Ok(Self {
            config: manifest.config,
            iteration: manifest.iteration,
            optimizer_step: manifest.optimizer_step,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model from the stored config and copies the weights in.
    pub fn into_model(&self) -> Result<EvfSam> {
        let cfg = &self.config;
        let mut model = EvfSam::build(&cfg.encoder, &cfg.sam, cfg.train.seed)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, the configured model {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, t) in &self.params {
            model
                .store
                .set(name, t.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(model)
    }

    /// A trainer positioned where this checkpoint was taken. Continuing it
    /// on the same data reproduces the uninterrupted run.
    pub fn into_trainer(&self) -> Result<Trainer> {
        let mut trainer = Trainer::new(self.into_model()?, &self.config.train)?;
        trainer.resume_at(self.iteration);
        let mut opt = AdamW::new(self.config.train.adamw, &trainer.model.store);
        opt.step = self.optimizer_step;
        for (name, m, v) in &self.moments {
            let id = trainer
                .model
                .store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            opt.set_moments(id, m.clone(), v.clone());
        }
        trainer.optimizer = opt;
        Ok(trainer)
    }
}
