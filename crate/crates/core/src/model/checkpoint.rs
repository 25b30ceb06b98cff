//! Binary checkpoint container.
//!
//! Layout: the 8 magic bytes `DSMTCKPT`, a little-endian `u32` version, a
//! `u64` header length, a JSON header, then every array listed in the
//! header as consecutive little-endian `f32` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::ensemble::EnsembleWeights;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::trainer::{AdamState, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSMTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ArrayKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    kind: ArrayKind,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    arrays: Vec<ArrayEntry>,
    adam_step: Option<u64>,
    epoch: Option<usize>,
    best_val_mae: Option<f64>,
    best_epoch: Option<usize>,
    train_state: Option<TrainState>,
    ensemble: Option<EnsembleWeights>,
}

/// A model plus whatever training context should travel with it. Inference
/// exports leave the optimizer and training state empty.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    pub train_state: Option<TrainState>,
    pub ensemble: Option<EnsembleWeights>,
}

impl Checkpoint {
    pub fn inference(model: Model, ensemble: Option<EnsembleWeights>) -> Self {
        Checkpoint { model, optimizer: None, train_state: None, ensemble }
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: &str, kind: ArrayKind, shape: &[usize], data: &[f64]| {
            arrays.push(ArrayEntry { name: name.to_string(), kind, shape: shape.to_vec() });
            for &v in data {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        };
        let params = self.model.params();
        for p in &params {
            push(&p.name, ArrayKind::Param, p.value.shape(), p.value.data());
        }
        for (name, data) in self.model.buffers() {
            push(&name, ArrayKind::Buffer, &[data.len()], &data);
        }
        if let Some(adam) = &self.optimizer {
            for (p, (m, v)) in params.iter().zip(adam.m.iter().zip(&adam.v)) {
                push(&p.name, ArrayKind::AdamM, p.value.shape(), m);
                push(&p.name, ArrayKind::AdamV, p.value.shape(), v);
            }
        }
        let st = self.train_state.as_ref();
        let header = Header {
            model: self.model.config().clone(),
            arrays,
            adam_step: self.optimizer.as_ref().map(|a| a.step),
            epoch: st.map(|s| s.epoch),
            best_val_mae: st.and_then(|s| s.best_val_mae),
            best_epoch: st.and_then(|s| s.best_epoch),
            train_state: self.train_state.clone(),
            ensemble: self.ensemble.clone(),
        };
        let header = serde_json::to_vec(&header)?;

        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            f.write_all(CHECKPOINT_MAGIC)?;
            f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            f.write_all(&(header.len() as u64).to_le_bytes())?;
            f.write_all(&header)?;
            f.write_all(&payload)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::format(path, m);
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Compatibility(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("bad header: {e}")))?;
        let mut data = &body[hlen..];

        let mut model = Model::new(&header.model, 0)?;
        let n_params = model.params().len();
        let mut adam_m: Vec<Option<Vec<f64>>> = vec![None; n_params];
        let mut adam_v: Vec<Option<Vec<f64>>> = vec![None; n_params];
        let index_of: std::collections::HashMap<String, usize> =
            model.params().iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        let mut loaded = vec![false; n_params];
        for entry in &header.arrays {
            let n: usize = entry.shape.iter().product();
            if data.len() < n * 4 {
                return Err(bad("truncated array data"));
            }
            let values: Vec<f64> = data[..n * 4].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            data = &data[n * 4..];
            if entry.kind == ArrayKind::Buffer {
                model.set_buffer(&entry.name, &values)?;
                continue;
            }
            let &i = index_of
                .get(&entry.name)
                .ok_or_else(|| Error::Compatibility(format!("unknown parameter {}", entry.name)))?;
            let mut params = model.params_mut();
            let p = &mut params[i];
            if p.value.shape() != entry.shape.as_slice() {
                return Err(Error::Compatibility(format!("{} has shape {:?}, model expects {:?}", entry.name, entry.shape, p.value.shape())));
            }
            match entry.kind {
                ArrayKind::Param => {
                    p.value = Tensor::from_vec(&entry.shape, values);
                    loaded[i] = true;
                }
                ArrayKind::AdamM => adam_m[i] = Some(values),
                ArrayKind::AdamV => adam_v[i] = Some(values),
                ArrayKind::Buffer => unreachable!(),
            }
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after array data"));
        }
        if let Some(i) = loaded.iter().position(|&l| !l) {
            return Err(Error::Compatibility(format!("checkpoint lacks parameter {}", model.params()[i].name)));
        }
        let optimizer = match header.adam_step {
            Some(step) => {
                let m = adam_m.into_iter().collect::<Option<Vec<_>>>();
                let v = adam_v.into_iter().collect::<Option<Vec<_>>>();
                match (m, v) {
                    (Some(m), Some(v)) => Some(AdamState { step, m, v }),
                    _ => return Err(bad("incomplete optimizer state")),
                }
            }
            None => None,
        };
        Ok(Checkpoint { model, optimizer, train_state: header.train_state, ensemble: header.ensemble })
    }

    /// Errors unless the stored model matches `cfg` exactly.
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        if self.model.config() != cfg {
            return Err(Error::Compatibility(format!(
                "checkpoint model {:?} does not match configured model {:?}",
                self.model.config(),
                cfg
            )));
        }
        Ok(())
    }
}
