//! Versioned binary checkpoint.
//!
//! Layout (little-endian): magic `ARLPCKPT1`, `u32` version, `u32` model
//! kind, `u64` length + JSON metadata (grid, model and train config, step
//! counter, loss history), 16 `f64` normalization bounds, `u64` block count,
//! then per block `u64` name length, name, `u64` rank, dims as `u64`, values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{read_u64, Channel, GridSpec, NormalizationStats};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::nn::ParamStore;
use crate::training::{LossHistory, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"ARLPCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    grid: GridSpec,
    model: ModelConfig,
    train: TrainConfig,
    step: usize,
    history: LossHistory,
    #[serde(default)]
    config_hash: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub params: ParamStore,
    pub stats: NormalizationStats,
    pub train: TrainConfig,
    pub step: usize,
    pub history: LossHistory,
    /// Hash of the run configuration the model was trained with.
    pub config_hash: String,
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(f64::from_le_bytes(b))
}

fn read_len<R: Read>(r: &mut R, limit: u64, what: &str) -> Result<usize> {
    let n = read_u64(r)?;
    if n > limit {
        return Err(Error::Format(format!("{what} length {n} is implausible")));
    }
    Ok(n as usize)
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.model.kind().code().to_le_bytes())?;
        let meta = Metadata {
            grid: *self.model.grid(),
            model: *self.model.config(),
            train: self.train.clone(),
            step: self.step,
            history: self.history.clone(),
            config_hash: self.config_hash.clone(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for ch in Channel::ALL {
            w.write_all(&self.stats.min[ch.index()].to_le_bytes())?;
        }
        for ch in Channel::ALL {
            w.write_all(&self.stats.max[ch.index()].to_le_bytes())?;
        }
        w.write_all(&(self.params.blocks().len() as u64).to_le_bytes())?;
        for b in self.params.blocks() {
            w.write_all(&(b.name.len() as u64).to_le_bytes())?;
            w.write_all(b.name.as_bytes())?;
            w.write_all(&(b.shape.len() as u64).to_le_bytes())?;
            for &d in &b.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &b.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Checkpoint> {
        let mut magic = [0u8; 9];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let code = read_u32(&mut r)?;
        let kind = ModelKind::from_code(code).ok_or_else(|| Error::Format(format!("unknown model kind {code}")))?;
        let len = read_len(&mut r, 1 << 30, "metadata")?;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let meta: Metadata = serde_json::from_slice(&json).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let mut stats = NormalizationStats::identity();
        for ch in Channel::ALL {
            stats.min[ch.index()] = read_f64(&mut r)?;
        }
        for ch in Channel::ALL {
            stats.max[ch.index()] = read_f64(&mut r)?;
        }
        let (model, mut params) = Model::new(kind, meta.grid, meta.model, 0).map_err(|e| Error::Format(e.to_string()))?;
        let count = read_len(&mut r, 1 << 20, "block count")?;
        if count != params.blocks().len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} parameter blocks, model expects {}",
                params.blocks().len()
            )));
        }
        for block in params.blocks_mut() {
            let n = read_len(&mut r, 4096, "name")?;
            let mut name = vec![0u8; n];
            r.read_exact(&mut name).map_err(|_| Error::Format("truncated checkpoint".into()))?;
            let rank = read_len(&mut r, 8, "rank")?;
            let shape = (0..rank).map(|_| read_len(&mut r, 1 << 32, "dimension")).collect::<Result<Vec<_>>>()?;
            if name != block.name.as_bytes() || shape != block.shape {
                return Err(Error::Format(format!(
                    "block {:?} {shape:?} does not match expected {} {:?}",
                    String::from_utf8_lossy(&name),
                    block.name,
                    block.shape
                )));
            }
            for v in block.data.iter_mut() {
                *v = read_f64(&mut r)?;
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        if !params.all_finite() {
            return Err(Error::Format("non-finite parameter in checkpoint".into()));
        }
        Ok(Checkpoint {
            model,
            params,
            stats,
            train: meta.train,
            step: meta.step,
            history: meta.history,
            config_hash: meta.config_hash,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        Checkpoint::read_from(bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;
    use crate::exec::Execution;
    use crate::synthetic::{generate, SyntheticConfig};

    fn fixture() -> (Checkpoint, Dataset) {
        let grid = GridSpec { rows: 4, cols: 3, interval_minutes: 180, neighborhood: 3, window: 4, history_days: 2, acf_lags: 2 };
        let (cube, _) = generate(&SyntheticConfig { days: 3, ..Default::default() }, &grid).unwrap();
        let data = Dataset::from_raw(&cube, 0..2, Execution::Sequential).unwrap();
        let cfg = ModelConfig { d_g: 3, channel_width: 2, d_h: 3, ..Default::default() };
        let (model, params) = Model::new(ModelKind::Advanced, grid, cfg, 9).unwrap();
        let history = LossHistory { steps: vec![0.1, 1.0 / 3.0], epochs: Vec::new() };
        let ck = Checkpoint { model, params, stats: *data.stats(), train: TrainConfig::default(), step: 2, history, config_hash: "abc".into() };
        (ck, data)
    }

    #[test]
    fn round_trip_is_exact() {
        let (ck, data) = fixture();
        let back = Checkpoint::read_from(ck.to_bytes().as_slice()).unwrap();
        assert_eq!(back.params, ck.params);
        assert_eq!(back.stats, ck.stats);
        assert_eq!(back.history, ck.history);
        assert_eq!(back.to_bytes(), ck.to_bytes());
        for s in data.samples(1..3, 2).iter().take(16) {
            let a = ck.model.predict(&ck.params, &data, s).unwrap();
            let b = back.model.predict(&back.params, &data, s).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (ck, _) = fixture();
        let mut bytes = ck.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::read_from(bytes.as_slice()), Err(Error::Format(_))));
        let bytes = ck.to_bytes();
        assert!(matches!(Checkpoint::read_from(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bytes = ck.to_bytes();
        bytes[9] = 7;
        assert!(matches!(Checkpoint::read_from(bytes.as_slice()), Err(Error::Format(_))));
    }
}
