//! Binary checkpoints: `MTCK`, a `u32` version, a length-prefixed JSON
//! header, then every parameter in registration order as
//! `(name, rows, cols, f32 values)`, all little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::TclMap;
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::substrate::{Matrix, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub manifest: DatasetManifest,
    /// Epoch the parameters come from (0 = initialization).
    pub epoch: usize,
    pub best_val_acc: Option<f64>,
    pub params: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    manifest: DatasetManifest,
    epoch: usize,
    best_val_acc: Option<f64>,
}

#[derive(Serialize)]
struct Summary<'a> {
    #[serde(flatten)]
    header: &'a Header,
    num_tensors: usize,
    num_scalars: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format {
                file: CHECKPOINT_FILE.into(),
                reason: format!("truncated at byte {}", self.pos),
            }
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn format_error(reason: impl Into<String>) -> Error {
    Error::Format {
        file: CHECKPOINT_FILE.into(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    /// Fresh model parameters for `config`.
    pub fn initialize(config: &TrainConfig, manifest: &DatasetManifest) -> Result<(Self, TclMap)> {
        let mut params = ParamStore::new();
        let model = TclMap::new(config, manifest, &mut params)?;
        let ckpt = Self {
            config: config.clone(),
            manifest: manifest.clone(),
            epoch: 0,
            best_val_acc: None,
            params,
        };
        Ok((ckpt, model))
    }

    /// Rebuilds the model structure and checks that the stored parameters
    /// match it name for name and shape for shape.
    pub fn model(&self) -> Result<TclMap> {
        let mut fresh = ParamStore::<f32>::new();
        let model = TclMap::new(&self.config, &self.manifest, &mut fresh)?;
        if fresh.len() != self.params.len() {
            return Err(format_error(format!(
                "{} tensors stored, model has {}",
                self.params.len(),
                fresh.len()
            )));
        }
        for (want, got) in fresh.iter().zip(self.params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(format_error(format!(
                    "tensor {} {:?} does not match model tensor {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(model)
    }

    fn header(&self) -> Header {
        Header {
            config: self.config.clone(),
            manifest: self.manifest.clone(),
            epoch: self.epoch,
            best_val_acc: self.best_val_acc,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
            for v in p.value.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(format_error("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version.to_string(),
                supported: CHECKPOINT_VERSION.to_string(),
            });
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| format_error("tensor name is not UTF-8"))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows.saturating_mul(cols).saturating_mul(4))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.add(name, Matrix::from_vec(rows, cols, values)?);
        }
        if r.pos != bytes.len() {
            return Err(format_error(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ckpt = Self {
            config: header.config,
            manifest: header.manifest,
            epoch: header.epoch,
            best_val_acc: header.best_val_acc,
            params,
        };
        ckpt.model()?;
        Ok(ckpt)
    }

    /// Writes `checkpoint.bin` and the human-readable `checkpoint.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bin = dir.join(CHECKPOINT_FILE);
        fs::write(&bin, self.to_bytes()?).map_err(|e| Error::io(&bin, e))?;
        let header = self.header();
        let summary = Summary {
            header: &header,
            num_tensors: self.params.len(),
            num_scalars: self.params.num_scalars(),
        };
        let json = dir.join(SUMMARY_FILE);
        fs::write(&json, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&json, e))
    }

    /// Loads from a directory holding `checkpoint.bin`, or from the file itself.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(CHECKPOINT_FILE)
        } else {
            path.to_path_buf()
        };
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        Self::from_bytes(&bytes)
    }
}
