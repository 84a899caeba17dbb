//! Single-file checkpoint archive.
//!
//! Layout: an ASCII manifest followed by one raw little-endian blob.
//!
//! ```text
//! reidmamba-checkpoint <version>
//! dtype f64
//! config <key> = <value>          (one line per model setting)
//! tensor <name> <rows> <cols> <offset> <param|buffer>
//! data
//! <blob bytes>
//! ```
//!
//! Offsets are in bytes from the start of the blob and must tile it exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autograd::Mat;
use crate::model::{ModelConfig, ReIdMamba};

use super::config::{model_config_from_pairs, model_config_pairs};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "reidmamba-checkpoint";
const DTYPE: &str = "f64";
const ELEM: usize = 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: String, expected: u32 },
    #[error("truncated blob: need {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("tensor `{name}`: {detail}")]
    ShapeMismatch { name: String, detail: String },
    #[error("checkpoint does not match model: first mismatching tensor `{name}`")]
    ConfigMismatch { name: String },
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CheckpointError {
    /// Stable code per failure class.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Version { .. } => "E_VERSION",
            Self::Truncated { .. } => "E_TRUNCATED",
            Self::ShapeMismatch { .. } => "E_SHAPE",
            Self::ConfigMismatch { .. } => "E_CONFIG",
            Self::Malformed(_) => "E_MANIFEST",
            Self::Io(_) => "E_IO",
        }
    }
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub entries: Vec<TensorEntry>,
    pub tensors: Vec<Mat>,
}

pub fn encode(model: &ReIdMamba) -> Vec<u8> {
    let mut manifest = format!("{MAGIC} {FORMAT_VERSION}\ndtype {DTYPE}\n");
    for (k, v) in model_config_pairs(&model.cfg) {
        manifest.push_str(&format!("config {k} = {v}\n"));
    }
    let mut blob = Vec::new();
    for (_, p) in model.store.iter() {
        let (r, c) = p.value.dim();
        manifest.push_str(&format!(
            "tensor {} {r} {c} {} {}\n",
            p.name,
            blob.len(),
            if p.trainable { "param" } else { "buffer" }
        ));
        for v in p.value.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    manifest.push_str("data\n");
    let mut out = manifest.into_bytes();
    out.extend_from_slice(&blob);
    out
}

pub fn save_checkpoint(model: &ReIdMamba, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(model))?;
    Ok(())
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.parse().map_err(|_| CheckpointError::Malformed(format!("bad {what} `{s}`")))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<String> {
        let rest = &bytes[*pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Malformed("manifest not terminated by `data`".into()))?;
        *pos += end + 1;
        String::from_utf8(rest[..end].to_vec()).map_err(|_| CheckpointError::Malformed("non-UTF-8 manifest".into()))
    };
    let header = next_line(&mut pos)?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(CheckpointError::Malformed("missing magic header".into()));
    }
    let found = parts.next().unwrap_or("").to_string();
    if found != FORMAT_VERSION.to_string() {
        return Err(CheckpointError::Version { found, expected: FORMAT_VERSION });
    }
    let mut pairs = Vec::new();
    let mut entries = Vec::new();
    loop {
        let line = next_line(&mut pos)?;
        let line = line.trim();
        if line == "data" {
            break;
        }
        if let Some(rest) = line.strip_prefix("dtype ") {
            if rest.trim() != DTYPE {
                return Err(CheckpointError::Malformed(format!("unsupported dtype `{rest}`")));
            }
        } else if let Some(rest) = line.strip_prefix("config ") {
            let (k, v) = rest
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("bad config line `{line}`")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() != 5 {
                return Err(CheckpointError::Malformed(format!("bad tensor line `{line}`")));
            }
            entries.push(TensorEntry {
                name: f[0].to_string(),
                rows: parse_usize(f[1], "rows")?,
                cols: parse_usize(f[2], "cols")?,
                offset: parse_usize(f[3], "offset")?,
                trainable: match f[4] {
                    "param" => true,
                    "buffer" => false,
                    other => return Err(CheckpointError::Malformed(format!("bad tensor kind `{other}`"))),
                },
            });
        } else if !line.is_empty() {
            return Err(CheckpointError::Malformed(format!("unexpected line `{line}`")));
        }
    }
    let config = model_config_from_pairs(&pairs).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let blob = &bytes[pos..];
    let mut expected_offset = 0usize;
    for e in &entries {
        if e.offset != expected_offset {
            return Err(CheckpointError::ShapeMismatch {
                name: e.name.clone(),
                detail: format!("offset {} but shapes place it at {expected_offset}", e.offset),
            });
        }
        expected_offset += e.rows * e.cols * ELEM;
    }
    if blob.len() < expected_offset {
        return Err(CheckpointError::Truncated { needed: expected_offset, found: blob.len() });
    }
    if blob.len() > expected_offset {
        return Err(CheckpointError::ShapeMismatch {
            name: entries.last().map(|e| e.name.clone()).unwrap_or_default(),
            detail: format!("{} trailing bytes after the last tensor", blob.len() - expected_offset),
        });
    }
    let tensors = entries
        .iter()
        .map(|e| {
            let raw = &blob[e.offset..e.offset + e.rows * e.cols * ELEM];
            let vals = raw
                .chunks_exact(ELEM)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Mat::from_shape_vec((e.rows, e.cols), vals).expect("entry shape")
        })
        .collect();
    Ok(Checkpoint { version: FORMAT_VERSION, config, entries, tensors })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

impl Checkpoint {
    /// Copies every tensor into `model`, which must have the same parameter set.
    pub fn apply_to(&self, model: &mut ReIdMamba) -> Result<()> {
        let mismatch = |name: &str| CheckpointError::ConfigMismatch { name: name.to_string() };
        let ids: Vec<_> = model.store.ids().collect();
        for (i, id) in ids.iter().enumerate() {
            let p = model.store.get(*id);
            let Some(e) = self.entries.get(i) else {
                return Err(mismatch(&p.name));
            };
            if e.name != p.name || (e.rows, e.cols) != p.value.dim() || e.trainable != p.trainable {
                return Err(mismatch(&p.name));
            }
        }
        if let Some(extra) = self.entries.get(ids.len()) {
            return Err(mismatch(&extra.name));
        }
        for (id, t) in ids.into_iter().zip(&self.tensors) {
            model.store.value_mut(id).assign(t);
        }
        Ok(())
    }

    pub fn into_model(self) -> Result<ReIdMamba> {
        let mut model = ReIdMamba::new(self.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        self.apply_to(&mut model)?;
        Ok(model)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ReIdMamba> {
    read_checkpoint(path)?.into_model()
}

/// Loads into an existing model, rejecting any structural difference.
pub fn load_into(model: &mut ReIdMamba, path: impl AsRef<Path>) -> Result<()> {
    read_checkpoint(path)?.apply_to(model)
}
