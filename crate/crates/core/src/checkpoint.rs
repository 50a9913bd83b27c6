//! Checkpoint files: a magic line, a length-prefixed JSON header, then raw
//! little-endian `f32` parameter values followed by the optimizer moments.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::GridConfig;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::optim::Adam;
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8] = b"GRAVITYNET-CKPT-1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub epoch: usize,
    pub best_metric: f64,
    pub lr: f64,
    pub optimizer: Adam,
    pub has_moments: bool,
    pub params: Vec<ParamEntry>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
    pub optimizer: Adam,
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub struct SaveArgs<'a> {
    pub config: &'a TrainConfig,
    pub grid: &'a GridConfig,
    pub epoch: usize,
    pub best_metric: f64,
    pub lr: f64,
}

pub fn save(path: &Path, model: &Model, optimizer: &Adam, args: SaveArgs<'_>) -> Result<()> {
    let params = model.params();
    let has_moments = !optimizer.moments.is_empty();
    let header = CheckpointHeader {
        config: args.config.clone(),
        grid: args.grid.clone(),
        model: model.config().clone(),
        epoch: args.epoch,
        best_metric: args.best_metric,
        lr: args.lr,
        optimizer: optimizer.clone(),
        has_moments,
        params: params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &params {
        push_f32s(&mut out, &p.value);
    }
    if has_moments {
        for (m, v) in &optimizer.moments {
            push_f32s(&mut out, m);
            push_f32s(&mut out, v);
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

fn read_f32s(bytes: &mut &[u8], n: usize) -> Result<Vec<f32>> {
    if bytes.len() < n * 4 {
        return Err(Error::Checkpoint("file is truncated".into()));
    }
    let (head, rest) = bytes.split_at(n * 4);
    *bytes = rest;
    Ok(head
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Splits raw file bytes into the parsed header and the remaining payload.
fn parse_header<'a>(path: &Path, raw: &'a [u8]) -> Result<(CheckpointHeader, &'a [u8])> {
    let bytes = raw
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Checkpoint(format!("{} is not a checkpoint file", path.display())))?;
    if bytes.len() < 8 {
        return Err(Error::Checkpoint("file is truncated".into()));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let bytes = &bytes[8..];
    if bytes.len() < len {
        return Err(Error::Checkpoint("file is truncated".into()));
    }
    let header = serde_json::from_slice(&bytes[..len]).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    Ok((header, &bytes[len..]))
}

/// Reads only the header, skipping the parameter payload.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut prefix = vec![0u8; MAGIC.len() + 8];
    file.read_exact(&mut prefix)
        .map_err(|_| Error::Checkpoint(format!("{} is not a checkpoint file", path.display())))?;
    let len = if prefix.starts_with(MAGIC) {
        u64::from_le_bytes(prefix[MAGIC.len()..].try_into().unwrap()) as usize
    } else {
        0
    };
    let mut json = vec![0u8; len];
    file.read_exact(&mut json)
        .map_err(|_| Error::Checkpoint("file is truncated".into()))?;
    prefix.extend_from_slice(&json);
    parse_header(path, &prefix).map(|(h, _)| h)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let (header, mut bytes) = parse_header(path, &raw)?;

    let mut model = Model::build(&header.model, 0)?;
    {
        let mut params = model.params_mut();
        if params.len() != header.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint lists {} parameters, the model has {}",
                header.params.len(),
                params.len()
            )));
        }
        for (p, entry) in params.iter_mut().zip(&header.params) {
            if p.name != entry.name || p.shape != entry.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match model parameter {} {:?}",
                    entry.name, entry.shape, p.name, p.shape
                )));
            }
            p.value = read_f32s(&mut bytes, p.len())?;
        }
    }
    let mut optimizer = header.optimizer.clone();
    if header.has_moments {
        for p in model.params().into_iter().filter(|p| p.trainable) {
            let m = read_f32s(&mut bytes, p.len())?;
            let v = read_f32s(&mut bytes, p.len())?;
            optimizer.moments.push((m, v));
        }
    }
    if !bytes.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len())));
    }
    Ok(Checkpoint {
        header,
        model,
        optimizer,
    })
}
