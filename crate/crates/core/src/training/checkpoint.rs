//! Checkpoint format: a directory holding `manifest.json` plus one raw
//! little-endian f32 array per parameter (row-major) and per batch-norm
//! buffer. Round-trip load reproduces eval-mode logits bit-identically.

use crate::error::{Error, Result};
use crate::model::{build_model, Model, ModelConfig};
use crate::numerics::Element;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &str = "TEFORMER_CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BufferRecord {
    pub name: String,
    pub channels: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub magic: String,
    pub version: u32,
    pub config: ModelConfig,
    pub epoch: usize,
    #[serde(default)]
    pub metrics: Option<serde_json::Value>,
    pub params: Vec<ParamRecord>,
    pub buffers: Vec<BufferRecord>,
}

fn bin_name(name: &str) -> String {
    format!("{name}.bin")
}

fn write_f32s(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_f32s(path: &Path, len: usize) -> Result<Vec<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = vec![0f32; len];
    r.read_f32_into::<LittleEndian>(&mut out).map_err(|e| {
        Error::CheckpointFormat(format!("{}: {}", path.display(), e))
    })?;
    Ok(out)
}

/// Persist the model into `dir` (created if missing).
pub fn save_checkpoint<F: Element>(
    model: &Model<F>,
    dir: &Path,
    epoch: usize,
    metrics: Option<serde_json::Value>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut params = Vec::new();
    for entry in model.params.entries() {
        params.push(ParamRecord {
            name: entry.name.clone(),
            shape: entry.value.shape().to_vec(),
            dtype: "f32".into(),
        });
        write_f32s(
            &dir.join(bin_name(&entry.name)),
            entry.value.data().iter().map(|v| v.into_f64() as f32),
        )?;
    }
    let mut buffers = Vec::new();
    for (name, running) in model.bn_buffers() {
        buffers.push(BufferRecord { name: name.clone(), channels: running.mean.len() });
        // layout: running mean then running variance
        write_f32s(
            &dir.join(bin_name(&name)),
            running
                .mean
                .iter()
                .chain(running.var.iter())
                .map(|v| v.into_f64() as f32),
        )?;
    }
    let manifest = Manifest {
        magic: CHECKPOINT_MAGIC.into(),
        version: CHECKPOINT_VERSION,
        config: model.cfg.clone(),
        epoch,
        metrics,
        params,
        buffers,
    };
    let f = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let f = BufReader::new(File::open(dir.join("manifest.json"))?);
    let manifest: Manifest = serde_json::from_reader(f)?;
    if manifest.magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "bad magic `{}`, want `{CHECKPOINT_MAGIC}`",
            manifest.magic
        )));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: manifest.version,
            supported: CHECKPOINT_VERSION,
        });
    }
    Ok(manifest)
}

/// Rebuild the model from a checkpoint directory. Fails without touching
/// the returned model on any malformed entry.
pub fn load_checkpoint(dir: &Path) -> Result<Model<f32>> {
    let manifest = read_manifest(dir)?;
    let mut model = build_model::<f32>(&manifest.config)?;

    for record in &manifest.params {
        let id = model.params.id_of(&record.name).ok_or_else(|| {
            Error::CheckpointFormat(format!("unknown parameter `{}` in manifest", record.name))
        })?;
        if model.params.value(id).shape() != record.shape.as_slice() {
            return Err(Error::CheckpointFormat(format!(
                "parameter `{}` shape {:?} does not match model shape {:?}",
                record.name,
                record.shape,
                model.params.value(id).shape()
            )));
        }
        let numel: usize = record.shape.iter().product();
        let data = read_f32s(&dir.join(bin_name(&record.name)), numel)?;
        model.params.value_mut(id).data_mut().copy_from_slice(&data);
    }

    let mut wanted: std::collections::HashMap<&str, usize> = manifest
        .buffers
        .iter()
        .map(|b| (b.name.as_str(), b.channels))
        .collect();
    for (name, running) in model.bn_buffers_mut() {
        let channels = *wanted.get(name.as_str()).ok_or_else(|| {
            Error::CheckpointFormat(format!("missing buffer `{name}` in manifest"))
        })?;
        if channels != running.mean.len() {
            return Err(Error::CheckpointFormat(format!(
                "buffer `{name}` has {channels} channels, model expects {}",
                running.mean.len()
            )));
        }
        let data = read_f32s(&dir.join(bin_name(&name)), 2 * channels)?;
        running.mean.copy_from_slice(&data[..channels]);
        running.var.copy_from_slice(&data[channels..]);
        wanted.remove(name.as_str());
    }
    Ok(model)
}
