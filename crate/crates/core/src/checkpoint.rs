//! Checkpoint file: `OFSDCKPT`, manifest length (u64 LE), JSON manifest,
//! then every parameter as little-endian f32 in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::OreFsDet;
use crate::nn::Module;

pub const MAGIC: &[u8; 8] = b"OFSDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: Config,
    pub iteration: u64,
    pub params: Vec<ParamEntry>,
}

impl Manifest {
    pub fn blob_len(&self) -> usize {
        4 * self.params.iter().map(|p| p.shape.iter().product::<usize>()).sum::<usize>()
    }
}

pub fn to_bytes(model: &OreFsDet, config: &Config, iteration: u64) -> Vec<u8> {
    let mut params = Vec::new();
    let mut blob = Vec::new();
    model.visit(&mut |p| {
        params.push(ParamEntry { name: p.name.clone(), shape: p.shape().to_vec(), offset: blob.len() });
        for v in p.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    });
    let manifest = Manifest { version: FORMAT_VERSION, config: config.clone(), iteration, params };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

pub fn save(path: impl AsRef<Path>, model: &OreFsDet, config: &Config, iteration: u64) -> Result<u64> {
    let path = path.as_ref();
    let bytes = to_bytes(model, config, iteration);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

/// Splits a checkpoint into its manifest and blob, checking framing and
/// format version.
pub fn parse(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let version = serde_json::from_slice::<serde_json::Value>(json)?.get("version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Checkpoint(format!("format version {version:?} is not supported (expected {FORMAT_VERSION})")));
    }
    let manifest: Manifest = serde_json::from_slice(json)?;
    let blob = &bytes[16 + len..];
    if blob.len() != manifest.blob_len() {
        return Err(Error::Checkpoint(format!("blob holds {} bytes, manifest describes {}", blob.len(), manifest.blob_len())));
    }
    Ok((manifest, blob))
}

/// Copies stored values into `model`. Names and shapes must match exactly;
/// the first mismatch is reported.
pub fn load_into(model: &mut OreFsDet, bytes: &[u8]) -> Result<Manifest> {
    let (manifest, blob) = parse(bytes)?;
    let mut expected = Vec::new();
    model.visit(&mut |p| expected.push((p.name.clone(), p.shape().to_vec())));
    for (i, (name, shape)) in expected.iter().enumerate() {
        match manifest.params.get(i) {
            Some(e) if &e.name == name && &e.shape == shape => {}
            Some(e) if &e.name == name => {
                return Err(Error::Checkpoint(format!("parameter {name}: checkpoint shape {:?}, model shape {shape:?}", e.shape)))
            }
            Some(e) => return Err(Error::Checkpoint(format!("parameter {name}: checkpoint has {} at this position", e.name))),
            None => return Err(Error::Checkpoint(format!("parameter {name}: missing from checkpoint"))),
        }
    }
    if let Some(extra) = manifest.params.get(expected.len()) {
        return Err(Error::Checkpoint(format!("parameter {}: not present in the model", extra.name)));
    }
    let mut i = 0;
    model.visit_mut(&mut |p| {
        let e = &manifest.params[i];
        let n = p.numel();
        let vals: Vec<f32> = blob[e.offset..e.offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        p.assign(&vals);
        i += 1;
    });
    Ok(manifest)
}

/// Builds the model described by the stored config and loads its weights.
pub fn load(path: impl AsRef<Path>) -> Result<(OreFsDet, Manifest)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, _) = parse(&bytes)?;
    let mut model = OreFsDet::new(&manifest.config.model, 0)?;
    let manifest = load_into(&mut model, &bytes)?;
    Ok((model, manifest))
}
