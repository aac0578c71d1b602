//! Checkpoints: `COS2P1`, a little-endian `u64` manifest length, the JSON
//! manifest, then every segment's values as little-endian `f64` in
//! manifest order.

use std::io::{Read, Write};
use std::path::Path;

use cos2p_core::layout::{ModelLayout, ModelSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 6] = b"COS2P1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub name: String,
    pub layer: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: ModelSpec,
    pub segments: Vec<SegmentEntry>,
}

impl Manifest {
    pub fn of(layout: &ModelLayout) -> Self {
        let t = &layout.table;
        Manifest {
            spec: layout.spec,
            segments: t
                .segments
                .iter()
                .map(|s| SegmentEntry {
                    name: s.name.clone(),
                    layer: t.layers[s.layer].name.clone(),
                    offset: s.offset,
                    length: s.len,
                })
                .collect(),
        }
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, layout: &ModelLayout, params: &[f64]) -> std::io::Result<()> {
    let manifest = serde_json::to_vec(&Manifest::of(layout)).map_err(std::io::Error::other)?;
    w.write_all(MAGIC)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    for s in &layout.table.segments {
        for v in &params[s.range()] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn save(path: &Path, layout: &ModelLayout, params: &[f64]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    write_checkpoint(std::io::BufWriter::new(f), layout, params).map_err(|e| CliError::io(path, e))
}

/// Reads a checkpoint and rebuilds its layout; the manifest must match the
/// layout implied by its model spec.
pub fn read_checkpoint<R: Read>(mut r: R, path: &Path) -> Result<(ModelLayout, Vec<f64>)> {
    let bad = |m: &str| CliError::format(path, m);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("not a COS2P1 checkpoint"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| bad("truncated header"))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(|e| CliError::io(path, e))?;
    if raw.len() < len {
        return Err(bad("truncated manifest"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&raw[..len]).map_err(|e| CliError::format(path, format!("manifest: {}", e)))?;
    let layout = ModelLayout::new(manifest.spec)?;
    if Manifest::of(&layout) != manifest {
        return Err(bad("segment table does not match the model spec"));
    }
    let body = &raw[len..];
    if body.len() != layout.table.total * 8 {
        return Err(bad("parameter payload has the wrong length"));
    }
    let mut params = vec![0.0; layout.table.total];
    let mut chunks = body.chunks_exact(8);
    for s in &layout.table.segments {
        for p in &mut params[s.range()] {
            let c = chunks.next().ok_or_else(|| bad("parameter payload has the wrong length"))?;
            *p = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
        }
    }
    Ok((layout, params))
}

pub fn load(path: &Path) -> Result<(ModelLayout, Vec<f64>)> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f), path)
}
