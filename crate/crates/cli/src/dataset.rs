//! Dataset directories: `features.f64` (row-major little-endian `f64`),
//! `labels.u32` (little-endian) and `manifest.json`.

use std::path::Path;

use cos2p_core::data::Dataset;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub rows: usize,
    pub dim: usize,
    pub classes: usize,
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let feats: Vec<u8> = data.features.iter().flat_map(|v| v.to_le_bytes()).collect();
    let labels: Vec<u8> = data.labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect();
    let manifest = DatasetManifest {
        rows: data.len(),
        dim: data.dim,
        classes: data.classes,
    };
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| CliError::io(p, e))
    };
    write("features.f64", &feats)?;
    write("labels.u32", &labels)?;
    write(
        "manifest.json",
        serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes(),
    )
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| CliError::io(p, e))
    };
    let mpath = dir.join("manifest.json");
    let m: DatasetManifest =
        serde_json::from_slice(&read("manifest.json")?).map_err(|e| CliError::format(&mpath, e.to_string()))?;
    let feats = read("features.f64")?;
    let labels = read("labels.u32")?;
    if feats.len() != m.rows * m.dim * 8 {
        return Err(CliError::format(dir.join("features.f64"), "size does not match the manifest"));
    }
    if labels.len() != m.rows * 4 {
        return Err(CliError::format(dir.join("labels.u32"), "size does not match the manifest"));
    }
    let features = feats
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let labels = labels
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
        .collect();
    Ok(Dataset::new(m.dim, m.classes, features, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cos2p_core::{data, rng};

    #[test]
    fn round_trip() {
        let d = data::gen_synthetic(3, 4, 5, 2.0, &mut rng::seeded(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let d = data::gen_synthetic(3, 4, 5, 2.0, &mut rng::seeded(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &d).unwrap();
        std::fs::write(dir.path().join("labels.u32"), [0u8; 7]).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap_err().exit_code(), 1);
    }
}
