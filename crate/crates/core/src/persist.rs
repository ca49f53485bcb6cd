//! Checkpoint directories and DMAP density-map files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::geometry::DensityMap;
use crate::model::{ModelSpec, PaDNet};
use crate::raster::Raster;

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model_spec: ModelSpec,
    pub parameters: Vec<TensorEntry>,
}

/// Writes `manifest.json` and `params.bin` (little-endian f32, manifest order) into `dir`.
pub fn save_checkpoint(model: &PaDNet<f32>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = Vec::new();
    let mut parameters = Vec::new();
    for (name, shape, values) in model.named_tensors() {
        parameters.push(TensorEntry { name, shape, offset: blob.len() });
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest { format_version: CHECKPOINT_FORMAT, model_spec: model.spec().clone(), parameters };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, json + "\n").map_err(io_err(&mpath))?;
    let bpath = dir.join(BLOB_FILE);
    std::fs::write(&bpath, blob).map_err(io_err(&bpath))
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: mpath, message: e.to_string() })
}

/// Entries must follow each other without gaps and end at the end of the blob.
fn check_tiling(m: &CheckpointManifest, blob_len: usize) -> Result<()> {
    let mut expect = 0;
    for e in &m.parameters {
        if e.offset != expect {
            return Err(Error::Checkpoint(format!("{}: offset {} but previous data ends at {expect}", e.name, e.offset)));
        }
        expect += 4 * e.shape.iter().product::<usize>();
    }
    if expect != blob_len {
        return Err(Error::Checkpoint(format!("entries cover {expect} bytes but the blob has {blob_len}")));
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<PaDNet<f32>> {
    let m = read_checkpoint_manifest(dir)?;
    if m.format_version != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format_version {}", m.format_version)));
    }
    let bpath = dir.join(BLOB_FILE);
    let blob = std::fs::read(&bpath).map_err(io_err(&bpath))?;
    check_tiling(&m, blob.len())?;
    let mut model = PaDNet::<f32>::build(&m.model_spec, 0)?;
    let entries: Vec<(String, Vec<usize>, Vec<f32>)> = m
        .parameters
        .iter()
        .map(|e| {
            let n = e.shape.iter().product::<usize>();
            let values = blob[e.offset..e.offset + 4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            (e.name.clone(), e.shape.clone(), values)
        })
        .collect();
    model.load_named(&entries).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(model)
}

/// Loads a checkpoint whose spec must equal `expected`.
pub fn load_checkpoint_matching(dir: &Path, expected: &ModelSpec) -> Result<PaDNet<f32>> {
    let m = read_checkpoint_manifest(dir)?;
    if &m.model_spec != expected {
        return Err(spec_mismatch(&m.model_spec, expected));
    }
    load_checkpoint(dir)
}

pub fn spec_mismatch(found: &ModelSpec, expected: &ModelSpec) -> Error {
    let show = |s: &ModelSpec| serde_json::to_string(s).unwrap_or_default();
    Error::Checkpoint(format!("model spec mismatch\n  checkpoint: {}\n  expected:   {}", show(found), show(expected)))
}

const DMAP_MAGIC: &[u8; 4] = b"DMAP";
const DMAP_VERSION: u32 = 1;

/// `"DMAP"`, u32 version, u32 height, u32 width, then row-major f32, all little-endian.
pub fn encode_dmap(map: &DensityMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * map.values.len());
    out.extend_from_slice(DMAP_MAGIC);
    for v in [DMAP_VERSION, map.height as u32, map.width as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &map.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_dmap(bytes: &[u8]) -> Result<DensityMap> {
    let bad = |m: String| Error::Invalid(format!("DMAP: {m}"));
    if bytes.len() < 16 || &bytes[..4] != DMAP_MAGIC {
        return Err(bad("missing magic header".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let version = u32_at(4);
    if version != DMAP_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (h, w) = (u32_at(8) as usize, u32_at(12) as usize);
    if bytes.len() != 16 + 4 * h * w {
        return Err(bad(format!("{} bytes for a {h}x{w} map", bytes.len())));
    }
    let values = bytes[16..].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    DensityMap::new(h, w, values)
}

pub fn write_dmap(path: &Path, map: &DensityMap) -> Result<()> {
    std::fs::write(path, encode_dmap(map)).map_err(io_err(path))
}

pub fn read_dmap(path: &Path) -> Result<DensityMap> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_dmap(&bytes).map_err(|e| Error::Parse { path: path.to_path_buf(), message: e.to_string() })
}

/// 8-bit grayscale rendering scaled so the largest cell is white.
pub fn heatmap(map: &DensityMap) -> Raster {
    let peak = map.values.iter().copied().fold(0.0f32, f32::max);
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let data = map.values.iter().map(|&v| (v.max(0.0) * scale).round().min(255.0) as u8).collect();
    Raster::gray(map.width, map.height, data).expect("map size")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dmap_round_trip() {
        let map = DensityMap::new(2, 3, vec![0.0, 1.5, -0.0, f32::MIN_POSITIVE, 7.25, 1e-9]).unwrap();
        let back = decode_dmap(&encode_dmap(&map)).unwrap();
        assert_eq!(
            back.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            map.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(decode_dmap(b"DMAQ").is_err());
        assert!(decode_dmap(&encode_dmap(&map)[..20]).is_err());
    }

    #[test]
    fn checkpoint_rejects_bad_offsets() {
        let model = PaDNet::<f32>::build(&ModelSpec::with_levels(1), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        let loaded = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded.params, model.params);

        let mut m = read_checkpoint_manifest(dir.path()).unwrap();
        m.parameters[1].offset += 4;
        std::fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_string(&m).unwrap()).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(err.contains("offset"), "{err}");
    }

    #[test]
    fn spec_mismatch_prints_both() {
        let model = PaDNet::<f32>::build(&ModelSpec::with_levels(1), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        let err = load_checkpoint_matching(dir.path(), &ModelSpec::with_levels(2)).unwrap_err().to_string();
        assert!(err.contains("checkpoint:") && err.contains("expected:") && err.contains("\"N\":2"), "{err}");
    }
}
