//! On-disk container shared by checkpoints, score files and mask files.
//!
//! Layout: one line of UTF-8 JSON (the header, ending in `\n`) followed by
//! raw little-endian blobs. Manifest offsets are relative to the first byte
//! after the header line. Round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// Parameter kind tag: embedding | head | matrix2d | vector1d.
    pub kind: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
    /// Frozen-unit count, present in mask manifests only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frozen: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationInfo {
    pub samples: usize,
    pub seq_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskSpecEcho {
    pub ratio: f64,
    pub granularity: String,
    pub method: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub format_version: u32,
    /// checkpoint | scores | mask
    pub kind: String,
    /// f32 | f64 | u8
    pub dtype: String,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_spec: Option<MaskSpecEcho>,
    pub manifest: Vec<ManifestEntry>,
}

impl ContainerHeader {
    pub fn entry(&self, name: &str) -> Option<&ManifestEntry> {
        self.manifest.iter().find(|e| e.name == name)
    }
}

pub fn write_file(path: &Path, header: &ContainerHeader, payload: &[u8]) -> Result<()> {
    let json = serde_json::to_string(header).map_err(|e| Error::Format(e.to_string()))?;
    debug_assert!(!json.contains('\n'));
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(json.as_bytes())?;
    f.write_all(b"\n")?;
    f.write_all(payload)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<(ContainerHeader, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format(format!("{}: missing header line", path.display())))?;
    let header: ContainerHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported format version {}",
            path.display(),
            header.format_version
        )));
    }
    let payload = bytes[nl + 1..].to_vec();
    for e in &header.manifest {
        let end = e.offset + e.nbytes;
        if end as usize > payload.len() {
            return Err(Error::Format(format!(
                "{}: manifest entry {} overruns payload",
                path.display(),
                e.name
            )));
        }
    }
    Ok((header, payload))
}

/// Slice an entry's blob out of the payload.
pub fn entry_bytes<'p>(entry: &ManifestEntry, payload: &'p [u8]) -> &'p [u8] {
    &payload[entry.offset as usize..(entry.offset + entry.nbytes) as usize]
}
