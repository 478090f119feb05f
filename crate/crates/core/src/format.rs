//! Two-file container shared by plain and merged models.
//!
//! A `.nmj` JSON manifest describes the architecture and lists named sections
//! of a sibling `.nmb` blob. Each section records its byte offset, length,
//! element type and CRC32; the manifest also carries the CRC32 of the whole
//! blob. Reals are little-endian IEEE-754 `f64`, codeword indices are `u8`
//! or `u16` depending on codebook size.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

pub const FORMAT_NAME: &str = "neuralmerger";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElemType {
    F64,
    U8,
    U16,
}

impl ElemType {
    pub fn width(self) -> usize {
        match self {
            ElemType::F64 => 8,
            ElemType::U8 => 1,
            ElemType::U16 => 2,
        }
    }

    /// Narrowest index type able to address `count` codewords.
    pub fn for_codebook(count: usize) -> Self {
        if count <= 256 {
            ElemType::U8
        } else {
            ElemType::U16
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionInfo {
    pub name: String,
    pub dtype: ElemType,
    pub offset: usize,
    pub len: usize,
    pub crc32: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest<B> {
    format: String,
    version: u32,
    kind: String,
    blob: String,
    blob_len: usize,
    blob_crc32: u32,
    sections: Vec<SectionInfo>,
    body: B,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

#[derive(Debug, Default)]
pub struct BlobWriter {
    bytes: Vec<u8>,
    sections: Vec<SectionInfo>,
}

impl BlobWriter {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: String, dtype: ElemType, payload: Vec<u8>) -> String {
        self.sections.push(SectionInfo {
            name: name.clone(),
            dtype,
            offset: self.bytes.len(),
            len: payload.len(),
            crc32: crc32fast::hash(&payload),
        });
        self.bytes.extend_from_slice(&payload);
        name
    }

    pub fn push_f64(&mut self, name: impl Into<String>, values: &[f64]) -> String {
        let payload = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push(name.into(), ElemType::F64, payload)
    }

    /// Stores codeword indices with the given width; every index must fit.
    pub fn push_indices(&mut self, name: impl Into<String>, values: &[u32], dtype: ElemType) -> String {
        let payload = match dtype {
            ElemType::U8 => values.iter().map(|&v| v as u8).collect(),
            ElemType::U16 => values.iter().flat_map(|&v| (v as u16).to_le_bytes()).collect(),
            ElemType::F64 => panic!("indices cannot be stored as f64"),
        };
        self.push(name.into(), dtype, payload)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }
}

#[derive(Debug)]
pub struct BlobReader {
    bytes: Vec<u8>,
    sections: BTreeMap<String, SectionInfo>,
    taken: usize,
}

impl BlobReader {
    fn section(&mut self, name: &str) -> std::result::Result<(&SectionInfo, &[u8]), FormatError> {
        let info = self
            .sections
            .get(name)
            .ok_or_else(|| FormatError::Structure(format!("missing section `{name}`")))?;
        let end = info.offset + info.len;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated {
                section: name.to_string(),
                start: info.offset,
                end,
                len: self.bytes.len(),
            });
        }
        let slice = &self.bytes[info.offset..end];
        if crc32fast::hash(slice) != info.crc32 {
            return Err(FormatError::Checksum {
                section: name.to_string(),
            });
        }
        self.taken += 1;
        Ok((info, slice))
    }

    pub fn f64s(&mut self, name: &str, expected_len: usize) -> std::result::Result<Vec<f64>, FormatError> {
        let (info, slice) = self.section(name)?;
        if info.dtype != ElemType::F64 || slice.len() != expected_len * 8 {
            return Err(FormatError::Structure(format!(
                "section `{name}` holds {} bytes of {:?}, expected {expected_len} f64",
                slice.len(),
                info.dtype
            )));
        }
        Ok(slice
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    pub fn indices(&mut self, name: &str, expected_len: usize) -> std::result::Result<Vec<u32>, FormatError> {
        let (info, slice) = self.section(name)?;
        let width = info.dtype.width();
        if info.dtype == ElemType::F64 || slice.len() != expected_len * width {
            return Err(FormatError::Structure(format!(
                "section `{name}` holds {} bytes of {:?}, expected {expected_len} indices",
                slice.len(),
                info.dtype
            )));
        }
        Ok(match info.dtype {
            ElemType::U8 => slice.iter().map(|&b| u32::from(b)).collect(),
            _ => slice
                .chunks_exact(2)
                .map(|c| u32::from(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
        })
    }

    /// Every section listed in the manifest must have been consumed once.
    pub fn finish(self) -> std::result::Result<(), FormatError> {
        if self.taken != self.sections.len() {
            return Err(FormatError::Structure(format!(
                "manifest layers reference {} sections but the blob lists {}",
                self.taken,
                self.sections.len()
            )));
        }
        Ok(())
    }
}

/// Blob path belonging to a manifest path (`x.nmj` -> `x.nmb`).
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("nmb")
}

pub(crate) fn write_container<B: Serialize>(
    path: &Path,
    kind: &str,
    body: &B,
    blob: BlobWriter,
    provenance: Option<&serde_json::Value>,
) -> Result<()> {
    let blob_file = blob_path(path);
    let manifest = Manifest {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        blob: blob_file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_len: blob.bytes.len(),
        blob_crc32: crc32fast::hash(&blob.bytes),
        sections: blob.sections,
        body,
        provenance: provenance.cloned(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(FormatError::from)?;
    fs::write(&blob_file, &blob.bytes).map_err(|e| Error::io(&blob_file, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Kind string stored in a manifest, without decoding the body.
pub fn manifest_kind(path: &Path) -> Result<String> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&raw).map_err(FormatError::from)?;
    Ok(value
        .get("kind")
        .and_then(|k| k.as_str())
        .unwrap_or_default()
        .to_string())
}

pub(crate) fn read_container<B: DeserializeOwned>(
    path: &Path,
    kind: &str,
) -> Result<(B, BlobReader, Option<serde_json::Value>)> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&raw).map_err(FormatError::from)?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let manifest: Manifest<B> = serde_json::from_value(value).map_err(FormatError::from)?;
    if manifest.format != FORMAT_NAME || manifest.kind != kind {
        return Err(FormatError::Structure(format!(
            "expected a `{kind}` manifest, found `{}` of kind `{}`",
            manifest.format, manifest.kind
        ))
        .into());
    }
    let blob_file = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    if bytes.len() != manifest.blob_len || crc32fast::hash(&bytes) != manifest.blob_crc32 {
        return Err(FormatError::Checksum {
            section: manifest.blob.clone(),
        }
        .into());
    }
    let mut sections = BTreeMap::new();
    for s in manifest.sections {
        if sections.insert(s.name.clone(), s).is_some() {
            return Err(FormatError::Structure("duplicate section name".into()).into());
        }
    }
    Ok((
        manifest.body,
        BlobReader {
            bytes,
            sections,
            taken: 0,
        },
        manifest.provenance,
    ))
}
