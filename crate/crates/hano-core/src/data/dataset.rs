//! Bit-exact dataset files: coefficient/solution sample pairs with a
//! self-describing JSON header and an integrity checksum.
//!
//! Layout: 8-byte magic `HANODS01`, little-endian u32 header length, the
//! UTF-8 JSON header, the row-major f64 little-endian payload (per sample:
//! coefficient field then solution field), and a trailing little-endian
//! 64-bit FNV-1a checksum over every preceding byte. No timestamps or
//! environment data are recorded, so equal inputs give equal bytes.

use crate::error::{Error, Result};
use crate::grid::GridField;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

/// File magic for dataset files.
pub const DATASET_MAGIC: [u8; 8] = *b"HANODS01";
/// Header schema version.
pub const DATASET_VERSION: u32 = 1;
/// Fields stored per sample (coefficient, solution).
pub const FIELDS_PER_SAMPLE: u32 = 2;

pub(crate) const FNV_OFFSET: u64 = 0xcbf29ce484222325;
pub(crate) const FNV_PRIME: u64 = 0x100000001b3;

/// Streaming 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Fnv1a(u64);

impl Fnv1a {
    pub(crate) fn new() -> Self {
        Fnv1a(FNV_OFFSET)
    }

    pub(crate) fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub(crate) fn finish(self) -> u64 {
        self.0
    }
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::new();
    h.update(bytes);
    h.finish()
}

/// Generator parameters recorded in the header; fields not used by a
/// generator stay absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modes: Option<u32>,
}

/// Self-describing dataset header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub version: u32,
    pub samples: u32,
    pub resolution: u32,
    pub fields_per_sample: u32,
    pub generator: String,
    pub seed: u64,
    pub params: GeneratorParams,
}

/// One (coefficient, solution) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub a: GridField,
    pub u: GridField,
}

fn check_consistency(header: &DatasetHeader, samples: &[Sample]) -> Result<()> {
    if header.version != DATASET_VERSION {
        return Err(Error::format(format!(
            "unsupported dataset version {} (expected {DATASET_VERSION})",
            header.version
        )));
    }
    if header.fields_per_sample != FIELDS_PER_SAMPLE {
        return Err(Error::format(format!(
            "expected {FIELDS_PER_SAMPLE} fields per sample, header says {}",
            header.fields_per_sample
        )));
    }
    if header.samples as usize != samples.len() {
        return Err(Error::format(format!(
            "header promises {} samples, got {}",
            header.samples,
            samples.len()
        )));
    }
    for (idx, s) in samples.iter().enumerate() {
        if s.a.n() != header.resolution as usize || s.u.n() != header.resolution as usize {
            return Err(Error::shape(format!(
                "sample {idx} resolution differs from header resolution {}",
                header.resolution
            )));
        }
    }
    Ok(())
}

/// Write a dataset file; the result is bitwise determined by header and
/// samples.
pub fn write_dataset(path: &Path, header: &DatasetHeader, samples: &[Sample]) -> Result<()> {
    check_consistency(header, samples)?;
    let meta = serde_json::to_vec(header)
        .map_err(|e| Error::format(format!("header serialization failed: {e}")))?;
    let meta_len = u32::try_from(meta.len())
        .map_err(|_| Error::format("header too large".to_string()))?;

    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    let mut hash = Fnv1a::new();
    let mut emit = |file: &mut std::io::BufWriter<fs::File>, bytes: &[u8]| -> Result<()> {
        hash.update(bytes);
        file.write_all(bytes)?;
        Ok(())
    };
    emit(&mut file, &DATASET_MAGIC)?;
    emit(&mut file, &meta_len.to_le_bytes())?;
    emit(&mut file, &meta)?;
    let mut row = Vec::with_capacity(header.resolution as usize * 8);
    for sample in samples {
        for field in [&sample.a, &sample.u] {
            row.clear();
            for v in field.values() {
                row.extend_from_slice(&v.to_le_bytes());
            }
            emit(&mut file, &row)?;
        }
    }
    let digest = hash.finish();
    file.write_all(&digest.to_le_bytes())?;
    file.flush()?;
    Ok(())
}

fn parse_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

/// Read and verify a dataset file.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Sample>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < DATASET_MAGIC.len() + 4 + 8 {
        return Err(Error::format("file too short to be a dataset".to_string()));
    }
    if bytes[..8] != DATASET_MAGIC {
        return Err(Error::format(format!(
            "bad magic {:?} (expected {:?})",
            &bytes[..8.min(bytes.len())],
            DATASET_MAGIC
        )));
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let meta_end = 12 + meta_len;
    if bytes.len() < meta_end + 8 {
        return Err(Error::format("truncated header".to_string()));
    }
    let header: DatasetHeader = serde_json::from_slice(&bytes[12..meta_end])
        .map_err(|e| Error::format(format!("header parse failed: {e}")))?;

    let body_end = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body_end..].try_into().expect("8 bytes"));
    let computed = fnv1a64(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::format(format!(
            "checksum mismatch: stored {stored:#018x}, computed {computed:#018x}"
        )));
    }

    let n = header.resolution as usize;
    let per_field = n * n * 8;
    let expected = header.samples as usize * header.fields_per_sample as usize * per_field;
    if body_end - meta_end != expected {
        return Err(Error::format(format!(
            "payload is {} bytes, header implies {expected}",
            body_end - meta_end
        )));
    }
    let mut samples = Vec::with_capacity(header.samples as usize);
    let mut offset = meta_end;
    for _ in 0..header.samples {
        let a = GridField::from_values(n, parse_f64s(&bytes[offset..offset + per_field]))?;
        offset += per_field;
        let u = GridField::from_values(n, parse_f64s(&bytes[offset..offset + per_field]))?;
        offset += per_field;
        samples.push(Sample { a, u });
    }
    check_consistency(&header, &samples)?;
    Ok((header, samples))
}
