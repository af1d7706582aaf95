//! Single-file checkpoint container.
//!
//! ```text
//! u64 LE   header length H
//! H bytes  UTF-8 JSON header
//! blobs    raw little-endian tensors, ascending and contiguous
//! u64 LE   CRC-64/XZ of the blob region
//! ```
//!
//! Header:
//!
//! ```json
//! {"format_version":1,
//!  "meta":{"key":"value"},
//!  "tensors":{"name":{"dtype":"f32le","shape":[2,3],"offset":0,"length":24,"trainable":true}}}
//! ```
//!
//! Tensor names and meta keys are sorted, so identical inputs encode to
//! identical bytes. Offsets are relative to the start of the blob region.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crc::{Crc, CRC_64_XZ};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::data::Dataset;
use crate::numerics::{DType, Element, ParamSet, Tensor};

pub const FORMAT_VERSION: u64 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, thiserror::Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint header: {0}")]
    MalformedHeader(String),
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u64),
    #[error("blob CRC mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    Crc { stored: u64, computed: u64 },
    #[error("tensor `{name}` overlaps the previous tensor")]
    OffsetOverlap { name: String },
    #[error("bad tensor layout: {0}")]
    Layout(String),
    #[error("tensor `{name}` is {found}, expected {expected}")]
    Dtype {
        name: String,
        found: String,
        expected: &'static str,
    },
    #[error("checkpoint content: {0}")]
    Content(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, Entry>,
}

/// Decoded checkpoint: parameters plus free-form string metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Element> {
    pub meta: BTreeMap<String, String>,
    pub params: ParamSet<T>,
}

pub fn encode<T: Element>(params: &ParamSet<T>, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let mut blobs = Vec::with_capacity(params.numel() * T::DTYPE.size());
    let mut tensors = BTreeMap::new();
    for p in params.iter() {
        let offset = blobs.len() as u64;
        for &v in p.value().data() {
            v.write_le(&mut blobs);
        }
        tensors.insert(
            p.name.clone(),
            Entry {
                dtype: T::DTYPE.as_str().to_string(),
                shape: p.value().shape().to_vec(),
                offset,
                length: blobs.len() as u64 - offset,
                trainable: p.trainable,
            },
        );
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        meta: meta.clone(),
        tensors,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + blobs.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blobs);
    out.extend_from_slice(&CRC64.checksum(&blobs).to_le_bytes());
    out
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<Checkpoint<T>, PersistError> {
    if bytes.len() < 16 {
        return Err(PersistError::MalformedHeader(format!("file is only {} bytes", bytes.len())));
    }
    let header_len = u64_at(bytes, 0);
    if header_len > (bytes.len() - 16) as u64 {
        return Err(PersistError::MalformedHeader(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let header_end = 8 + header_len as usize;
    let header: Header = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| PersistError::MalformedHeader(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(PersistError::UnsupportedVersion(header.format_version));
    }
    let blobs = &bytes[header_end..bytes.len() - 8];
    let stored = u64_at(bytes, bytes.len() - 8);
    let computed = CRC64.checksum(blobs);
    if stored != computed {
        return Err(PersistError::Crc { stored, computed });
    }

    let mut order: Vec<(&String, &Entry)> = header.tensors.iter().collect();
    order.sort_by_key(|(name, e)| (e.offset, *name));
    let mut cursor = 0u64;
    for (name, e) in &order {
        if e.offset < cursor {
            return Err(PersistError::OffsetOverlap { name: name.to_string() });
        }
        if e.offset > cursor {
            return Err(PersistError::Layout(format!("gap before `{name}` at offset {cursor}")));
        }
        cursor = e.offset + e.length;
    }
    if cursor != blobs.len() as u64 {
        return Err(PersistError::Layout(format!(
            "tensors cover {cursor} of {} blob bytes",
            blobs.len()
        )));
    }

    let mut params = ParamSet::new();
    for (name, e) in header.tensors {
        if DType::parse(&e.dtype) != Some(T::DTYPE) {
            return Err(PersistError::Dtype {
                name,
                found: e.dtype,
                expected: T::DTYPE.as_str(),
            });
        }
        let numel: usize = e.shape.iter().product();
        if e.shape.is_empty() && e.length as usize != T::DTYPE.size() || numel * T::DTYPE.size() != e.length as usize {
            return Err(PersistError::Layout(format!(
                "`{name}`: shape {:?} does not match {} bytes",
                e.shape, e.length
            )));
        }
        let raw = &blobs[e.offset as usize..(e.offset + e.length) as usize];
        let data: Vec<T> = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        let value = Tensor::new(e.shape, data).map_err(|err| PersistError::Layout(format!("`{name}`: {err}")))?;
        params.insert(name, value, e.trainable);
    }
    Ok(Checkpoint {
        meta: header.meta,
        params,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

pub fn save<T: Element>(
    path: impl AsRef<Path>,
    params: &ParamSet<T>,
    meta: &BTreeMap<String, String>,
) -> Result<(), PersistError> {
    write_atomic(path.as_ref(), &encode(params, meta))
}

pub fn load<T: Element>(path: impl AsRef<Path>) -> Result<Checkpoint<T>, PersistError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes)
}

const KIND: &str = "kind";
const BACKBONE_CONFIG: &str = "backbone_config";

fn expect_kind(meta: &BTreeMap<String, String>, kind: &str) -> Result<(), PersistError> {
    match meta.get(KIND) {
        Some(k) if k == kind => Ok(()),
        other => Err(PersistError::Content(format!("expected a {kind} checkpoint, found {other:?}"))),
    }
}

pub fn save_backbone<T: Element>(path: impl AsRef<Path>, bb: &Backbone<T>) -> Result<(), PersistError> {
    let meta = BTreeMap::from([
        (KIND.to_string(), "backbone".to_string()),
        (
            BACKBONE_CONFIG.to_string(),
            serde_json::to_string(&bb.cfg).expect("config serializes"),
        ),
    ]);
    save(path, &bb.params, &meta)
}

pub fn load_backbone<T: Element>(path: impl AsRef<Path>) -> Result<Backbone<T>, PersistError> {
    let ck = load::<T>(path)?;
    expect_kind(&ck.meta, "backbone")?;
    let raw = ck
        .meta
        .get(BACKBONE_CONFIG)
        .ok_or_else(|| PersistError::Content("backbone checkpoint without config".into()))?;
    let cfg: BackboneConfig = serde_json::from_str(raw).map_err(|e| PersistError::Content(e.to_string()))?;
    Ok(Backbone { cfg, params: ck.params })
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<(), PersistError> {
    let mut params = ParamSet::<f32>::new();
    params.insert("inputs", ds.inputs().clone(), false);
    let labels: Vec<f32> = ds.labels().iter().map(|&y| y as f32).collect();
    params.insert(
        "labels",
        Tensor::new(vec![labels.len()], labels).expect("non-empty dataset"),
        false,
    );
    let meta = BTreeMap::from([
        (KIND.to_string(), "dataset".to_string()),
        ("num_classes".to_string(), ds.num_classes().to_string()),
    ]);
    save(path, &params, &meta)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, PersistError> {
    let ck = load::<f32>(path)?;
    expect_kind(&ck.meta, "dataset")?;
    let classes: usize = ck
        .meta
        .get("num_classes")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PersistError::Content("dataset checkpoint without num_classes".into()))?;
    let content = |e: &dyn std::fmt::Display| PersistError::Content(e.to_string());
    let inputs = ck.params.value("inputs").map_err(|e| content(&e))?.clone();
    let labels = ck
        .params
        .value("labels")
        .map_err(|e| content(&e))?
        .data()
        .iter()
        .map(|&y| y as usize)
        .collect();
    Dataset::new(inputs, labels, classes).map_err(|e| content(&e))
}
