//! IDX (MNIST-family) ingestion.

use std::path::Path;

use super::{DataError, Dataset};
use crate::numerics::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32(buf: &[u8], at: usize) -> Result<u32, DataError> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(DataError::Truncated {
            needed: at + 4,
            found: buf.len(),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let images = read_file(images_path.as_ref())?;
    let labels = read_file(labels_path.as_ref())?;
    parse_idx(&images, &labels)
}

/// Parses in-memory IDX buffers; pixel bytes are scaled by 1/255.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset, DataError> {
    let magic = read_u32(images, 0)?;
    if magic != IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            found: magic,
            expected: IMAGES_MAGIC,
        });
    }
    let magic = read_u32(labels, 0)?;
    if magic != LABELS_MAGIC {
        return Err(DataError::BadMagic {
            found: magic,
            expected: LABELS_MAGIC,
        });
    }
    let n = read_u32(images, 4)? as usize;
    let rows = read_u32(images, 8)? as usize;
    let cols = read_u32(images, 12)? as usize;
    let n_labels = read_u32(labels, 4)? as usize;
    if n != n_labels {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    if rows != cols || rows == 0 {
        return Err(DataError::NotSquare { rows, cols });
    }
    let pixels = n * rows * cols;
    let body = images.get(16..16 + pixels).ok_or(DataError::Truncated {
        needed: 16 + pixels,
        found: images.len(),
    })?;
    let label_bytes = labels.get(8..8 + n).ok_or(DataError::Truncated {
        needed: 8 + n,
        found: labels.len(),
    })?;
    if n == 0 {
        return Err(DataError::Invalid("empty IDX file".into()));
    }
    let ys: Vec<usize> = label_bytes.iter().map(|&b| usize::from(b)).collect();
    let classes = ys.iter().max().map_or(1, |m| m + 1);
    let data = body.iter().map(|&b| f32::from(b) / 255.0).collect();
    let inputs = Tensor::new(vec![n, 1, rows, cols], data).map_err(|e| DataError::Invalid(e.to_string()))?;
    Dataset::new(inputs, ys, classes)
}

#[cfg(test)]
pub(crate) fn encode_idx(images: &[u8], n: u32, side: u32, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut im = Vec::new();
    for v in [IMAGES_MAGIC, n, side, side] {
        im.extend_from_slice(&v.to_be_bytes());
    }
    im.extend_from_slice(images);
    let mut lb = Vec::new();
    for v in [LABELS_MAGIC, labels.len() as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend_from_slice(labels);
    (im, lb)
}
