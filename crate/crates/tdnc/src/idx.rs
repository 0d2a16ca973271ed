// SPDX-License-Identifier: Apache-2.0

//! IDX files as distributed with MNIST: a big-endian magic number, big-endian
//! `u32` dimensions, then unsigned bytes in row-major order.

use std::path::Path;

use tdnc_core::netir::{Dataset, FeatureMap, MapDims};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic number 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("file truncated: header promises {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{actual} trailing bytes after the {expected} promised by the header")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("file declares zero items")]
    Empty,
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is not below {classes}")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            expected: at + 4,
            actual: bytes.len(),
        })
}

/// Header dims and payload after checking magic and length.
fn parse(bytes: &[u8], magic: u32, ndims: usize) -> Result<(Vec<usize>, &[u8]), IdxError> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(IdxError::BadMagic {
            expected: magic,
            found,
        });
    }
    let dims = (0..ndims)
        .map(|i| read_u32(bytes, 4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    if dims[0] == 0 {
        return Err(IdxError::Empty);
    }
    let header = 4 + 4 * ndims;
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|payload| payload.checked_add(header))
        .unwrap_or(usize::MAX);
    if bytes.len() < expected {
        return Err(IdxError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(IdxError::TrailingBytes {
            expected,
            actual: bytes.len(),
        });
    }
    Ok((dims, &bytes[header..]))
}

/// Images as `1 × rows × cols` maps with pixels divided by 255.
pub fn parse_images(bytes: &[u8]) -> Result<Vec<FeatureMap>, IdxError> {
    let (dims, payload) = parse(bytes, IMAGES_MAGIC, 3)?;
    let (rows, cols) = (dims[1], dims[2]);
    let md = MapDims::new(1, rows, cols);
    Ok(payload
        .chunks_exact(rows * cols)
        .map(|px| {
            FeatureMap::from_vec(md, px.iter().map(|&b| f64::from(b) / 255.0).collect())
                .expect("chunk length matches dims")
        })
        .collect())
}

/// Raw labels; range checks happen when a dataset is assembled.
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>, IdxError> {
    let (_, payload) = parse(bytes, LABELS_MAGIC, 1)?;
    Ok(payload.iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|source| IdxError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_idx_images(path: &Path) -> Result<Vec<FeatureMap>, IdxError> {
    parse_images(&read(path)?)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>, IdxError> {
    parse_labels(&read(path)?)
}

/// Pairs images with labels, checking counts and label range.
pub fn assemble(
    images: Vec<FeatureMap>,
    labels: Vec<usize>,
    classes: usize,
) -> Result<Dataset, IdxError> {
    if images.len() != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images.len(),
            labels: labels.len(),
        });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(IdxError::LabelOutOfRange {
            index,
            label,
            classes,
        });
    }
    Ok(Dataset::new(images, labels).expect("counts checked"))
}

/// Builds an IDX byte image; used for fixtures and by tests.
pub fn encode(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}
