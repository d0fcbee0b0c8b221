//! IDX image/label files (big-endian headers, unsigned byte payloads).

use std::path::{Path, PathBuf};

use betaat::data::{DataError, Dataset};
use betaat::tensor::Tensor;
use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: truncated, expected {expected} bytes, found {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|source| IdxError::Io { path: path.to_path_buf(), source })
}

fn header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>, IdxError> {
    let need = 4 * (1 + dims);
    if bytes.len() < 4 {
        return Err(IdxError::Truncated { path: path.into(), expected: need, found: bytes.len() });
    }
    let word = |i: usize| u32::from_be_bytes([bytes[4 * i], bytes[4 * i + 1], bytes[4 * i + 2], bytes[4 * i + 3]]);
    let found = word(0);
    if found != magic {
        return Err(IdxError::BadMagic { path: path.into(), expected: magic, found });
    }
    if bytes.len() < need {
        return Err(IdxError::Truncated { path: path.into(), expected: need, found: bytes.len() });
    }
    Ok((1..=dims).map(|i| word(i) as usize).collect())
}

/// Parses an image file and a label file; pixels are divided by 255.
pub fn parse_idx(images: &[u8], labels: &[u8], images_path: &Path, labels_path: &Path) -> Result<Dataset, IdxError> {
    let dims = header(images, images_path, IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let n_labels = header(labels, labels_path, LABELS_MAGIC, 1)?[0];
    if n != n_labels {
        return Err(IdxError::CountMismatch { images: n, labels: n_labels });
    }
    let d = rows * cols;
    let expected = 16 + n * d;
    if images.len() < expected {
        return Err(IdxError::Truncated { path: images_path.into(), expected, found: images.len() });
    }
    if labels.len() < 8 + n {
        return Err(IdxError::Truncated { path: labels_path.into(), expected: 8 + n, found: labels.len() });
    }
    if n == 0 || d == 0 {
        return Err(DataError::Empty.into());
    }
    let pixels: Vec<f64> = images[16..expected].iter().map(|&b| f64::from(b) / 255.0).collect();
    let ys: Vec<usize> = labels[8..8 + n].iter().map(|&b| usize::from(b)).collect();
    let classes = ys.iter().max().map_or(2, |m| (m + 1).max(2));
    let features = Tensor::new(vec![n, d], pixels).map_err(DataError::from)?;
    Ok(Dataset::new(features, ys, classes)?)
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, IdxError> {
    parse_idx(&read(images)?, &read(labels)?, images, labels)
}

/// Encodes 8-bit images and labels in IDX format.
pub fn encode_idx(pixels: &[u8], n: usize, rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + pixels.len());
    for w in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend(w.to_be_bytes());
    }
    img.extend(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    for w in [LABELS_MAGIC, labels.len() as u32] {
        lab.extend(w.to_be_bytes());
    }
    lab.extend(labels);
    (img, lab)
}
