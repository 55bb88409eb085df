//! Reader for the IDX binary format (MNIST style).

use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use super::{Dataset, DatasetError};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: magic number {found:#010x}, expected {expected:#010x}")]
    MagicMismatch { path: String, expected: u32, found: u32 },
    #[error("{path}: truncated, need {needed} bytes but file has {got}")]
    Truncated { path: String, needed: usize, got: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("requested class {0} does not occur in the label file")]
    MissingClass(u8),
    #[error("keep_classes must list at least two distinct classes")]
    BadKeepClasses,
}

fn be_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]])
}

fn read_file(path: &Path) -> Result<Vec<u8>, DatasetError> {
    std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn check_header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>, IdxError> {
    let p = path.display().to_string();
    let header = 4 + 4 * dims;
    if bytes.len() >= 4 && be_u32(bytes, 0) != magic {
        return Err(IdxError::MagicMismatch {
            path: p,
            expected: magic,
            found: be_u32(bytes, 0),
        });
    }
    if bytes.len() < header {
        return Err(IdxError::Truncated {
            path: p,
            needed: header,
            got: bytes.len(),
        });
    }
    let sizes: Vec<usize> = (0..dims).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let needed = header + sizes.iter().product::<usize>();
    if bytes.len() < needed {
        return Err(IdxError::Truncated {
            path: p,
            needed,
            got: bytes.len(),
        });
    }
    Ok(sizes)
}

/// Loads images and labels, keeping only `keep_classes` (relabeled to their
/// position in that list) and at most `max_per_class` images of each, taken
/// in file order. Pixels are scaled to `[0, 1]`.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    keep_classes: &[u8],
    max_per_class: usize,
) -> Result<Dataset, DatasetError> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let mut distinct = keep_classes.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 || distinct.len() != keep_classes.len() {
        return Err(IdxError::BadKeepClasses.into());
    }

    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    let img_dims = check_header(&images, images_path, IMAGES_MAGIC, 3)?;
    let lbl_dims = check_header(&labels, labels_path, LABELS_MAGIC, 1)?;
    let (count, rows, cols) = (img_dims[0], img_dims[1], img_dims[2]);
    if count != lbl_dims[0] {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: lbl_dims[0],
        }
        .into());
    }
    let dim = rows * cols;
    let pixels = &images[16..];
    let raw_labels = &labels[8..];

    let mut taken = vec![0usize; keep_classes.len()];
    let mut selected = Vec::new();
    let mut new_labels = Vec::new();
    for (i, &digit) in raw_labels.iter().take(count).enumerate() {
        let Some(k) = keep_classes.iter().position(|&c| c == digit) else {
            continue;
        };
        if taken[k] >= max_per_class {
            continue;
        }
        taken[k] += 1;
        selected.push(i);
        new_labels.push(k);
    }
    if let Some(k) = taken.iter().position(|&t| t == 0) {
        return Err(IdxError::MissingClass(keep_classes[k]).into());
    }
    let points = DMatrix::from_fn(dim, selected.len(), |r, c| {
        f64::from(pixels[selected[c] * dim + r]) / 255.0
    });
    let names = keep_classes.iter().map(|d| d.to_string()).collect();
    Ok(Dataset::new(points, new_labels, keep_classes.len())?.with_class_names(names))
}
