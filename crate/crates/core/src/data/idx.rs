use std::path::Path;

use super::Table;
use crate::numerics::Matrix;
use crate::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_error(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| format_error(path, "truncated header"))
}

fn parse_header(bytes: &[u8], path: &Path, magic: u32, ndims: usize) -> Result<Vec<usize>> {
    let found = read_u32(bytes, 0, path)?;
    if found != magic {
        return Err(format_error(
            path,
            format!("unsupported magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    (0..ndims)
        .map(|d| read_u32(bytes, 4 + 4 * d, path).map(|v| v as usize))
        .collect()
}

/// Reads an IDX image file (unsigned bytes, `n × rows × cols`) and its label
/// file. Pixels are scaled by `1/255` and images flattened row-major.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Table> {
    let image_bytes = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let label_bytes = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;

    let dims = parse_header(&image_bytes, images, IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let pixels = n * rows * cols;
    let payload = &image_bytes[16..];
    if payload.len() != pixels {
        return Err(format_error(
            images,
            format!("expected {pixels} pixel bytes, found {}", payload.len()),
        ));
    }

    let count = parse_header(&label_bytes, labels, LABELS_MAGIC, 1)?[0];
    let label_payload = &label_bytes[8..];
    if label_payload.len() != count {
        return Err(format_error(
            labels,
            format!("expected {count} label bytes, found {}", label_payload.len()),
        ));
    }
    if count != n {
        return Err(format_error(
            labels,
            format!("{count} labels for {n} images in {}", images.display()),
        ));
    }

    let features = Matrix::new(n, rows * cols, payload.iter().map(|&b| b as f64 / 255.0).collect())?;
    let labels: Vec<usize> = label_payload.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut table = Table::new(features, labels, classes)?;
    table.image_shape = Some((rows, cols));
    Ok(table)
}
