//! IDX container parsing (big-endian; magic 2051 for `u8` image stacks,
//! 2049 for `u8` labels). Gzip-compressed files are detected and inflated.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use thiserror::Error;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nngraph::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("{what}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { what: String, expected: u32, found: u32 },
    #[error("{what}: truncated IDX data, need {needed} bytes, have {available}")]
    Truncated { what: String, needed: usize, available: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{what}: gzip stream is corrupt: {message}")]
    Gzip { what: String, message: String },
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> std::result::Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| IdxError::Truncated {
            what: what.to_string(),
            needed: at + 4,
            available: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, what: &str) -> std::result::Result<(), IdxError> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(IdxError::BadMagic {
            what: what.to_string(),
            expected,
            found,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], start: usize, len: usize, what: &str) -> std::result::Result<&'a [u8], IdxError> {
    bytes.get(start..start + len).ok_or_else(|| IdxError::Truncated {
        what: what.to_string(),
        needed: start + len,
        available: bytes.len(),
    })
}

/// Returns `(count, rows, cols, pixels)`.
pub fn parse_images(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, &[u8]), IdxError> {
    let what = "images";
    check_magic(bytes, IMAGES_MAGIC, what)?;
    let count = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let pixels = payload(bytes, 16, count * rows * cols, what)?;
    Ok((count, rows, cols, pixels))
}

pub fn parse_labels(bytes: &[u8]) -> std::result::Result<&[u8], IdxError> {
    let what = "labels";
    check_magic(bytes, LABELS_MAGIC, what)?;
    let count = be_u32(bytes, 4, what)? as usize;
    payload(bytes, 8, count, what)
}

/// Raw file contents, inflated if gzip-compressed.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| IdxError::Gzip {
                what: path.display().to_string(),
                message: e.to_string(),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Builds a dataset of `[1, rows, cols]` images scaled by 1/255.
pub fn decode_mnist(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_images(images)?;
    let labels = parse_labels(labels)?;
    if labels.len() != count {
        return Err(IdxError::CountMismatch {
            images: count,
            labels: labels.len(),
        }
        .into());
    }
    let size = rows * cols;
    let inputs = (0..count)
        .map(|i| {
            let data = pixels[i * size..(i + 1) * size].iter().map(|&p| p as f64 / 255.0).collect();
            Tensor::new(vec![1, rows, cols], data)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(inputs, labels, classes, split)
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let images = read_maybe_gz(images_path)?;
    let labels = read_maybe_gz(labels_path)?;
    decode_mnist(&images, &labels, split)
}

/// Loads `train-*` and `t10k-*` files (plain or `.gz`) from a directory.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let find = |stem: &str| -> Result<std::path::PathBuf> {
        for name in [stem.to_string(), format!("{stem}.gz")] {
            let p = dir.join(name);
            if p.is_file() {
                return Ok(p);
            }
        }
        Err(Error::io(
            dir.join(stem),
            std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found"),
        ))
    };
    let train = load_mnist_idx(
        &find("train-images-idx3-ubyte")?,
        &find("train-labels-idx1-ubyte")?,
        Split::Train,
    )?;
    let test = load_mnist_idx(
        &find("t10k-images-idx3-ubyte")?,
        &find("t10k-labels-idx1-ubyte")?,
        Split::Test,
    )?;
    Ok((train, test))
}

/// Serializes images (`[1, rows, cols]`, values in `[0, 1]`) and labels as
/// uncompressed IDX byte streams.
pub fn encode_mnist(data: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let shape = data
        .input_shape()
        .ok_or_else(|| Error::arg("cannot encode an empty dataset"))?
        .to_vec();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::arg("IDX encoding needs [1, rows, cols] images"));
    }
    let mut images = Vec::with_capacity(16 + data.len() * shape[1] * shape[2]);
    images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [data.len(), shape[1], shape[2]] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for x in &data.inputs {
        images.extend(x.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    let mut labels = Vec::with_capacity(8 + data.len());
    labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(data.len() as u32).to_be_bytes());
    labels.extend(data.labels.iter().map(|&l| l as u8));
    Ok((images, labels))
}
