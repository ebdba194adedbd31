//! IDX container files (the MNIST distribution format).
//!
//! Header: two zero bytes, a type byte, a rank byte, then `rank` big-endian
//! u32 dimensions. Unsigned-byte pixels are scaled to `[0, 1]`; 32-bit float
//! payloads (type `0x0D`, used for written shards) are taken as is.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TYPE_U8: u8 = 0x08;
const TYPE_F32: u8 = 0x0D;

#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: IdxData,
}

impl IdxArray {
    pub fn parse(bytes: &[u8], name: &str) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Data(format!(
                "{name}: {} bytes is too short for an IDX header",
                bytes.len()
            )));
        }
        let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
        let (ty, rank) = (bytes[2], bytes[3] as usize);
        if bytes[0] != 0 || bytes[1] != 0 || (ty != TYPE_U8 && ty != TYPE_F32) || rank == 0 {
            return Err(Error::Data(format!(
                "{name}: bad IDX magic 0x{magic:08x} at offset 0"
            )));
        }
        let header = 4 + 4 * rank;
        if bytes.len() < header {
            return Err(Error::Data(format!(
                "{name}: header needs {header} bytes, file has {}",
                bytes.len()
            )));
        }
        let dims: Vec<usize> = (0..rank)
            .map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().unwrap()) as usize)
            .collect();
        let count: usize = dims.iter().product();
        let width = if ty == TYPE_U8 { 1 } else { 4 };
        let expected = header + count * width;
        if bytes.len() != expected {
            return Err(Error::Data(format!(
                "{name}: dimensions {dims:?} imply {expected} bytes, file has {} (payload starts at offset {header})",
                bytes.len()
            )));
        }
        let body = &bytes[header..];
        let data = if ty == TYPE_U8 {
            IdxData::U8(body.to_vec())
        } else {
            IdxData::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_be_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        };
        Ok(Self { dims, data })
    }
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    IdxArray::parse(&bytes, &path.display().to_string())
}

/// Load an image file and its label file into a [`Dataset`] with
/// `max(label) + 1` classes (at least 10 for byte-valued digit data).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_idx(images_path)?;
    let labels = read_idx(labels_path)?;
    let iname = images_path.display();
    let lname = labels_path.display();
    if images.dims.len() < 2 {
        return Err(Error::Data(format!(
            "{iname}: expected an image file (rank >= 2, magic 0x00000803), got rank {}",
            images.dims.len()
        )));
    }
    let labels = match (&labels.dims[..], labels.data) {
        ([_], IdxData::U8(v)) => v,
        _ => {
            return Err(Error::Data(format!(
                "{lname}: expected a label file (magic 0x00000801), got rank {}",
                labels.dims.len()
            )))
        }
    };
    let n = images.dims[0];
    if n != labels.len() {
        return Err(Error::Data(format!(
            "{iname} declares {n} images at offset 4 but {lname} declares {} labels",
            labels.len()
        )));
    }
    let features: usize = images.dims[1..].iter().product();
    let pixels = match images.data {
        IdxData::U8(v) => v.into_iter().map(|b| b as f32 / 255.0).collect(),
        IdxData::F32(v) => v,
    };
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(Tensor::new(vec![n, features], pixels)?, labels, classes)
}

fn header(ty: u8, dims: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, ty, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

/// Write a `rows x cols` float matrix as IDX type `0x0D`.
pub fn write_idx_f32(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    if data.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "{rows}x{cols} matrix with {} values",
            data.len()
        )));
    }
    let mut out = header(TYPE_F32, &[rows, cols]);
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    write_file(path, &out)
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = header(TYPE_U8, &[labels.len()]);
    for &y in labels {
        let b = u8::try_from(y).map_err(|_| Error::Data(format!("label {y} does not fit a byte")))?;
        out.push(b);
    }
    write_file(path, &out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

impl Dataset {
    /// Write as an IDX float image file plus a label file.
    pub fn write_idx(&self, images_path: &Path, labels_path: &Path) -> Result<()> {
        write_idx_f32(images_path, self.len(), self.features(), self.inputs.data())?;
        write_idx_labels(labels_path, &self.labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn u8_images(n: u32, r: u32, c: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3];
        for d in [n, r, c] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn parses_byte_images() {
        let a = IdxArray::parse(&u8_images(2, 1, 2, &[0, 255, 51, 102]), "t").unwrap();
        assert_eq!(a.dims, vec![2, 1, 2]);
        assert_eq!(a.data, IdxData::U8(vec![0, 255, 51, 102]));
    }

    #[test]
    fn truncated_payload_reports_sizes() {
        let err = IdxArray::parse(&u8_images(2, 1, 2, &[0, 1, 2]), "t").unwrap_err();
        assert!(err.to_string().contains("imply 20 bytes, file has 19"), "{err}");
    }

    #[test]
    fn rejects_unknown_type() {
        assert!(IdxArray::parse(&[0, 0, 0x0B, 1, 0, 0, 0, 0], "t").is_err());
        assert!(IdxArray::parse(&[1, 2], "t").is_err());
    }
}
