//! Big-endian IDX files (MNIST layout): unsigned-byte image tensors
//! (magic `0x00000803`) and label vectors (magic `0x00000801`).

use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use ndarray::Array2;
use thiserror::Error;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("bad magic at byte 0: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("file truncated at byte {offset}: {needed} more bytes required")]
    Truncated { offset: usize, needed: usize },
    #[error("unexpected trailing data at byte {offset}")]
    TrailingBytes { offset: usize },
    #[error("count mismatch at byte 4 of the label file: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: u32,
    pub rows: u32,
    pub cols: u32,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxLabels {
    pub labels: Vec<u8>,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    if bytes.len() < offset + 4 {
        return Err(IdxError::Truncated {
            offset: bytes.len(),
            needed: offset + 4 - bytes.len(),
        });
    }
    Ok(BigEndian::read_u32(&bytes[offset..offset + 4]))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { expected, found });
    }
    Ok(())
}

fn take_body(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8], IdxError> {
    let end = offset + len;
    if bytes.len() < end {
        return Err(IdxError::Truncated {
            offset: bytes.len(),
            needed: end - bytes.len(),
        });
    }
    if bytes.len() > end {
        return Err(IdxError::TrailingBytes { offset: end });
    }
    Ok(&bytes[offset..end])
}

impl IdxImages {
    pub fn parse(bytes: &[u8]) -> Result<Self, IdxError> {
        check_magic(bytes, IMAGE_MAGIC)?;
        let count = read_u32(bytes, 4)?;
        let rows = read_u32(bytes, 8)?;
        let cols = read_u32(bytes, 12)?;
        let len = count as usize * rows as usize * cols as usize;
        let pixels = take_body(bytes, 16, len)?.to_vec();
        Ok(IdxImages {
            count,
            rows,
            cols,
            pixels,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; 16];
        BigEndian::write_u32(&mut out[0..4], IMAGE_MAGIC);
        BigEndian::write_u32(&mut out[4..8], self.count);
        BigEndian::write_u32(&mut out[8..12], self.rows);
        BigEndian::write_u32(&mut out[12..16], self.cols);
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn pixels_per_image(&self) -> usize {
        self.rows as usize * self.cols as usize
    }
}

impl IdxLabels {
    pub fn parse(bytes: &[u8]) -> Result<Self, IdxError> {
        check_magic(bytes, LABEL_MAGIC)?;
        let count = read_u32(bytes, 4)? as usize;
        Ok(IdxLabels {
            labels: take_body(bytes, 8, count)?.to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; 8];
        BigEndian::write_u32(&mut out[0..4], LABEL_MAGIC);
        BigEndian::write_u32(&mut out[4..8], self.labels.len() as u32);
        out.extend_from_slice(&self.labels);
        out
    }
}

/// Images paired with labels by index, pixels scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFragment {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl DatasetFragment {
    pub fn from_idx(images: &IdxImages, labels: &IdxLabels) -> Result<Self, IdxError> {
        if images.count as usize != labels.labels.len() {
            return Err(IdxError::CountMismatch {
                images: images.count as usize,
                labels: labels.labels.len(),
            });
        }
        let dim = images.pixels_per_image();
        let features = Array2::from_shape_fn((images.count as usize, dim), |(r, c)| {
            f64::from(images.pixels[r * dim + c]) / 255.0
        });
        Ok(DatasetFragment {
            features,
            labels: labels.labels.iter().map(|&l| usize::from(l)).collect(),
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|source| IdxError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetFragment, IdxError> {
    let images = IdxImages::parse(&read_file(images_path)?)?;
    let labels = IdxLabels::parse(&read_file(labels_path)?)?;
    DatasetFragment::from_idx(&images, &labels)
}
