//! Parsers and writers for the MNIST IDX and CIFAR-10 binary formats.
//!
//! Parsing is bit-exact: pixel bytes are kept as `u8` here and only scaled to
//! `[0, 1]` when a [`Dataset`] is built from them.

use std::path::Path;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use thiserror::Error;

use crate::data::{Dataset, Labels, Meta, Task};
use crate::rng::RngSeed;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("bad IDX magic 0x{0:08x} (only unsigned-byte rank 1 or 3 is supported)")]
    BadMagic(u32),
    #[error("input truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("CIFAR-10 input length {0} is not a multiple of 3073")]
    BadStride(usize),
    #[error("CIFAR-10 record {index} has label {label} (must be < 10)")]
    BadLabel { index: usize, label: u8 },
    #[error("IDX tensor shape does not match payload length")]
    ShapeMismatch,
}

pub const IDX_U8_RANK1: u32 = 0x0000_0801;
pub const IDX_U8_RANK3: u32 = 0x0000_0803;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    pub fn new(dims: Vec<usize>, data: Vec<u8>) -> Result<Self, IngestError> {
        if !matches!(dims.len(), 1 | 3) || dims.iter().product::<usize>() != data.len() {
            return Err(IngestError::ShapeMismatch);
        }
        Ok(IdxTensor { dims, data })
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor, IngestError> {
    let need = |needed: usize| {
        if bytes.len() < needed {
            Err(IngestError::Truncated {
                needed,
                have: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(4)?;
    let magic = be_u32(&bytes[0..4]);
    let rank = match magic {
        IDX_U8_RANK1 => 1,
        IDX_U8_RANK3 => 3,
        other => return Err(IngestError::BadMagic(other)),
    };
    let header = 4 + 4 * rank;
    need(header)?;
    let dims: Vec<usize> = (0..rank)
        .map(|r| be_u32(&bytes[4 + 4 * r..8 + 4 * r]) as usize)
        .collect();
    // checked: dims come straight from the file
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|p| p.checked_add(header))
        .ok_or(IngestError::Truncated {
            needed: usize::MAX,
            have: bytes.len(),
        })?;
    need(payload)?;
    if bytes.len() > payload {
        return Err(IngestError::TrailingBytes(bytes.len() - payload));
    }
    Ok(IdxTensor {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn write_idx(t: &IdxTensor) -> Vec<u8> {
    let magic = if t.dims.len() == 1 {
        IDX_U8_RANK1
    } else {
        IDX_U8_RANK3
    };
    let mut out = Vec::with_capacity(4 + 4 * t.dims.len() + t.data.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&t.data);
    out
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

pub const CIFAR_RECORD_LEN: usize = 3073;
pub const CIFAR_PIXELS: usize = 3072;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cifar10Record {
    pub label: u8,
    /// R, G and B planes of 32x32, each row-major.
    pub pixels: Box<[u8; CIFAR_PIXELS]>,
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<Cifar10Record>, IngestError> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(IngestError::BadStride(bytes.len()));
    }
    bytes
        .chunks_exact(CIFAR_RECORD_LEN)
        .enumerate()
        .map(|(index, rec)| {
            let label = rec[0];
            if label >= 10 {
                return Err(IngestError::BadLabel { index, label });
            }
            let mut pixels = Box::new([0u8; CIFAR_PIXELS]);
            pixels.copy_from_slice(&rec[1..]);
            Ok(Cifar10Record { label, pixels })
        })
        .collect()
}

pub fn write_cifar10(records: &[Cifar10Record]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD_LEN);
    for r in records {
        out.push(r.label);
        out.extend_from_slice(&r.pixels[..]);
    }
    out
}

/// Builds a 10-class dataset from IDX image (N×rows×cols) and label tensors,
/// scaling pixels to `[0, 1]`. `causal_id` records the digit.
pub fn mnist_dataset(images: &IdxTensor, labels: &IdxTensor) -> crate::Result<Dataset> {
    if images.dims.len() != 3 || labels.dims.len() != 1 || images.dims[0] != labels.dims[0] {
        return Err(crate::Error::InvalidDataset(
            "expected rank-3 images and rank-1 labels with equal counts".into(),
        ));
    }
    let n = images.dims[0];
    let d = images.dims[1] * images.dims[2];
    let feats = Array2::from_shape_vec(
        (n, d),
        images.data.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )
    .map_err(|e| crate::Error::InvalidDataset(e.to_string()))?;
    let classes: Vec<u32> = labels.data.iter().map(|&l| u32::from(l)).collect();
    let causal = classes.iter().map(|&c| c as i32).collect();
    Dataset::new(
        feats,
        Labels::Class(classes),
        Task::Multiclass(10),
        Meta {
            causal_id: Some(causal),
            ..Meta::default()
        },
    )
}

pub fn load_mnist(images: &Path, labels: &Path) -> crate::Result<Dataset> {
    let images = parse_idx(&std::fs::read(images)?)?;
    let labels = parse_idx(&std::fs::read(labels)?)?;
    mnist_dataset(&images, &labels)
}

pub fn load_cifar10(paths: &[impl AsRef<Path>]) -> crate::Result<Vec<Cifar10Record>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(parse_cifar10(&std::fs::read(p)?)?);
    }
    Ok(out)
}

/// One random image per CIFAR class, indexed by class.
pub fn pick_backgrounds(
    records: &[Cifar10Record],
    seed: RngSeed,
) -> crate::Result<Vec<Box<[u8; CIFAR_PIXELS]>>> {
    let mut rng = seed.rng();
    (0..10u8)
        .map(|class| {
            let pool: Vec<&Cifar10Record> = records.iter().filter(|r| r.label == class).collect();
            pool.choose(&mut rng)
                .map(|r| r.pixels.clone())
                .ok_or_else(|| {
                    crate::Error::InvalidDataset(format!("no CIFAR image of class {class}"))
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank3_example() {
        let bytes = [0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 1, 2, 3, 4];
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.dims, vec![1, 2, 2]);
        assert_eq!(t.data, vec![1, 2, 3, 4]);
    }

    #[test]
    fn rank1_example() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 7, 0, 9];
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.dims, vec![3]);
        assert_eq!(t.data, vec![7, 0, 9]);
    }

    #[test]
    fn idx_errors() {
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(IngestError::Truncated { .. })));
        assert_eq!(
            parse_idx(&[0, 0, 9, 1, 0, 0, 0, 0]),
            Err(IngestError::BadMagic(0x0000_0901))
        );
        assert!(matches!(
            parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 7]),
            Err(IngestError::Truncated { needed: 11, have: 9 })
        ));
        assert_eq!(
            parse_idx(&[0, 0, 8, 1, 0, 0, 0, 1, 7, 7]),
            Err(IngestError::TrailingBytes(1))
        );
        // huge declared dims must not overflow or allocate
        assert!(parse_idx(&[0, 0, 8, 3, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255]).is_err());
    }

    #[test]
    fn cifar_examples() {
        assert!(parse_cifar10(&[]).unwrap().is_empty());
        let mut rec = vec![3u8];
        rec.extend(std::iter::repeat_n(128u8, CIFAR_PIXELS));
        let parsed = parse_cifar10(&rec).unwrap();
        assert_eq!(parsed.len(), 1);
        assert_eq!(parsed[0].label, 3);
        assert!(parsed[0].pixels.iter().all(|&p| p == 128));
        assert_eq!(write_cifar10(&parsed), rec);
        rec[0] = 10;
        assert_eq!(
            parse_cifar10(&rec),
            Err(IngestError::BadLabel { index: 0, label: 10 })
        );
        assert_eq!(parse_cifar10(&rec[1..]), Err(IngestError::BadStride(3072)));
    }

    #[test]
    fn mnist_pixels_are_scaled() {
        let images = IdxTensor::new(vec![1, 1, 2], vec![0, 255]).unwrap();
        let labels = IdxTensor::new(vec![1], vec![4]).unwrap();
        let d = mnist_dataset(&images, &labels).unwrap();
        assert_eq!(d.features().row(0).to_vec(), vec![0.0, 1.0]);
        assert_eq!(d.class_labels().unwrap(), &[4]);
    }
}
