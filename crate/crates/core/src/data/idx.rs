//! The IDX container: big-endian `[0, 0, type, ndims]` magic, one
//! big-endian `u32` per dimension, then the unsigned-byte payload.

use std::fs;
use std::path::Path;

use fan_tensor::Tensor;

use super::{check_labels, preprocess, DomainDataset, DomainTag, IMAGE_SIDE};
use crate::error::{FanError, Result};

const UBYTE: u8 = 0x08;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const IMAGES_MAGIC: u32 = 0x0000_0803;
/// Four-dimensional `[N, C, H, W]` images; used for RGB sources.
pub const IMAGES4_MAGIC: u32 = 0x0000_0804;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub(crate) fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(FanError::Data("IDX file shorter than its magic number".into()));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != UBYTE || bytes[3] == 0 {
        return Err(FanError::Data(format!("bad IDX magic 0x{magic:08x}")));
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(FanError::Data("IDX header truncated".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    let payload = bytes.len() - header;
    if payload != expected {
        return Err(FanError::Data(format!(
            "IDX payload has {payload} bytes, header {dims:?} promises {expected}"
        )));
    }
    Ok(IdxArray {
        magic,
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| FanError::io(path, e))?;
    parse_idx(&bytes).map_err(|e| match e {
        FanError::Data(m) => FanError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads an image file (and optionally its labels) into a dataset of
/// 28×28 grayscale images in `[0, 1]`. RGB inputs are converted to gray
/// first, then resized.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>, domain: DomainTag) -> Result<DomainDataset> {
    let arr = read_idx(images_path)?;
    let (n, c, h, w) = match (arr.magic, arr.dims.as_slice()) {
        (IMAGES_MAGIC, &[n, h, w]) => (n, 1, h, w),
        (IMAGES4_MAGIC, &[n, c, h, w]) if c == 1 || c == 3 => (n, c, h, w),
        _ => {
            return Err(FanError::Data(format!(
                "{}: magic 0x{:08x} with dims {:?} is not an image file",
                images_path.display(),
                arr.magic,
                arr.dims
            )))
        }
    };
    if n == 0 || h == 0 || w == 0 {
        return Err(FanError::Data(format!("{}: empty image set", images_path.display())));
    }
    let labels = match labels_path {
        Some(p) => {
            let l = read_idx(p)?;
            if l.magic != LABELS_MAGIC {
                return Err(FanError::Data(format!(
                    "{}: magic 0x{:08x} is not a label file",
                    p.display(),
                    l.magic
                )));
            }
            let labels: Vec<usize> = l.data.iter().map(|&b| b as usize).collect();
            check_labels(&labels, n).map_err(|e| FanError::Data(format!("{}: {e}", p.display())))?;
            Some(labels)
        }
        None => None,
    };
    let per = c * h * w;
    let mut data = Vec::with_capacity(n * IMAGE_SIDE * IMAGE_SIDE);
    for i in 0..n {
        let raw: Vec<f32> = arr.data[i * per..(i + 1) * per]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        let img = Tensor::new(&[c, h, w], raw)?;
        data.extend_from_slice(preprocess::to_model_input(&img)?.data());
    }
    let images = Tensor::new(&[n, 1, IMAGE_SIDE, IMAGE_SIDE], data)?;
    DomainDataset::new(images, labels, domain, images_path.display().to_string())
}

fn write_idx(path: &Path, magic: u32, dims: &[usize], payload: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    bytes.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| FanError::Argument(format!("IDX dimension {d} too large")))?;
        bytes.extend_from_slice(&d.to_be_bytes());
    }
    bytes.extend_from_slice(payload);
    fs::write(path, bytes).map_err(|e| FanError::io(path, e))
}

/// Writes `[N, H, W]` or `[N, C, H, W]` unsigned-byte images.
pub fn write_idx_images(path: &Path, dims: &[usize], pixels: &[u8]) -> Result<()> {
    let magic = match dims.len() {
        3 => IMAGES_MAGIC,
        4 => IMAGES4_MAGIC,
        n => return Err(FanError::Argument(format!("{n}-dimensional image file"))),
    };
    if dims.iter().product::<usize>() != pixels.len() {
        return Err(FanError::Argument("pixel count does not match dims".into()));
    }
    write_idx(path, magic, dims, pixels)
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let bytes: Vec<u8> = labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| FanError::Argument(format!("label {l} exceeds a byte"))))
        .collect::<Result<_>>()?;
    write_idx(path, LABELS_MAGIC, &[labels.len()], &bytes)
}

impl DomainDataset {
    /// Writes the images (quantized to bytes) and any evaluation labels in
    /// IDX form.
    pub fn save_idx(&self, images_path: &Path, labels_path: Option<&Path>) -> Result<()> {
        let pixels: Vec<u8> = self
            .images()
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        write_idx_images(images_path, &[self.len(), IMAGE_SIDE, IMAGE_SIDE], &pixels)?;
        if let (Some(p), Some(l)) = (labels_path, self.evaluation_labels()) {
            write_idx_labels(p, l)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b
    }

    #[test]
    fn parses_header_and_payload() {
        let mut b = header(IMAGES_MAGIC, &[2, 2, 3]);
        b.extend((0..12).map(|v| v as u8));
        let a = parse_idx(&b).unwrap();
        assert_eq!(a.dims, vec![2, 2, 3]);
        assert_eq!(a.data.len(), 12);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut b = header(0x0000_0903, &[1, 1, 1]);
        b.push(0);
        assert!(parse_idx(&b).is_err());
        let mut b = header(IMAGES_MAGIC, &[2, 2, 2]);
        b.extend([0u8; 7]);
        assert!(matches!(parse_idx(&b), Err(FanError::Data(m)) if m.contains("payload")));
        assert!(parse_idx(&[0, 0]).is_err());
    }
}
