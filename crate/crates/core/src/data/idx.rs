//! IDX files as used by MNIST and Fashion-MNIST. Gzipped files are
//! decompressed transparently.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

pub(crate) fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
}

/// Parses an IDX image file into `[n, 1, rows, cols]` pixels scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor, String> {
    let magic = be_u32(bytes, 0).ok_or("file too short for a header")?;
    if magic != IMAGES_MAGIC {
        return Err(format!("bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"));
    }
    let n = be_u32(bytes, 4).ok_or("truncated header")? as usize;
    let rows = be_u32(bytes, 8).ok_or("truncated header")? as usize;
    let cols = be_u32(bytes, 12).ok_or("truncated header")? as usize;
    let payload = &bytes[16..];
    let expected = n * rows * cols;
    if payload.len() != expected {
        return Err(format!(
            "payload has {} bytes, header promises {expected}",
            payload.len()
        ));
    }
    let data = payload.iter().map(|&b| (f64::from(b) / 255.0) as f32 as f64).collect();
    Tensor::from_vec(&[n, 1, rows, cols], data).map_err(|e| e.to_string())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, String> {
    let magic = be_u32(bytes, 0).ok_or("file too short for a header")?;
    if magic != LABELS_MAGIC {
        return Err(format!("bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"));
    }
    let n = be_u32(bytes, 4).ok_or("truncated header")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(format!("payload has {} labels, header promises {n}", payload.len()));
    }
    Ok(payload.iter().map(|&b| usize::from(b)).collect())
}

/// Loads an image/label file pair. The source name is taken from the
/// images file's directory.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx_images(&read_maybe_gz(ip)?).map_err(|r| Error::format(ip, r))?;
    let labels = parse_idx_labels(&read_maybe_gz(lp)?).map_err(|r| Error::format(lp, r))?;
    if images.batch() != labels.len() {
        return Err(Error::format(
            lp,
            format!("{} labels for {} images", labels.len(), images.batch()),
        ));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    let source = ip
        .parent()
        .and_then(|p| p.file_name())
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    let file = ip.file_name().map(|s| s.to_string_lossy()).unwrap_or_default();
    let split = if file.starts_with("t10k") || file.contains("test") {
        "test"
    } else {
        "train"
    };
    Dataset::new(images, labels, num_classes, DatasetMeta::new(source, split))
}
