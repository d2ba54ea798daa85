//! CIFAR-10 binary batches: each record is one label byte followed by
//! 3072 pixel bytes (red plane, green plane, blue plane, 32×32 each).

use std::path::Path;

use super::idx::read_maybe_gz;
use super::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

pub fn load_cifar_binary<P: AsRef<Path>>(batch_paths: &[P]) -> Result<Dataset> {
    if batch_paths.is_empty() {
        return Err(Error::invalid("no CIFAR batch files given"));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in batch_paths {
        let path = p.as_ref();
        let bytes = read_maybe_gz(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(Error::format(
                path,
                format!(
                    "size {} is not a multiple of the {CIFAR_RECORD_LEN}-byte record",
                    bytes.len()
                ),
            ));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
            if rec[0] >= 10 {
                return Err(Error::format(path, format!("label byte {} out of range", rec[0])));
            }
            labels.push(usize::from(rec[0]));
            pixels.extend(rec[1..].iter().map(|&b| (f64::from(b) / 255.0) as f32 as f64));
        }
    }
    let n = labels.len();
    let images = Tensor::from_vec(&[n, 3, 32, 32], pixels)?;
    let first = batch_paths[0].as_ref();
    let name = first.file_name().map(|s| s.to_string_lossy()).unwrap_or_default();
    let split = if name.contains("test") { "test" } else { "train" };
    Dataset::new(images, labels, 10, DatasetMeta::new("cifar10", split))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_record_fixture_loads_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let path = dir.path().join("data_batch_1.bin");
        std::fs::write(&path, &rec).unwrap();
        let ds = load_cifar_binary(&[&path]).unwrap();
        assert_eq!(ds.images.shape(), &[1, 3, 32, 32]);
        assert_eq!(ds.labels, vec![7]);
        // Channel-major as stored: green plane starts at byte 1024.
        assert_eq!(ds.images.data()[1024], 0.0);
        assert_eq!(ds.images.data()[255], 1.0);
        assert_eq!(ds.images.data()[1], (1.0f64 / 255.0) as f32 as f64);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; CIFAR_RECORD_LEN + 5]).unwrap();
        assert!(matches!(load_cifar_binary(&[&path]), Err(Error::Format { .. })));
    }
}
