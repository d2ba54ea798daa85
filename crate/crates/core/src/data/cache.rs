//! Dataset cache files.
//!
//! Layout (little-endian): `"DSNC"` | version u32 | num_classes u32 |
//! rank u32 | dims u32… | labels u32 × n | meta length u32 | meta JSON
//! (UTF-8) | f32 pixel payload.

use std::fs;
use std::path::Path;

use super::{Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CACHE_MAGIC: &[u8; 4] = b"DSNC";
pub const CACHE_VERSION: u32 = 1;

pub fn encode_cache(ds: &Dataset) -> Vec<u8> {
    let meta = serde_json::to_vec(&ds.meta).expect("meta serializes");
    let shape = ds.images.shape();
    let mut out = Vec::with_capacity(32 + 4 * (ds.len() + ds.images.len()) + meta.len());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.num_classes as u32).to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for &v in ds.images.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_cache(bytes: &[u8]) -> Result<Dataset, String> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], String> {
        let s = bytes.get(pos..pos + n).ok_or("truncated cache file")?;
        pos += n;
        Ok(s)
    };
    if take(4)? != CACHE_MAGIC {
        return Err("bad magic, not a dataset cache".into());
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != CACHE_VERSION {
        return Err(format!("unsupported cache version {version}"));
    }
    let num_classes = u32_at(take(4)?) as usize;
    let rank = u32_at(take(4)?) as usize;
    if !(2..=8).contains(&rank) {
        return Err(format!("bad rank {rank}"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|_| take(4).map(|s| u32_at(s) as usize))
        .collect::<Result<_, _>>()?;
    let n = shape[0];
    let labels: Vec<usize> = (0..n)
        .map(|_| take(4).map(|s| u32_at(s) as usize))
        .collect::<Result<_, _>>()?;
    let meta_len = u32_at(take(4)?) as usize;
    let meta: DatasetMeta = serde_json::from_slice(take(meta_len)?)
        .map_err(|e| format!("corrupted meta header: {e}"))?;
    let count: usize = shape.iter().product();
    let payload = take(count.checked_mul(4).ok_or("shape overflow")?)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    if pos != bytes.len() {
        return Err("trailing bytes after payload".into());
    }
    let images = Tensor::from_vec(&shape, data).map_err(|e| e.to_string())?;
    Dataset::new(images, labels, num_classes, meta).map_err(|e| e.to_string())
}

pub fn save_cache(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cache(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_cache(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(&bytes).map_err(|r| Error::format(path, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(pixels: Vec<f32>, chain: &str) -> Dataset {
        let n = pixels.len() / 4;
        let images = Tensor::from_vec(&[n, 1, 2, 2], pixels.into_iter().map(f64::from).collect())
            .unwrap();
        let mut meta = DatasetMeta::new("mnist", "train");
        meta.transforms.push(chain.into());
        Dataset::new(images, (0..n).map(|i| i % 3).collect(), 3, meta).unwrap()
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(px in prop::collection::vec(0.0f32..=1.0, 4..64)) {
            let n = px.len() / 4 * 4;
            let ds = sample(px[..n].to_vec(), "saturate(p=8)");
            let back = decode_cache(&encode_cache(&ds)).unwrap();
            prop_assert_eq!(&back, &ds);
        }
    }

    #[test]
    fn chain_is_preserved_and_magic_checked() {
        let ds = sample(vec![0.0, 0.25, 0.5, 1.0], "saturate(p=8)");
        let mut bytes = encode_cache(&ds);
        assert_eq!(decode_cache(&bytes).unwrap().meta.transforms, vec!["saturate(p=8)"]);
        bytes[4] = 9;
        assert!(decode_cache(&bytes).unwrap_err().contains("version"));
        bytes[0] = b'Z';
        assert!(decode_cache(&bytes).unwrap_err().contains("magic"));
    }

    #[test]
    fn corrupted_meta_is_rejected() {
        let ds = sample(vec![0.0; 4], "x");
        let mut bytes = encode_cache(&ds);
        // Meta JSON starts right after the length field.
        let meta_start = 4 + 4 + 4 + 4 + 4 * 4 + 4 + 4;
        bytes[meta_start] = b'#';
        assert!(decode_cache(&bytes).unwrap_err().contains("meta"));
    }
}
