//! Checksummed downloads into a local cache directory.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// One downloadable artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FetchEntry {
    pub name: String,
    /// `http://`, `https://` or `file://` URL.
    pub url: String,
    /// Hex SHA-256 of the bytes served at `url`.
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl FetchEntry {
    /// File name the artifact is stored under, without any `.gz` suffix.
    pub fn file_name(&self) -> String {
        let last = self.url.rsplit('/').next().unwrap_or(&self.name);
        let last = if last.is_empty() { self.name.as_str() } else { last };
        last.strip_suffix(".gz").unwrap_or(last).to_string()
    }
}

fn stamp_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".sha256");
    PathBuf::from(s)
}

/// Whether `out` holds a previously verified copy of `entry`.
fn cached(entry: &FetchEntry, out: &Path) -> bool {
    let Ok(stamp) = fs::read_to_string(stamp_path(out)) else {
        return false;
    };
    let mut lines = stamp.lines();
    let (Some(source), Some(stored)) = (lines.next(), lines.next()) else {
        return false;
    };
    source == entry.sha256.to_ascii_lowercase()
        && fs::read(out).is_ok_and(|bytes| sha256_hex(&bytes) == stored)
}

fn download(url: &str) -> Result<Vec<u8>> {
    let net = |reason: String| Error::Network {
        url: url.to_string(),
        reason,
    };
    if let Some(path) = url.strip_prefix("file://") {
        return fs::read(path).map_err(|e| net(e.to_string()));
    }
    let resp = reqwest::blocking::get(url).map_err(|e| net(e.to_string()))?;
    if !resp.status().is_success() {
        return Err(net(format!("HTTP status {}", resp.status())));
    }
    Ok(resp.bytes().map_err(|e| net(e.to_string()))?.to_vec())
}

/// Downloads `entry` into `dest`, verifies its checksum and gunzips it.
///
/// Nothing is written unless the checksum matches. A second call finds the
/// verified copy and returns its path without touching the network.
pub fn fetch(entry: &FetchEntry, dest: impl AsRef<Path>) -> Result<PathBuf> {
    let dest = dest.as_ref();
    let out = dest.join(entry.file_name());
    if cached(entry, &out) {
        return Ok(out);
    }
    let bytes = download(&entry.url)?;
    let actual = sha256_hex(&bytes);
    let expected = entry.sha256.to_ascii_lowercase();
    if actual != expected {
        return Err(Error::Checksum {
            name: entry.name.clone(),
            expected,
            actual,
        });
    }
    let payload = if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut raw = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut raw)
            .map_err(|e| Error::format(&out, format!("gzip: {e}")))?;
        raw
    } else {
        bytes
    };
    fs::create_dir_all(dest).map_err(|e| Error::io(dest, e))?;
    fs::write(&out, &payload).map_err(|e| Error::io(&out, e))?;
    let stamp = format!("{expected}\n{}\n", sha256_hex(&payload));
    fs::write(stamp_path(&out), stamp).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_name_strips_gz() {
        let e = FetchEntry {
            name: "mnist-train-images".into(),
            url: "https://example.org/mnist/train-images-idx3-ubyte.gz".into(),
            sha256: String::new(),
        };
        assert_eq!(e.file_name(), "train-images-idx3-ubyte");
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
