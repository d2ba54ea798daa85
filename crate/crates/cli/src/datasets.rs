//! Locating datasets on disk and caching transformed variants.

use std::path::{Path, PathBuf};

use robustshift::data::{gen_synthetic, load_cache, load_cifar_binary, load_idx, save_cache, sha256_hex, Dataset};
use robustshift::transforms::{apply, TransformSpec};

use crate::config::{DatasetSpec, Split};
use crate::error::{CliError, Result, StageContext};

pub const DATA_DIR_ENV: &str = "ROBUSTSHIFT_DATA_DIR";
pub const CACHE_DIR_ENV: &str = "ROBUSTSHIFT_CACHE_DIR";

pub fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_DIR_ENV).map_or_else(|| data_dir().join(".cache"), PathBuf::from)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Idx,
    Cifar,
}

/// A `source` as written resolves relative to the working directory when it
/// exists there, otherwise relative to the data directory.
pub fn resolve_source(source: &str) -> PathBuf {
    let direct = PathBuf::from(source);
    if direct.exists() {
        direct
    } else {
        data_dir().join(source)
    }
}

fn find(dir: &Path, stem: &str) -> Option<PathBuf> {
    [stem.to_string(), format!("{stem}.gz")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
}

/// Files holding one split of the dataset in `dir`, and their format.
pub fn locate(dir: &Path, split: Split) -> Result<(Format, Vec<PathBuf>)> {
    if !dir.is_dir() {
        return Err(CliError::validation(format!(
            "dataset directory {} does not exist (set {DATA_DIR_ENV} or run `fetch`)",
            dir.display()
        )));
    }
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    if let (Some(images), Some(labels)) = (
        find(dir, &format!("{prefix}-images-idx3-ubyte")),
        find(dir, &format!("{prefix}-labels-idx1-ubyte")),
    ) {
        return Ok((Format::Idx, vec![images, labels]));
    }
    let batches: Vec<PathBuf> = match split {
        Split::Train => (1..=5).filter_map(|i| find(dir, &format!("data_batch_{i}.bin"))).collect(),
        Split::Test => find(dir, "test_batch.bin").into_iter().collect(),
    };
    if batches.is_empty() {
        return Err(CliError::validation(format!(
            "no IDX or CIFAR-10 {} files found in {}",
            split.as_str(),
            dir.display()
        )));
    }
    Ok((Format::Cifar, batches))
}

fn load_files(format: Format, files: &[PathBuf]) -> Result<Dataset> {
    match format {
        Format::Idx => load_idx(&files[0], &files[1]),
        Format::Cifar => load_cifar_binary(files),
    }
    .stage("load")
}

/// Content hash of everything the split is built from.
pub fn input_hash(spec: &DatasetSpec, seed: u64, split: Split) -> Result<String> {
    if let Some(syn) = &spec.synthetic {
        let json = serde_json::to_string(&syn.spec(split, seed)?).expect("synthetic spec serializes");
        return Ok(sha256_hex(json.as_bytes()));
    }
    let (_, files) = locate(&resolve_source(&spec.source), split)?;
    let mut parts = String::new();
    for f in &files {
        let bytes = std::fs::read(f).map_err(|e| CliError::io(f, e))?;
        parts.push_str(&sha256_hex(&bytes));
        parts.push('\n');
    }
    Ok(sha256_hex(parts.as_bytes()))
}

/// The untransformed split.
pub fn load_base(spec: &DatasetSpec, seed: u64, split: Split) -> Result<Dataset> {
    if let Some(syn) = &spec.synthetic {
        return gen_synthetic(&syn.spec(split, seed)?).stage("load");
    }
    let (format, files) = locate(&resolve_source(&spec.source), split)?;
    load_files(format, &files)
}

/// Cache file for `chain` applied to a split with the given input hash.
pub fn cache_path(input_hash: &str, split: Split, chain: &[TransformSpec]) -> PathBuf {
    let names: Vec<String> = chain.iter().map(ToString::to_string).collect();
    let key = sha256_hex(format!("{input_hash}\n{}\n{}", split.as_str(), names.join("|")).as_bytes());
    cache_dir().join(format!("{}.dsnc", &key[..24]))
}

/// The split with `chain` applied, read from the cache when a previous run
/// stored it. Nothing is cached for an empty chain.
pub fn load_variant(spec: &DatasetSpec, seed: u64, split: Split, chain: &[TransformSpec]) -> Result<Dataset> {
    if chain.is_empty() {
        return load_base(spec, seed, split);
    }
    let path = cache_path(&input_hash(spec, seed, split)?, split, chain);
    if path.is_file() {
        if let Ok(ds) = load_cache(&path) {
            return Ok(ds);
        }
    }
    let mut ds = load_base(spec, seed, split)?;
    for t in chain {
        ds = apply(&ds, t).stage("transform")?;
    }
    // Stored at single precision; use exactly what a later cache hit returns.
    ds.images = ds.images.map(|v| v as f32 as f64);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    // Write then rename so a concurrent reader never sees a partial file.
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    save_cache(&ds, &tmp).stage("transform")?;
    std::fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
    Ok(ds)
}

/// A dataset named on the command line: a `.dsnc` file or a dataset
/// directory.
pub fn load_path(path: &Path, split: Split) -> Result<Dataset> {
    if path.is_file() {
        return load_cache(path).stage("load");
    }
    let dir = if path.exists() {
        path.to_path_buf()
    } else {
        resolve_source(&path.to_string_lossy())
    };
    let (format, files) = locate(&dir, split)?;
    load_files(format, &files)
}
