//! Labeled image collections: loaders, synthetic generators, subsets and
//! the on-disk cache.

mod cache;
mod cifar;
mod fetch;
mod idx;
mod subset;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use cache::{decode_cache, encode_cache, load_cache, save_cache, CACHE_MAGIC, CACHE_VERSION};
pub use cifar::{load_cifar_binary, CIFAR_RECORD_LEN};
pub use fetch::{fetch, sha256_hex, FetchEntry};
pub use idx::{load_idx, parse_idx_images, parse_idx_labels};
pub use subset::subset;
pub use synthetic::{gen_synthetic, SyntheticKind, SyntheticSpec};

/// Where a dataset came from and what has been done to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub source: String,
    /// Operations applied after loading, oldest first, e.g. `saturate(p=8)`.
    pub transforms: Vec<String>,
    pub seed: u64,
    pub split: String,
}

impl DatasetMeta {
    pub fn new(source: impl Into<String>, split: impl Into<String>) -> Self {
        DatasetMeta {
            source: source.into(),
            transforms: Vec::new(),
            seed: 0,
            split: split.into(),
        }
    }
}

/// Images `[n, ...item_shape]` with one class label each.
///
/// Pixels are stored as `f64`. Everything loaded from image files or
/// produced by a transform holds single-precision values in `[0, 1]`; the
/// concentric-spheres generator is the one source whose points leave the
/// unit cube.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, meta: DatasetMeta) -> Result<Self> {
        if images.shape().len() < 2 {
            return Err(Error::Shape(format!(
                "images need a leading batch dimension, got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of a single image.
    pub fn item_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn dim(&self) -> usize {
        self.images.item_len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let images = self.images.select(indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (images, labels)
    }

    /// A new dataset holding the items at `indices`; metadata is copied.
    pub fn take(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
            meta: self.meta.clone(),
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.images.data().iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Rounds to the nearest single-precision value.
pub(crate) fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_label_count_and_range() {
        let imgs = Tensor::zeros(&[2, 1, 2, 2]);
        assert!(Dataset::new(imgs.clone(), vec![0, 1], 2, DatasetMeta::new("t", "train")).is_ok());
        assert!(Dataset::new(imgs.clone(), vec![0], 2, DatasetMeta::new("t", "train")).is_err());
        assert!(Dataset::new(imgs, vec![0, 2], 2, DatasetMeta::new("t", "train")).is_err());
    }
}
