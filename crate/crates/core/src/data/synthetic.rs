//! Synthetic binary problems with known geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{f32_round, Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SyntheticKind {
    /// Uniform on the unit cube, label `x₁ > 1/2`.
    CubeHyperplaneE1,
    /// Uniform on the unit cube, label `Σxᵢ > d/2`.
    CubeHyperplaneOnes,
    /// Uniform on two concentric spheres; label 0 inner, 1 outer.
    Spheres { r_inner: f64, r_outer: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(flatten)]
    pub kind: SyntheticKind,
    pub d: usize,
    pub n: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::invalid("dimension must be at least 1"));
        }
        if self.n == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        if let SyntheticKind::Spheres { r_inner, r_outer } = self.kind {
            if !(r_inner > 0.0 && r_inner < r_outer && r_outer.is_finite()) {
                return Err(Error::invalid(format!(
                    "need 0 < r_inner < r_outer, got {r_inner}, {r_outer}"
                )));
            }
        }
        Ok(())
    }

    fn name(&self) -> String {
        match self.kind {
            SyntheticKind::CubeHyperplaneE1 => format!("cube-hyperplane-e1(d={})", self.d),
            SyntheticKind::CubeHyperplaneOnes => format!("cube-hyperplane-ones(d={})", self.d),
            SyntheticKind::Spheres { r_inner, r_outer } => {
                format!("spheres(d={},r={r_inner}/{r_outer})", self.d)
            }
        }
    }
}

/// Draws `spec.n` points. Images have shape `[n, d]`.
///
/// Cube points are stored at single precision and labeled from the stored
/// values. Sphere points keep full double precision so every norm equals its
/// radius; half the points (rounded down) are on the inner sphere.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d;
    let mut data = Vec::with_capacity(spec.n * d);
    let mut labels = Vec::with_capacity(spec.n);
    match spec.kind {
        SyntheticKind::CubeHyperplaneE1 | SyntheticKind::CubeHyperplaneOnes => {
            for _ in 0..spec.n {
                let start = data.len();
                data.extend((0..d).map(|_| f32_round(rng.gen::<f64>())));
                let x = &data[start..];
                let positive = match spec.kind {
                    SyntheticKind::CubeHyperplaneE1 => x[0] > 0.5,
                    _ => x.iter().sum::<f64>() > d as f64 / 2.0,
                };
                labels.push(usize::from(positive));
            }
        }
        SyntheticKind::Spheres { r_inner, r_outer } => {
            let n_inner = spec.n / 2;
            let mut order: Vec<usize> = (0..spec.n).map(|i| usize::from(i >= n_inner)).collect();
            // Interleave the classes so prefixes are balanced.
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            for label in order {
                let r = if label == 0 { r_inner } else { r_outer };
                let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                data.extend(g.iter().map(|v| v / norm * r));
                labels.push(label);
            }
        }
    }
    let images = Tensor::from_vec(&[spec.n, d], data)?;
    let mut meta = DatasetMeta::new(spec.name(), "generated");
    meta.seed = spec.seed;
    Dataset::new(images, labels, 2, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn e1_labels_are_balanced_within_three_sigma() {
        let ds = gen_synthetic(&SyntheticSpec {
            kind: SyntheticKind::CubeHyperplaneE1,
            d: 10,
            n: 1000,
            seed: 11,
        })
        .unwrap();
        let pos = ds.labels.iter().filter(|&&l| l == 1).count() as f64 / 1000.0;
        let sigma = (0.25f64 / 1000.0).sqrt();
        assert!((pos - 0.5).abs() <= 3.0 * sigma, "{pos}");
        assert!(ds.in_unit_range());
    }

    #[test]
    fn ones_labels_follow_the_halfspace() {
        let ds = gen_synthetic(&SyntheticSpec {
            kind: SyntheticKind::CubeHyperplaneOnes,
            d: 100,
            n: 500,
            seed: 3,
        })
        .unwrap();
        for i in 0..ds.len() {
            let s: f64 = ds.images.item(i).iter().sum();
            assert_eq!(ds.labels[i], usize::from(s > 50.0));
        }
    }

    #[test]
    fn sphere_points_lie_on_their_radius() {
        let ds = gen_synthetic(&SyntheticSpec {
            kind: SyntheticKind::Spheres {
                r_inner: 1.0,
                r_outer: 1.3,
            },
            d: 500,
            n: 200,
            seed: 5,
        })
        .unwrap();
        assert_eq!(ds.class_counts(), vec![100, 100]);
        for i in 0..ds.len() {
            let norm = ds.images.item(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let r = if ds.labels[i] == 0 { 1.0 } else { 1.3 };
            assert!((norm - r).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = SyntheticSpec {
            kind: SyntheticKind::Spheres {
                r_inner: 1.3,
                r_outer: 1.0,
            },
            d: 5,
            n: 10,
            seed: 0,
        };
        assert!(gen_synthetic(&bad).is_err());
        let zero_d = SyntheticSpec {
            kind: SyntheticKind::CubeHyperplaneE1,
            d: 0,
            n: 10,
            seed: 0,
        };
        assert!(gen_synthetic(&zero_d).is_err());
    }

    #[test]
    fn generation_is_a_pure_function_of_the_seed() {
        let spec = SyntheticSpec {
            kind: SyntheticKind::CubeHyperplaneE1,
            d: 7,
            n: 50,
            seed: 42,
        };
        assert_eq!(gen_synthetic(&spec).unwrap(), gen_synthetic(&spec).unwrap());
    }
}
