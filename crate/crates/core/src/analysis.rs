//! Dataset diagnostics: perturbable volume, inter-class distance, pixel
//! histograms and Monte Carlo robust error of the Bayes linear classifier.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::pairwise_sum;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Summary {
    /// `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        Some(Summary {
            mean: pairwise_sum(values) / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            count: values.len(),
        })
    }
}

/// Per-item values with their summary and the parameters that produced
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub kind: String,
    pub values: Vec<f64>,
    pub summary: Summary,
    pub params: BTreeMap<String, f64>,
}

impl AnalysisReport {
    pub fn new(kind: &str, values: Vec<f64>, params: &[(&str, f64)]) -> Result<Self> {
        let summary = Summary::of(&values).ok_or_else(|| Error::invalid(format!("{kind}: no values")))?;
        Ok(AnalysisReport {
            kind: kind.to_string(),
            values,
            summary,
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        })
    }
}

/// `Σ log2(min(x_i + ε, 1) − max(x_i − ε, 0))`, the log-volume (in bits)
/// of the ε-box around `x` clipped to the unit cube.
pub fn log_perturbable_volume(x: &[f64], eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::invalid(format!("eps must be in (0, 1], got {eps}")));
    }
    if let Some(v) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("pixel {v} outside [0, 1]")));
    }
    let terms: Vec<f64> = x
        .iter()
        .map(|&v| ((v + eps).min(1.0) - (v - eps).max(0.0)).log2())
        .collect();
    Ok(pairwise_sum(&terms))
}

/// Log perturbable volume of every image.
pub fn volume_report(ds: &Dataset, eps: f64) -> Result<AnalysisReport> {
    let values = (0..ds.len())
        .map(|i| log_perturbable_volume(ds.images.item(i), eps))
        .collect::<Result<Vec<_>>>()?;
    AnalysisReport::new("volume", values, &[("eps", eps)])
}

fn frac_count(frac: f64, m: usize) -> usize {
    ((frac * m as f64).ceil() as usize).clamp(1, m)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean of the `k` smallest values, summed in ascending order.
fn mean_of_smallest(values: &mut [f64], k: usize) -> f64 {
    if k < values.len() {
        values.select_nth_unstable_by(k, f64::total_cmp);
    }
    let head = &mut values[..k];
    head.sort_unstable_by(f64::total_cmp);
    head.iter().sum::<f64>() / k as f64
}

/// Distance between class `c` and the rest of the dataset.
///
/// Each point of the class is scored by its mean ℓ2 distance to its
/// `⌈nn_frac·m⌉` nearest points of other classes; the class value is the
/// mean of the smallest `⌈sel_frac·m_c⌉` scores. Both counts are at least 1.
pub fn interclass_distance(ds: &Dataset, c: usize, nn_frac: f64, sel_frac: f64) -> Result<f64> {
    for (name, f) in [("nn_frac", nn_frac), ("sel_frac", sel_frac)] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::invalid(format!("{name} must be in (0, 1], got {f}")));
        }
    }
    let (inside, outside): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| ds.labels[i] == c);
    if inside.is_empty() || outside.is_empty() {
        return Err(Error::invalid(format!(
            "class {c} has {} points and its complement {}; both must be nonempty",
            inside.len(),
            outside.len()
        )));
    }
    let k = frac_count(nn_frac, outside.len());
    let mut dists = vec![0.0; outside.len()];
    let mut scores: Vec<f64> = inside
        .iter()
        .map(|&i| {
            let x = ds.images.item(i);
            for (d, &j) in dists.iter_mut().zip(&outside) {
                *d = l2(x, ds.images.item(j));
            }
            mean_of_smallest(&mut dists, k)
        })
        .collect();
    let sel = frac_count(sel_frac, scores.len());
    Ok(mean_of_smallest(&mut scores, sel))
}

/// Inter-class distance of every class present, with the unweighted mean
/// as the summary.
pub fn interclass_report(ds: &Dataset, nn_frac: f64, sel_frac: f64) -> Result<AnalysisReport> {
    let counts = ds.class_counts();
    let values = (0..ds.num_classes)
        .filter(|&c| counts[c] > 0)
        .map(|c| interclass_distance(ds, c, nn_frac, sel_frac))
        .collect::<Result<Vec<_>>>()?;
    AnalysisReport::new("interclass", values, &[("nn_frac", nn_frac), ("sel_frac", sel_frac)])
}

pub const DEFAULT_HISTOGRAM_BINS: usize = 256;

/// Counts of pixel values in `bins` equal bins over `[0, 1]`; bin `i` is
/// `[i/bins, (i+1)/bins)` except the last, which includes 1.
pub fn pixel_histogram(ds: &Dataset, bins: usize) -> Result<Vec<u64>> {
    if bins < 2 {
        return Err(Error::invalid(format!("need at least 2 bins, got {bins}")));
    }
    let mut counts = vec![0u64; bins];
    for &v in ds.images.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("pixel {v} outside [0, 1]")));
        }
        counts[((v * bins as f64) as usize).min(bins - 1)] += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hyperplane {
    /// `x_1 = 1/2`.
    E1,
    /// `Σ x_i = d/2`.
    Ones,
}

impl std::str::FromStr for Hyperplane {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e1" => Ok(Hyperplane::E1),
            "ones" => Ok(Hyperplane::Ones),
            _ => Err(Error::invalid(format!("unknown hyperplane `{s}` (expected e1 or ones)"))),
        }
    }
}

/// Monte Carlo estimate of the fraction of `Uniform[0,1]^d` within ℓ∞
/// distance `ε` of the hyperplane, i.e. the robust error of the Bayes
/// classifier it defines. Returns the estimate and its binomial standard
/// error.
pub fn mc_linear_robust_error(kind: Hyperplane, d: usize, eps: f64, n: usize, seed: u64) -> Result<(f64, f64)> {
    if n < 1000 {
        return Err(Error::invalid(format!("need at least 1000 samples, got {n}")));
    }
    if d == 0 {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("eps must be non-negative, got {eps}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..n {
        let attackable = match kind {
            Hyperplane::E1 => {
                let x1: f64 = rng.gen();
                // The remaining coordinates do not affect the margin but are
                // drawn so both kinds consume the stream the same way.
                for _ in 1..d {
                    let _: f64 = rng.gen();
                }
                (x1 - 0.5).abs() <= eps
            }
            Hyperplane::Ones => {
                let s: f64 = (0..d).map(|_| rng.gen::<f64>()).sum();
                (s - d as f64 / 2.0).abs() <= eps * d as f64
            }
        };
        hits += usize::from(attackable);
    }
    let p = hits as f64 / n as f64;
    Ok((p, (p * (1.0 - p) / n as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetMeta;
    use crate::tensor::Tensor;

    fn points(pts: &[(f64, f64)], labels: Vec<usize>) -> Dataset {
        let data = pts.iter().flat_map(|&(a, b)| [a, b]).collect();
        Dataset::new(
            Tensor::from_vec(&[pts.len(), 2], data).unwrap(),
            labels,
            2,
            DatasetMeta::new("t", "test"),
        )
        .unwrap()
    }

    #[test]
    fn volume_closed_forms() {
        let v = log_perturbable_volume(&[0.0; 784], 0.3).unwrap();
        assert!((v - 784.0 * 0.3f64.log2()).abs() < 1e-9);
        assert!((v + 1361.78).abs() < 0.005);
        let v = log_perturbable_volume(&[0.5; 784], 0.3).unwrap();
        assert!((v + 577.78).abs() < 0.005);
        assert!(log_perturbable_volume(&[0.5], 0.0).is_err());
        assert!(log_perturbable_volume(&[1.5], 0.1).is_err());
    }

    #[test]
    fn hand_computed_distance() {
        // Distances from class 0 are 5 and 10; singletons select one neighbour.
        let ds = points(&[(0.0, 0.0), (3.0, 4.0)], vec![0, 1]);
        assert_eq!(interclass_distance(&ds, 0, 0.1, 0.1).unwrap(), 5.0);
        let ds = points(&[(0.0, 0.0), (3.0, 4.0), (6.0, 8.0)], vec![0, 1, 1]);
        assert_eq!(interclass_distance(&ds, 0, 0.1, 0.1).unwrap(), 5.0);
        assert_eq!(interclass_distance(&ds, 0, 1.0, 1.0).unwrap(), 7.5);
        assert!(interclass_distance(&ds, 1, 0.0, 0.1).is_err());
        let one_class = points(&[(0.0, 0.0)], vec![0]);
        assert!(interclass_distance(&one_class, 0, 0.1, 0.1).is_err());
    }

    #[test]
    fn histogram_edges() {
        let ds = points(&[(0.0, 1.0), (0.5, 0.999)], vec![0, 1]);
        let h = pixel_histogram(&ds, 4).unwrap();
        assert_eq!(h, vec![1, 0, 1, 2]);
        assert!(pixel_histogram(&ds, 1).is_err());
    }

    #[test]
    fn e1_matches_two_eps() {
        let (p, se) = mc_linear_robust_error(Hyperplane::E1, 10, 0.1, 200_000, 3).unwrap();
        assert!((p - 0.2).abs() <= 3.0 * se);
        let (p, _) = mc_linear_robust_error(Hyperplane::E1, 10, 0.0, 10_000, 3).unwrap();
        assert_eq!(p, 0.0);
        assert!(mc_linear_robust_error(Hyperplane::E1, 10, 0.1, 999, 3).is_err());
    }

    #[test]
    fn summary_stats() {
        let s = Summary::of(&[3.0, -1.0, 4.0]).unwrap();
        assert_eq!((s.mean, s.min, s.max, s.count), (2.0, -1.0, 4.0, 3));
        assert!(Summary::of(&[]).is_none());
    }
}
