//! Semantics-preserving distribution shifts on image datasets.
//!
//! Every transform is a pure map on pixels that leaves labels untouched and
//! appends its canonical name (e.g. `saturate(p=8)`) to the dataset's
//! transform chain. Results are kept at double precision in memory.

mod canny;
mod pixel;
mod smooth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use canny::canny_plane;
pub use pixel::{binarize, gamma, saturate, scale_center};
pub use smooth::smooth_plane;

pub const DEFAULT_CANNY_LOW: f64 = 0.1;
pub const DEFAULT_CANNY_HIGH: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformSpec {
    Binarize,
    /// Average filter of size `s`, then pixelwise max with the original.
    Smooth { s: usize },
    /// Saturation level `p ≥ 1`; `f64::INFINITY` binarizes.
    Saturate { p: f64 },
    Gamma { gamma: f64 },
    /// Affine contraction towards 1/2 by `0 < α ≤ 1`.
    Scale { alpha: f64 },
    Edge { sigma: f64, t_low: f64, t_high: f64 },
}

impl TransformSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            TransformSpec::Binarize => true,
            TransformSpec::Smooth { s } => s >= 1,
            TransformSpec::Saturate { p } => p >= 1.0,
            TransformSpec::Gamma { gamma } => gamma > 0.0 && gamma.is_finite(),
            TransformSpec::Scale { alpha } => alpha > 0.0 && alpha <= 1.0,
            TransformSpec::Edge {
                sigma,
                t_low,
                t_high,
            } => sigma > 0.0 && sigma.is_finite() && 0.0 <= t_low && t_low < t_high,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid transform parameters: {self}")))
        }
    }

    /// The same transform with its main parameter replaced by `v` (the
    /// size for smoothing, `σ` for edges). Binarization has no parameter.
    pub fn with_param(&self, v: f64) -> Result<Self> {
        let spec = match *self {
            TransformSpec::Binarize => {
                return Err(Error::invalid("binarize has no parameter to sweep"));
            }
            TransformSpec::Smooth { .. } => {
                if v.fract() != 0.0 || v < 1.0 {
                    return Err(Error::invalid(format!("smoothing size must be a positive integer, got {v}")));
                }
                TransformSpec::Smooth { s: v as usize }
            }
            TransformSpec::Saturate { .. } => TransformSpec::Saturate { p: v },
            TransformSpec::Gamma { .. } => TransformSpec::Gamma { gamma: v },
            TransformSpec::Scale { .. } => TransformSpec::Scale { alpha: v },
            TransformSpec::Edge { t_low, t_high, .. } => TransformSpec::Edge {
                sigma: v,
                t_low,
                t_high,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Applies the transform to an image tensor `[n, channels, height, width]`
    /// (pointwise transforms accept any shape).
    pub fn apply_images(&self, images: &Tensor) -> Result<Tensor> {
        self.validate()?;
        match *self {
            TransformSpec::Binarize => Ok(images.map(binarize)),
            TransformSpec::Saturate { p } => Ok(images.map(|x| saturate(x, p))),
            TransformSpec::Gamma { gamma: g } => Ok(images.map(|x| gamma(x, g))),
            TransformSpec::Scale { alpha } => Ok(images.map(|x| scale_center(x, alpha))),
            TransformSpec::Smooth { s } => {
                let &[_, _, h, w] = images.shape() else {
                    return Err(Error::Shape(format!(
                        "smoothing needs [n, c, h, w] images, got {:?}",
                        images.shape()
                    )));
                };
                if s > h.min(w) {
                    return Err(Error::invalid(format!(
                        "kernel size {s} exceeds image side {}",
                        h.min(w)
                    )));
                }
                map_planes(images, h, w, |p| smooth_plane(p, h, w, s))
            }
            TransformSpec::Edge {
                sigma,
                t_low,
                t_high,
            } => {
                let &[_, c, h, w] = images.shape() else {
                    return Err(Error::Shape(format!(
                        "edge detection needs [n, 1, h, w] images, got {:?}",
                        images.shape()
                    )));
                };
                if c != 1 {
                    return Err(Error::Shape(format!(
                        "edge detection needs single-channel images, got {c} channels"
                    )));
                }
                map_planes(images, h, w, |p| canny_plane(p, h, w, sigma, t_low, t_high))
            }
        }
    }
}

fn map_planes(images: &Tensor, h: usize, w: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Tensor> {
    let mut out = Vec::with_capacity(images.len());
    for plane in images.data().chunks_exact(h * w) {
        out.extend(f(plane));
    }
    Tensor::from_vec(images.shape(), out)
}

/// Transforms every image, keeps the labels and extends the chain.
pub fn apply(ds: &Dataset, spec: &TransformSpec) -> Result<Dataset> {
    let images = spec.apply_images(&ds.images)?;
    let mut meta = ds.meta.clone();
    meta.transforms.push(spec.to_string());
    Dataset::new(images, ds.labels.clone(), ds.num_classes, meta)
}

fn fmt_real(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TransformSpec::Binarize => write!(f, "binarize"),
            TransformSpec::Smooth { s } => write!(f, "smooth(s={s})"),
            TransformSpec::Saturate { p } => write!(f, "saturate(p={})", fmt_real(p)),
            TransformSpec::Gamma { gamma } => write!(f, "gamma(g={gamma})"),
            TransformSpec::Scale { alpha } => write!(f, "scale(a={alpha})"),
            TransformSpec::Edge {
                sigma,
                t_low,
                t_high,
            } => write!(f, "edge(sigma={sigma},lo={t_low},hi={t_high})"),
        }
    }
}

impl FromStr for TransformSpec {
    type Err = Error;

    /// Parses `name` or `name(key=value,...)`. A bare value is accepted for
    /// single-parameter transforms, e.g. `smooth(3)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(i) if s.ends_with(')') => (&s[..i], &s[i + 1..s.len() - 1]),
            Some(_) => return Err(Error::invalid(format!("unbalanced parentheses in `{s}`"))),
            None => (s, ""),
        };
        let mut kv = Vec::new();
        for part in args.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').unwrap_or(("", part));
            let v = v.trim();
            let val = match v {
                "inf" | "∞" => f64::INFINITY,
                _ => v
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad number `{v}` in `{s}`")))?,
            };
            kv.push((k.trim().to_string(), val));
        }
        let get = |keys: &[&str], default: Option<f64>| -> Result<f64> {
            kv.iter()
                .find(|(k, _)| keys.contains(&k.as_str()) || (k.is_empty() && kv.len() == 1))
                .map(|(_, v)| *v)
                .or(default)
                .ok_or_else(|| Error::invalid(format!("missing parameter {} in `{s}`", keys[0])))
        };
        let spec = match name.trim() {
            "binarize" => TransformSpec::Binarize,
            "smooth" => {
                let v = get(&["s", "size"], None)?;
                if v.fract() != 0.0 || v < 1.0 {
                    return Err(Error::invalid(format!("smoothing size must be a positive integer, got {v}")));
                }
                TransformSpec::Smooth { s: v as usize }
            }
            "saturate" => TransformSpec::Saturate {
                p: get(&["p"], None)?,
            },
            "gamma" => TransformSpec::Gamma {
                gamma: get(&["g", "gamma"], None)?,
            },
            "scale" => TransformSpec::Scale {
                alpha: get(&["a", "alpha"], None)?,
            },
            "edge" => {
                let sigma = kv
                    .iter()
                    .find(|(k, _)| k == "sigma" || k.is_empty())
                    .map_or(1.0, |(_, v)| *v);
                let t_low = kv.iter().find(|(k, _)| k == "lo").map_or(DEFAULT_CANNY_LOW, |(_, v)| *v);
                let t_high = kv
                    .iter()
                    .find(|(k, _)| k == "hi")
                    .map_or(DEFAULT_CANNY_HIGH, |(_, v)| *v);
                TransformSpec::Edge {
                    sigma,
                    t_low,
                    t_high,
                }
            }
            other => return Err(Error::invalid(format!("unknown transform `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl Serialize for TransformSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TransformSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Re-applies the transform entries of a chain to `ds`. Entries that are
/// not transforms (such as subset draws) are skipped.
pub fn replay(ds: &Dataset, chain: &[String]) -> Result<Dataset> {
    let mut out = ds.clone();
    for entry in chain {
        if let Ok(spec) = entry.parse::<TransformSpec>() {
            out = apply(&out, &spec)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetMeta;

    fn ds(images: Tensor) -> Dataset {
        let n = images.batch();
        Dataset::new(images, (0..n).map(|i| i % 2).collect(), 2, DatasetMeta::new("t", "test")).unwrap()
    }

    #[test]
    fn names_round_trip() {
        for s in [
            "binarize",
            "smooth(s=3)",
            "saturate(p=8)",
            "saturate(p=inf)",
            "gamma(g=1.4)",
            "scale(a=0.821)",
            "edge(sigma=1,lo=0.1,hi=0.2)",
        ] {
            let spec: TransformSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert_eq!("smooth(5)".parse::<TransformSpec>().unwrap(), TransformSpec::Smooth { s: 5 });
        assert!("saturate(p=0.5)".parse::<TransformSpec>().is_err());
        assert!("scale(a=1.5)".parse::<TransformSpec>().is_err());
        assert!("blur(3)".parse::<TransformSpec>().is_err());
    }

    #[test]
    fn apply_records_chain_and_keeps_labels() {
        let d = ds(Tensor::from_vec(&[2, 1, 3, 3], (0..18).map(|i| i as f64 / 17.0).collect()).unwrap());
        let out = apply(&d, &TransformSpec::Smooth { s: 3 }).unwrap();
        assert_eq!(out.meta.transforms, vec!["smooth(s=3)"]);
        assert_eq!(out.labels, d.labels);
        assert!(out.images.data().iter().zip(d.images.data()).all(|(a, b)| a >= b));
    }

    #[test]
    fn edge_rejects_colour_images() {
        let d = ds(Tensor::zeros(&[1, 3, 8, 8]));
        let spec = TransformSpec::Edge {
            sigma: 1.0,
            t_low: 0.1,
            t_high: 0.2,
        };
        assert!(matches!(apply(&d, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn smooth_rejects_oversized_kernel() {
        let d = ds(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(apply(&d, &TransformSpec::Smooth { s: 5 }).is_err());
    }

    #[test]
    fn replay_reproduces_the_chain() {
        let d = ds(Tensor::from_vec(&[2, 1, 4, 4], (0..32).map(|i| (i % 9) as f64 / 8.0).collect()).unwrap());
        let a = apply(&apply(&d, &TransformSpec::Smooth { s: 2 }).unwrap(), &TransformSpec::Saturate { p: 8.0 }).unwrap();
        let b = replay(&d, &a.meta.transforms).unwrap();
        assert_eq!(a, b);
    }
}
