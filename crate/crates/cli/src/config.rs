//! Experiment configuration files (TOML, conventionally `*.cfg`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use robustshift::analysis::Hyperplane;
use robustshift::attack::AttackConfig;
use robustshift::bounds::Domain;
use robustshift::data::{SyntheticKind, SyntheticSpec};
use robustshift::experiment::{ModelSpec, SweepAxis};
use robustshift::seed::derive_seed;
use robustshift::train::TrainConfig;
use robustshift::transforms::TransformSpec;

use crate::error::{CliError, Result, StageContext};

/// Version of the configuration schema understood by this build.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Where results go; defaults to `runs/<name>`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Attack used for evaluation (and for adversarial training when the
    /// training section has none).
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default = "default_modes")]
    pub modes: Vec<Mode>,
    /// Also evaluate adversarially trained models with an attack that
    /// ignores the `[0, 1]` pixel domain.
    #[serde(default)]
    pub clip_ablation: bool,
    #[serde(default)]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub analysis: Vec<AnalysisRequest>,
    #[serde(default)]
    pub bounds: Vec<BoundsRequest>,
}

fn default_modes() -> Vec<Mode> {
    vec![Mode::Standard, Mode::Adversarial]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Standard,
    Adversarial,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Standard => "standard",
            Mode::Adversarial => "adversarial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Directory (under the data directory unless it exists as given)
    /// holding IDX or CIFAR-10 binary files, or `synthetic`.
    pub source: String,
    #[serde(default)]
    pub synthetic: Option<SyntheticData>,
    #[serde(default)]
    pub train_size: Option<usize>,
    #[serde(default)]
    pub test_size: Option<usize>,
    #[serde(default = "yes")]
    pub stratified: bool,
}

fn yes() -> bool {
    true
}

/// Generated train/test draws; each split gets its own derived seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub kind: SyntheticName,
    pub d: usize,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default)]
    pub r_inner: Option<f64>,
    #[serde(default)]
    pub r_outer: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticName {
    CubeHyperplaneE1,
    CubeHyperplaneOnes,
    Spheres,
}

impl SyntheticData {
    pub fn spec(&self, split: Split, seed: u64) -> Result<SyntheticSpec> {
        let kind = match (self.kind, self.r_inner, self.r_outer) {
            (SyntheticName::CubeHyperplaneE1, None, None) => SyntheticKind::CubeHyperplaneE1,
            (SyntheticName::CubeHyperplaneOnes, None, None) => SyntheticKind::CubeHyperplaneOnes,
            (SyntheticName::Spheres, Some(r_inner), Some(r_outer)) => SyntheticKind::Spheres { r_inner, r_outer },
            (SyntheticName::Spheres, ..) => {
                return Err(CliError::validation(
                    "config field `dataset.synthetic.r_inner`: spheres need r_inner and r_outer",
                ))
            }
            _ => {
                return Err(CliError::validation(
                    "config field `dataset.synthetic.r_inner`: radii only apply to spheres",
                ))
            }
        };
        let n = match split {
            Split::Train => self.n_train,
            Split::Test => self.n_test,
        };
        let spec = SyntheticSpec {
            kind,
            d: self.d,
            n,
            seed: derive_seed(seed, &format!("synthetic-{}", split.as_str())),
        };
        spec.validate().invalid("config field `dataset.synthetic`")?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub transforms: Vec<TransformSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Variant to sweep; the first one by default.
    #[serde(default)]
    pub variant: Option<String>,
    #[serde(default = "adversarial")]
    pub mode: Mode,
}

fn adversarial() -> Mode {
    Mode::Adversarial
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn test_split() -> Split {
    Split::Test
}

fn tenth() -> f64 {
    0.1
}

fn bins() -> usize {
    robustshift::analysis::DEFAULT_HISTOGRAM_BINS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AnalysisRequest {
    Volume {
        eps: f64,
        #[serde(default = "test_split")]
        split: Split,
    },
    Interclass {
        #[serde(default = "tenth")]
        nn_frac: f64,
        #[serde(default = "tenth")]
        sel_frac: f64,
        #[serde(default = "test_split")]
        split: Split,
    },
    Histogram {
        #[serde(default = "bins")]
        bins: usize,
        #[serde(default = "test_split")]
        split: Split,
    },
    McLinear {
        hyperplane: Hyperplane,
        d: usize,
        eps: f64,
        n: usize,
    },
}

impl AnalysisRequest {
    pub fn kind(&self) -> &'static str {
        match self {
            AnalysisRequest::Volume { .. } => "volume",
            AnalysisRequest::Interclass { .. } => "interclass",
            AnalysisRequest::Histogram { .. } => "histogram",
            AnalysisRequest::McLinear { .. } => "mc-linear",
        }
    }

    pub fn needs_data(&self) -> bool {
        !matches!(self, AnalysisRequest::McLinear { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BoundsRequest {
    Cube {
        p: f64,
        eps: f64,
    },
    Ball {
        p: f64,
        eps: f64,
        d: usize,
    },
    Vuln {
        k: usize,
        eps: f64,
        domain: Domain,
        #[serde(default)]
        d: Option<usize>,
    },
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::validation(format!("config: {}", e.to_string().trim_end())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Variants to run; a config without any gets the untransformed data.
    pub fn variants(&self) -> Vec<Variant> {
        if self.variants.is_empty() {
            vec![Variant {
                name: "original".into(),
                transforms: Vec::new(),
            }]
        } else {
            self.variants.clone()
        }
    }

    /// Whether any stage trains models.
    pub fn trains(&self) -> bool {
        self.train.is_some()
    }

    pub fn needs_data(&self) -> bool {
        self.trains() || self.analysis.iter().any(AnalysisRequest::needs_data)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    /// Checks cross-field requirements; every error names the offending
    /// section and field.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(CliError::validation(format!("config field `{field}`: {msg}")));
        if self.schema != SCHEMA_VERSION {
            return bad(
                "schema",
                &format!("unsupported version {} (this build reads {SCHEMA_VERSION})", self.schema),
            );
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("name", "must be a non-empty plain name");
        }
        if self.needs_data() && self.dataset.is_none() {
            return bad("dataset", "required by the training and dataset-analysis stages");
        }
        if let Some(ds) = &self.dataset {
            if ds.source == "synthetic" {
                match &ds.synthetic {
                    None => return bad("dataset.synthetic", "required when source = \"synthetic\""),
                    Some(s) => {
                        s.spec(Split::Train, self.seed)?;
                        s.spec(Split::Test, self.seed)?;
                    }
                }
            } else if ds.synthetic.is_some() {
                return bad("dataset.synthetic", "only allowed when source = \"synthetic\"");
            }
            if ds.train_size == Some(0) || ds.test_size == Some(0) {
                return bad("dataset.train_size", "subset sizes must be at least 1");
            }
        }
        if let Some(train) = &self.train {
            if self.model.is_none() {
                return bad("model", "required when a [train] section is present");
            }
            train.validate().invalid("config field `train`")?;
            if self.modes.is_empty() {
                return bad("modes", "must list at least one of \"standard\", \"adversarial\"");
            }
            if self.modes.contains(&Mode::Adversarial) && train.attack.is_none() && self.attack.is_none() {
                return bad("attack", "adversarial mode needs [attack] or [train.attack]");
            }
        }
        if let Some(m) = &self.model {
            if !(m.widen > 0.0 && m.widen.is_finite()) {
                return bad("model.widen", "must be positive");
            }
        }
        if let Some(a) = &self.attack {
            a.validate().invalid("config field `attack`")?;
        }
        if self.clip_ablation && self.attack.is_none() {
            return bad("clip_ablation", "needs an [attack] section");
        }
        let mut names = std::collections::BTreeSet::new();
        for v in &self.variants {
            if !names.insert(v.name.as_str()) {
                return bad("variants.name", &format!("duplicate variant `{}`", v.name));
            }
            if v.name.is_empty() || v.name.contains(['/', '\\']) {
                return bad("variants.name", "must be a non-empty plain name");
            }
        }
        if let Some(s) = &self.sweep {
            if !self.trains() {
                return bad("sweep", "needs [model] and [train] sections");
            }
            if s.values.is_empty() {
                return bad("sweep.values", "must not be empty");
            }
            if let Some(v) = &s.variant {
                if !self.variants().iter().any(|x| &x.name == v) {
                    return bad("sweep.variant", &format!("unknown variant `{v}`"));
                }
            }
        }
        for a in &self.analysis {
            let ok = match *a {
                AnalysisRequest::Volume { eps, .. } => eps > 0.0 && eps <= 1.0,
                AnalysisRequest::Interclass { nn_frac, sel_frac, .. } => {
                    nn_frac > 0.0 && nn_frac <= 1.0 && sel_frac > 0.0 && sel_frac <= 1.0
                }
                AnalysisRequest::Histogram { bins, .. } => bins >= 2,
                AnalysisRequest::McLinear { d, eps, n, .. } => d >= 1 && eps >= 0.0 && n >= 1000,
            };
            if !ok {
                return bad("analysis", &format!("invalid parameters for `{}`", a.kind()));
            }
        }
        for b in &self.bounds {
            if let BoundsRequest::Vuln {
                domain: Domain::Ball,
                d: None,
                ..
            } = b
            {
                return bad("bounds.d", "the ball domain needs a dimension");
            }
            crate::runner::bounds_record(b).invalid("config field `bounds`")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema = 1
name = "demo"

[[bounds]]
kind = "vuln"
k = 10
eps = 0.5
domain = "cube"
"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.bounds.len(), 1);
        assert!(!cfg.needs_data());
        assert_eq!(cfg.output_dir(), PathBuf::from("runs/demo"));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml(&format!("{MINIMAL}\nlearning_rate = 3\n")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn schema_version_is_checked() {
        let err = ExperimentConfig::from_toml(&MINIMAL.replace("schema = 1", "schema = 7")).unwrap_err();
        assert!(err.to_string().contains("schema"));
    }

    #[test]
    fn ball_bound_needs_dimension() {
        let text = MINIMAL.replace("\"cube\"", "\"ball\"");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("bounds.d"), "{err}");
    }

    #[test]
    fn training_needs_model_and_data() {
        let text = format!(
            "{MINIMAL}\n[train]\noptimizer = \"adam\"\nlr = [[0, 0.001]]\nbatch_size = 10\ntotal_steps = 5\n"
        );
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("dataset"), "{err}");
    }

    #[test]
    fn transforms_parse_from_strings() {
        let text = format!("{MINIMAL}\n[[variants]]\nname = \"s3\"\ntransforms = [\"smooth(s=3)\", \"saturate(p=inf)\"]\n");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(
            cfg.variants[0].transforms,
            vec![TransformSpec::Smooth { s: 3 }, TransformSpec::Saturate { p: f64::INFINITY }]
        );
        let bad = text.replace("smooth(s=3)", "smooth(s=0)");
        assert_eq!(ExperimentConfig::from_toml(&bad).unwrap_err().exit_code(), 2);
    }
}
