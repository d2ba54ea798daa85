//! One train-and-evaluate run on a dataset variant, and sweeps over model
//! width, training-set size or transform strength.

use serde::{Deserialize, Serialize};

use crate::attack::{evaluate_with, AttackConfig, EvalReport};
use crate::data::{subset, Dataset};
use crate::error::{Error, Result};
use crate::nn::{encode_model, Arch, Model};
use crate::seed::derive_seed;
use crate::train::{train, HistoryRow, TrainConfig};
use crate::transforms::{apply, TransformSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Arch,
    #[serde(default = "one")]
    pub widen: f64,
    #[serde(default)]
    pub standardize: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub model: ModelSpec,
    #[serde(default)]
    pub transforms: Vec<TransformSpec>,
    /// Size of the training subset; the full set when absent.
    #[serde(default)]
    pub train_size: Option<usize>,
    #[serde(default = "yes")]
    pub stratified: bool,
    /// Size of the (stratified) test subset used for evaluation.
    #[serde(default)]
    pub test_size: Option<usize>,
    pub train: TrainConfig,
    /// Attack used to measure robustness; none reports clean accuracy only.
    #[serde(default)]
    pub eval_attack: Option<AttackConfig>,
    /// Also evaluate on the training subset.
    #[serde(default)]
    pub eval_train: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub model: Model,
    pub history: Vec<HistoryRow>,
    pub test: EvalReport,
    pub train: Option<EvalReport>,
    /// SHA-256 of the serialized model.
    pub model_hash: String,
}

/// Prepares the variant datasets for `exp`: transforms, then subsets drawn
/// with seeds derived from the run seed.
pub fn prepare(exp: &Experiment, train_base: &Dataset, test_base: &Dataset) -> Result<(Dataset, Dataset)> {
    let mut tr = train_base.clone();
    let mut te = test_base.clone();
    for t in &exp.transforms {
        tr = apply(&tr, t)?;
        te = apply(&te, t)?;
    }
    if let Some(n) = exp.train_size {
        tr = subset(&tr, n, exp.stratified, derive_seed(exp.seed, "subset-train"))?;
    }
    if let Some(n) = exp.test_size {
        te = subset(&te, n, true, derive_seed(exp.seed, "subset-test"))?;
    }
    Ok((tr, te))
}

/// Builds, trains and evaluates one model. Seeds for initialization,
/// training and evaluation are all derived from `exp.seed`.
pub fn run_experiment(exp: &Experiment, train_base: &Dataset, test_base: &Dataset) -> Result<Outcome> {
    let (tr, te) = prepare(exp, train_base, test_base)?;
    let num_classes = tr.num_classes.max(te.num_classes);
    let model = Model::build(
        exp.model.arch,
        exp.model.widen,
        num_classes,
        tr.item_shape(),
        derive_seed(exp.seed, "init"),
    )?
    .with_standardization(exp.model.standardize);
    let cfg = TrainConfig {
        seed: derive_seed(exp.seed, "train"),
        ..exp.train.clone()
    };
    let (model, history) = train(model, &tr, &cfg, None)?;
    let attack = exp.eval_attack.as_ref().map(|a| AttackConfig {
        seed: derive_seed(exp.seed, "eval"),
        ..a.clone()
    });
    let test = evaluate_with(&model, &te, attack.as_ref(), true)?;
    let train = if exp.eval_train {
        Some(evaluate_with(&model, &tr, attack.as_ref(), false)?)
    } else {
        None
    };
    let model_hash = crate::data::sha256_hex(&encode_model(&model));
    Ok(Outcome {
        model,
        history,
        test,
        train,
        model_hash,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Widen,
    TrainSize,
    /// The parameter of the last transform in the chain.
    TransformParam,
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::Widen => "widen",
            SweepAxis::TrainSize => "train-size",
            SweepAxis::TransformParam => "transform-param",
        })
    }
}

/// One cell of the long-form sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub split: String,
    pub metric: String,
    pub accuracy: f64,
    pub model_hash: String,
}

/// The experiment `base` with the swept quantity set to `value`.
pub fn sweep_point(base: &Experiment, axis: SweepAxis, value: f64) -> Result<Experiment> {
    let mut exp = base.clone();
    match axis {
        SweepAxis::Widen => exp.model.widen = value,
        SweepAxis::TrainSize => {
            if value.fract() != 0.0 || value < 1.0 {
                return Err(Error::invalid(format!("train size must be a positive integer, got {value}")));
            }
            exp.train_size = Some(value as usize);
        }
        SweepAxis::TransformParam => {
            let last = exp
                .transforms
                .last_mut()
                .ok_or_else(|| Error::invalid("transform-param sweep needs at least one transform"))?;
            *last = last.with_param(value)?;
        }
    }
    Ok(exp)
}

/// Runs `base` once per value and returns rows for train/test × clean/robust
/// (train rows only when `eval_train` is set, robust rows only with an
/// evaluation attack).
pub fn sweep(axis: SweepAxis, values: &[f64], base: &Experiment, train_base: &Dataset, test_base: &Dataset) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    let mut rows = Vec::new();
    for &value in values {
        let exp = sweep_point(base, axis, value)?;
        let out = run_experiment(&exp, train_base, test_base)?;
        let mut push = |split: &str, metric: &str, acc: Option<f64>| {
            if let Some(accuracy) = acc {
                rows.push(SweepRow {
                    axis,
                    value,
                    split: split.into(),
                    metric: metric.into(),
                    accuracy,
                    model_hash: out.model_hash.clone(),
                });
            }
        };
        if let Some(tr) = &out.train {
            push("train", "clean", Some(tr.clean_acc));
            push("train", "robust", tr.robust_acc);
        }
        push("test", "clean", Some(out.test.clean_acc));
        push("test", "robust", out.test.robust_acc);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticKind, SyntheticSpec};
    use crate::train::LrSchedule;

    fn cube(seed: u64) -> Dataset {
        gen_synthetic(&SyntheticSpec {
            kind: SyntheticKind::CubeHyperplaneE1,
            d: 5,
            n: 200,
            seed,
        })
        .unwrap()
    }

    fn base() -> Experiment {
        Experiment {
            model: ModelSpec {
                arch: Arch::Linear,
                widen: 1.0,
                standardize: false,
            },
            transforms: vec![],
            train_size: None,
            stratified: true,
            test_size: None,
            train: TrainConfig {
                lr: LrSchedule::constant(0.05),
                total_steps: 50,
                batch_size: 20,
                ..TrainConfig::desk_default()
            },
            eval_attack: Some(AttackConfig {
                eps: 0.05,
                ..AttackConfig::mnist()
            }),
            eval_train: true,
            seed: 4,
        }
    }

    #[test]
    fn train_size_sweep_emits_long_form_rows() {
        let rows = sweep(SweepAxis::TrainSize, &[50.0, 100.0], &base(), &cube(1), &cube(2)).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
        assert_eq!(rows[0].split, "train");
        assert_eq!(rows[3].metric, "robust");
    }

    #[test]
    fn empty_sweep_and_bad_points_fail() {
        assert!(sweep(SweepAxis::Widen, &[], &base(), &cube(1), &cube(2)).is_err());
        assert!(sweep_point(&base(), SweepAxis::TransformParam, 3.0).is_err());
        assert!(sweep_point(&base(), SweepAxis::TrainSize, 2.5).is_err());
        let mut b = base();
        b.transforms.push(TransformSpec::Saturate { p: 2.0 });
        let p = sweep_point(&b, SweepAxis::TransformParam, 8.0).unwrap();
        assert_eq!(p.transforms, vec![TransformSpec::Saturate { p: 8.0 }]);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let a = run_experiment(&base(), &cube(1), &cube(2)).unwrap();
        let b = run_experiment(&base(), &cube(1), &cube(2)).unwrap();
        assert_eq!(a.model_hash, b.model_hash);
        assert_eq!(a.test, b.test);
    }
}
