//! ℓ∞ projected gradient descent and robustness evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Model, Wrt};
use crate::tensor::Tensor;

/// Slack allowed on the ℓ∞ budget check.
pub const BUDGET_TOLERANCE: f64 = 1e-6;

/// What the attack pushes away from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    VsLabel,
    VsPrediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// ℓ∞ budget in pixel units.
    pub eps: f64,
    /// Step size.
    pub alpha: f64,
    pub iters: usize,
    #[serde(default = "yes")]
    pub random_start: bool,
    /// Keep adversarial pixels inside `[0, 1]`.
    #[serde(default = "yes")]
    pub clip_domain: bool,
    #[serde(default = "vs_label")]
    pub mode: TargetMode,
    /// Random restarts per evaluated point; a point counts as robust only
    /// if every restart fails.
    #[serde(default = "one")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

fn vs_label() -> TargetMode {
    TargetMode::VsLabel
}

impl AttackConfig {
    /// ε = 0.3, step 0.01, 40 iterations.
    pub fn mnist() -> Self {
        AttackConfig {
            eps: 0.3,
            alpha: 0.01,
            iters: 40,
            random_start: true,
            clip_domain: true,
            mode: TargetMode::VsLabel,
            restarts: 1,
            seed: 0,
        }
    }

    /// ε = 8/255, step 2/255, 10 iterations.
    pub fn cifar() -> Self {
        AttackConfig {
            eps: 8.0 / 255.0,
            alpha: 2.0 / 255.0,
            iters: 10,
            ..Self::mnist()
        }
    }

    /// `eps` may be zero (the identity attack); everything else must be
    /// positive.
    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid(format!("eps must be non-negative, got {}", self.eps)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.iters == 0 {
            return Err(Error::invalid("iters must be at least 1"));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("restarts must be at least 1"));
        }
        Ok(())
    }
}

/// Runs PGD from `x` and returns the adversarial batch. The attack pushes
/// away from `labels`, or in [`TargetMode::VsPrediction`] from the model's
/// own predictions on `x` (`labels` is then only checked for length).
///
/// Each iteration takes a signed-gradient ascent step on the cross-entropy,
/// clamps the perturbation to the ℓ∞ ball and then, if enabled, clamps the
/// image to `[0, 1]`. Coordinates with an exactly zero gradient do not move.
pub fn pgd(model: &Model, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    let predicted;
    let targets = match cfg.mode {
        TargetMode::VsLabel => labels,
        TargetMode::VsPrediction => {
            predicted = model.predict(x)?;
            &predicted[..]
        }
    };
    if labels.len() != x.batch() {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            x.batch()
        )));
    }
    if let Some(&label) = targets.iter().find(|&&t| t >= model.num_classes) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: model.num_classes,
        });
    }
    let eps = cfg.eps;
    let mut adv = x.clone();
    if eps == 0.0 {
        return Ok(adv);
    }
    let project = |adv: &mut Tensor| {
        for (a, &o) in adv.data_mut().iter_mut().zip(x.data()) {
            let mut v = a.clamp(o - eps, o + eps);
            if cfg.clip_domain {
                v = v.clamp(0.0, 1.0);
            }
            *a = v;
        }
    };
    if cfg.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for a in adv.data_mut() {
            *a += rng.gen_range(-eps..=eps);
        }
        project(&mut adv);
    }
    for _ in 0..cfg.iters {
        let (_, grads) = model.loss_and_grads(&adv, targets, Wrt::Input)?;
        let g = grads.input.expect("input gradient requested");
        for (a, &gv) in adv.data_mut().iter_mut().zip(g.data()) {
            if gv > 0.0 {
                *a += cfg.alpha;
            } else if gv < 0.0 {
                *a -= cfg.alpha;
            }
        }
        project(&mut adv);
    }
    debug_assert!(within_budget(x, &adv, cfg));
    Ok(adv)
}

/// Whether `adv` satisfies the ℓ∞ budget (and the domain, when clipping).
pub fn within_budget(x: &Tensor, adv: &Tensor, cfg: &AttackConfig) -> bool {
    x.data().iter().zip(adv.data()).all(|(&o, &a)| {
        (a - o).abs() <= cfg.eps + BUDGET_TOLERANCE && (!cfg.clip_domain || (0.0..=1.0).contains(&a))
    })
}

/// Worst-case ℓ∞ attack on the binary linear classifier `sign(w·x − b)`.
///
/// Returns `x − ε·y·sign(w)` and whether the point ends up on the wrong
/// side (or on the boundary), i.e. `y·(w·x − b) ≤ ε‖w‖₁`.
pub fn linear_optimal_attack(w: &[f64], b: f64, x: &[f64], y: i8, eps: f64) -> (Vec<f64>, bool) {
    let y = f64::from(y.signum());
    let adv = x
        .iter()
        .zip(w)
        .map(|(&xi, &wi)| xi - eps * y * sign(wi))
        .collect();
    let margin = y * (dot(w, x) - b);
    let l1: f64 = w.iter().map(|v| v.abs()).sum();
    (adv, margin <= eps * l1)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Accuracy figures for one model on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub clean_acc: f64,
    /// Fraction classified correctly both before and after an attack aimed
    /// at the true label.
    pub robust_acc: Option<f64>,
    /// Fraction whose prediction survives an attack aimed at the model's
    /// own clean prediction.
    pub robust_wrt_pred: Option<f64>,
    pub attack: Option<AttackConfig>,
}

/// Evaluation batch size. Attack random starts are seeded per batch.
pub const EVAL_BATCH: usize = 200;

/// Clean accuracy, and with `cfg` robust accuracy and robustness with
/// respect to predictions.
pub fn evaluate(model: &Model, ds: &Dataset, cfg: Option<&AttackConfig>) -> Result<EvalReport> {
    evaluate_with(model, ds, cfg, true)
}

/// As [`evaluate`]; `wrt_pred = false` skips the second attack and leaves
/// `robust_wrt_pred` empty.
pub fn evaluate_with(model: &Model, ds: &Dataset, cfg: Option<&AttackConfig>, wrt_pred: bool) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let n = ds.len();
    let mut clean_ok = 0usize;
    let mut robust_ok = 0usize;
    let mut stable = 0usize;
    for (chunk_idx, start) in (0..n).step_by(EVAL_BATCH).enumerate() {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let (x, y) = ds.batch(&idx);
        let pred = model.predict(&x)?;
        let correct: Vec<bool> = pred.iter().zip(&y).map(|(p, t)| p == t).collect();
        clean_ok += correct.iter().filter(|&&c| c).count();
        if let Some(cfg) = cfg {
            let mut survived = correct.clone();
            let mut held = vec![true; idx.len()];
            for restart in 0..cfg.restarts {
                // One seed per chunk and restart keeps runs reproducible for a
                // fixed batching. Restart 0 uses the plain chunk seed.
                let seed = cfg
                    .seed
                    .wrapping_add(chunk_idx as u64)
                    .wrapping_add((restart as u64) << 32);
                let label_cfg = AttackConfig {
                    seed,
                    mode: TargetMode::VsLabel,
                    ..cfg.clone()
                };
                let adv = pgd(model, &x, &y, &label_cfg)?;
                assert!(within_budget(&x, &adv, &label_cfg), "attack left the budget");
                for ((s, a), t) in survived.iter_mut().zip(model.predict(&adv)?).zip(&y) {
                    *s &= a == *t;
                }

                if !wrt_pred {
                    continue;
                }
                let pred_cfg = AttackConfig {
                    seed,
                    mode: TargetMode::VsPrediction,
                    ..cfg.clone()
                };
                let adv = pgd(model, &x, &y, &pred_cfg)?;
                assert!(within_budget(&x, &adv, &pred_cfg), "attack left the budget");
                for ((h, a), p) in held.iter_mut().zip(model.predict(&adv)?).zip(&pred) {
                    *h &= a == *p;
                }
            }
            robust_ok += survived.iter().filter(|&&s| s).count();
            stable += held.iter().filter(|&&h| h).count();
        }
    }
    let frac = |k: usize| k as f64 / n as f64;
    Ok(EvalReport {
        n,
        clean_acc: frac(clean_ok),
        robust_acc: cfg.map(|_| frac(robust_ok)),
        robust_wrt_pred: cfg.filter(|_| wrt_pred).map(|_| frac(stable)),
        attack: cfg.cloned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Arch, Layer};

    fn linear_model(w1: &[f64], b1: f64) -> Model {
        let d = w1.len();
        let mut m = Model::build(Arch::Linear, 1.0, 2, &[d], 0).unwrap();
        let Layer::Linear(l) = &mut m.layers[0] else { unreachable!() };
        let mut w = vec![0.0; d];
        w.extend_from_slice(w1);
        l.weight = Tensor::from_vec(&[2, d], w).unwrap();
        l.bias = Tensor::from_vec(&[2], vec![0.0, b1]).unwrap();
        m
    }

    #[test]
    fn zero_budget_is_identity() {
        let m = Model::build(Arch::Lenet, 0.125, 10, &[1, 8, 8], 1).unwrap();
        let x = Tensor::from_vec(&[2, 1, 8, 8], (0..128).map(|i| (i % 10) as f64 / 10.0).collect()).unwrap();
        let cfg = AttackConfig {
            eps: 0.0,
            ..AttackConfig::mnist()
        };
        assert_eq!(pgd(&m, &x, &[1, 2], &cfg).unwrap(), x);
    }

    #[test]
    fn corner_image_stays_in_the_clipped_box() {
        let m = Model::build(Arch::Lenet, 0.125, 10, &[1, 8, 8], 1).unwrap();
        let x = Tensor::zeros(&[3, 1, 8, 8]);
        let cfg = AttackConfig::mnist();
        let adv = pgd(&m, &x, &[0, 5, 9], &cfg).unwrap();
        assert!(adv.data().iter().all(|&v| (0.0..=0.3 + 1e-12).contains(&v)));
    }

    #[test]
    fn closed_form_examples() {
        let w = [1.0, 0.0, 0.0];
        let (_, flipped) = linear_optimal_attack(&w, 0.5, &[0.55, 0.2, 0.9], 1, 0.1);
        assert!(flipped);
        let (adv, flipped) = linear_optimal_attack(&w, 0.5, &[0.8, 0.2, 0.9], 1, 0.1);
        assert!(!flipped);
        assert!((adv[0] - 0.7).abs() < 1e-15 && adv[1] == 0.2);
        // ε = 0 flips exactly the misclassified points.
        assert!(linear_optimal_attack(&w, 0.5, &[0.4, 0.0, 0.0], 1, 0.0).1);
        assert!(!linear_optimal_attack(&w, 0.5, &[0.6, 0.0, 0.0], 1, 0.0).1);
    }

    #[test]
    fn pgd_reaches_the_closed_form_point_on_a_linear_model() {
        let w1 = [0.7, -1.2, 0.0, 0.4];
        let m = linear_model(&w1, -0.1);
        let x = Tensor::from_vec(&[1, 4], vec![0.3, 0.1, 0.5, 0.9]).unwrap();
        let cfg = AttackConfig {
            eps: 0.05,
            alpha: 0.01,
            iters: 40,
            random_start: false,
            clip_domain: false,
            ..AttackConfig::mnist()
        };
        let adv = pgd(&m, &x, &[1], &cfg).unwrap();
        let (expect, _) = linear_optimal_attack(&w1, 0.1, x.data(), 1, 0.05);
        for (a, e) in adv.data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_model_is_fully_stable() {
        let mut m = Model::build(Arch::Linear, 1.0, 3, &[4], 0).unwrap();
        let Layer::Linear(l) = &mut m.layers[0] else { unreachable!() };
        l.weight.data_mut().fill(0.0);
        l.bias = Tensor::from_vec(&[3], vec![0.0, 2.0, 1.0]).unwrap();
        let images = Tensor::from_vec(&[6, 4], (0..24).map(|i| (i % 5) as f64 / 4.0).collect()).unwrap();
        let ds = Dataset::new(images, vec![0, 1, 2, 0, 1, 2], 3, crate::data::DatasetMeta::new("t", "test")).unwrap();
        let r = evaluate(&m, &ds, Some(&AttackConfig::mnist())).unwrap();
        assert_eq!(r.robust_wrt_pred, Some(1.0));
        assert!((r.clean_acc - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.robust_acc, Some(r.clean_acc));
    }

    #[test]
    fn rejects_bad_targets_and_config() {
        let m = Model::build(Arch::Linear, 1.0, 2, &[3], 0).unwrap();
        let x = Tensor::zeros(&[1, 3]);
        assert!(pgd(&m, &x, &[2], &AttackConfig::mnist()).is_err());
        assert!(pgd(&m, &x, &[0, 1], &AttackConfig::mnist()).is_err());
        let bad = AttackConfig {
            iters: 0,
            ..AttackConfig::mnist()
        };
        assert!(pgd(&m, &x, &[0], &bad).is_err());
    }

    #[test]
    fn more_restarts_never_raise_robust_accuracy() {
        let m = Model::build(Arch::Lenet, 0.125, 10, &[1, 8, 8], 3).unwrap();
        let images = Tensor::from_vec(&[20, 1, 8, 8], (0..1280).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()).unwrap();
        let labels = (0..20).map(|i| i % 10).collect();
        let ds = Dataset::new(images, labels, 10, crate::data::DatasetMeta::new("t", "test")).unwrap();
        let one = AttackConfig {
            eps: 0.05,
            iters: 3,
            ..AttackConfig::mnist()
        };
        let three = AttackConfig { restarts: 3, ..one.clone() };
        let a = evaluate(&m, &ds, Some(&one)).unwrap();
        let b = evaluate(&m, &ds, Some(&three)).unwrap();
        assert!(b.robust_acc.unwrap() <= a.robust_acc.unwrap());
        assert!(b.robust_wrt_pred.unwrap() <= a.robust_wrt_pred.unwrap());
        let zero = AttackConfig { restarts: 0, ..one };
        assert!(zero.validate().is_err());
    }
}
