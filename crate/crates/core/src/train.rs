//! Standard and PGD-adversarial training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{evaluate_with, pgd, within_budget, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Model, Wrt};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Adam,
    SgdMomentum,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Piecewise-constant learning rate: `(step, lr)` pairs with strictly
/// increasing steps, the first at step 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LrSchedule(pub Vec<(usize, f64)>);

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule(vec![(0, lr)])
    }

    pub fn validate(&self) -> Result<()> {
        let Some(&(first, _)) = self.0.first() else {
            return Err(Error::invalid("learning rate schedule is empty"));
        };
        if first != 0 {
            return Err(Error::invalid("learning rate schedule must start at step 0"));
        }
        if self.0.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::invalid("schedule steps must be strictly increasing"));
        }
        if let Some(&(s, lr)) = self.0.iter().find(|(_, lr)| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::invalid(format!("learning rate at step {s} must be positive, got {lr}")));
        }
        Ok(())
    }

    pub fn at(&self, step: usize) -> f64 {
        self.0
            .iter()
            .take_while(|(s, _)| *s <= step)
            .last()
            .map_or(self.0[0].1, |(_, lr)| *lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Decoupled: each step multiplies weights by `1 − lr·weight_decay`.
    #[serde(default)]
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    #[serde(default)]
    pub adversarial: bool,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    /// Adversarial training ramps ε linearly from `ε/eps_warmup` to the full
    /// budget over this many steps; 0 attacks at full ε from the start.
    #[serde(default)]
    pub eps_warmup: usize,
    #[serde(default)]
    pub seed: u64,
    /// Probe evaluation interval in steps; 0 evaluates only at the end.
    #[serde(default)]
    pub eval_every: usize,
}

fn default_momentum() -> f64 {
    0.9
}

impl TrainConfig {
    /// Adam at 1e-4, batch 50, 4000 steps, standard training.
    pub fn desk_default() -> Self {
        TrainConfig {
            optimizer: Optimizer::Adam,
            lr: LrSchedule::constant(1e-4),
            momentum: default_momentum(),
            weight_decay: 0.0,
            batch_size: 50,
            total_steps: 4000,
            adversarial: false,
            attack: None,
            eps_warmup: 0,
            seed: 0,
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        match (&self.attack, self.adversarial) {
            (None, true) => Err(Error::invalid("adversarial training needs an attack")),
            (Some(a), _) => a.validate(),
            (None, false) => Ok(()),
        }
    }
}

/// One history record. Accuracies are filled at probe evaluations only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub clean_acc: Option<f64>,
    pub robust_acc: Option<f64>,
}

enum OptState {
    Adam { m: Vec<Tensor>, v: Vec<Tensor> },
    Sgd { velocity: Vec<Tensor> },
}

/// Trains `model` on `train_ds`. `probe`, if given, is evaluated every
/// `eval_every` steps and after the last one (robustly when the config
/// has an attack).
///
/// Minibatches walk a fresh seeded permutation each epoch. In adversarial
/// mode each minibatch is replaced by its PGD counterpart against the
/// current model before the gradient step.
pub fn train(
    mut model: Model,
    train_ds: &Dataset,
    cfg: &TrainConfig,
    probe: Option<&Dataset>,
) -> Result<(Model, Vec<HistoryRow>)> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if train_ds.item_shape() != model.input_shape.as_slice() {
        return Err(Error::Shape(format!(
            "model expects items of shape {:?}, data has {:?}",
            model.input_shape,
            train_ds.item_shape()
        )));
    }
    if train_ds.num_classes > model.num_classes {
        return Err(Error::invalid(format!(
            "data has {} classes, model only {}",
            train_ds.num_classes, model.num_classes
        )));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let attack_seed = derive_seed(cfg.seed, "attack");
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let mut state = match cfg.optimizer {
        Optimizer::Adam => OptState::Adam {
            m: model.zero_grads(),
            v: model.zero_grads(),
        },
        Optimizer::SgdMomentum => OptState::Sgd {
            velocity: model.zero_grads(),
        },
    };
    let mut history = Vec::with_capacity(cfg.total_steps);

    for step in 0..cfg.total_steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..train_ds.len()).collect();
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            let take = (cfg.batch_size - idx.len()).min(order.len() - cursor);
            idx.extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }
        let (mut x, y) = train_ds.batch(&idx);
        if cfg.adversarial {
            let full = cfg.attack.clone().expect("validated");
            let attack = AttackConfig {
                eps: warmup_eps(full.eps, step, cfg.eps_warmup),
                seed: attack_seed.wrapping_add(step as u64),
                ..full
            };
            let adv = pgd(&model, &x, &y, &attack)?;
            assert!(within_budget(&x, &adv, &attack), "adversarial batch left the budget");
            x = adv;
        }
        let (loss, grads) = model.loss_and_grads(&x, &y, Wrt::Params)?;
        if !loss.mean.is_finite() {
            return Err(Error::Diverged { step, loss: loss.mean });
        }
        let grads = grads.params.expect("parameter gradients requested");
        let lr = cfg.lr.at(step);
        apply_update(&mut model, &grads, &mut state, cfg, lr, step);
        model.round_params_to_f32();
        if model.params().iter().any(|p| !p.all_finite()) {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }

        let mut row = HistoryRow {
            step: step + 1,
            loss: loss.mean,
            clean_acc: None,
            robust_acc: None,
        };
        let last = step + 1 == cfg.total_steps;
        let due = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if let (Some(probe), true) = (probe, due || last) {
            let report = evaluate_with(&model, probe, cfg.attack.as_ref(), false)?;
            row.clean_acc = Some(report.clean_acc);
            row.robust_acc = report.robust_acc;
        }
        history.push(row);
    }
    Ok((model, history))
}

/// Training budget at `step` (0-based) under a linear warmup.
pub fn warmup_eps(eps: f64, step: usize, warmup: usize) -> f64 {
    if step >= warmup {
        eps
    } else {
        eps * (step + 1) as f64 / warmup as f64
    }
}

fn apply_update(model: &mut Model, grads: &[Tensor], state: &mut OptState, cfg: &TrainConfig, lr: f64, step: usize) {
    let decay = 1.0 - lr * cfg.weight_decay;
    let mut params = model.params_mut();
    match state {
        OptState::Adam { m, v } => {
            let t = (step + 1) as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                let iter = p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
                for ((w, &g), (m, v)) in iter {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *w = *w * decay - lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
        OptState::Sgd { velocity } => {
            for ((p, g), vel) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                for ((w, &g), u) in p.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                    *u = cfg.momentum * *u + g;
                    *w = *w * decay - lr * *u;
                }
            }
        }
    }
}
