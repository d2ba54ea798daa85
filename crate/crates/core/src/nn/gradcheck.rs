//! Central-difference verification of `Model::loss_and_grads`.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{Model, Wrt};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is essentially zero are judged on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates checked per tensor (all of them if the tensor is smaller).
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            samples_per_tensor: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    /// `"input"` or `"param[i]"`.
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates where ±step flipped a ReLU, pooling or standardization
    /// branch, so the finite difference straddles a kink.
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic gradients with central differences using step `h`.
pub fn grad_check(model: &Model, batch: &Tensor, labels: &[usize], h: f64) -> Result<f64> {
    let opts = GradCheckOptions {
        step: h,
        ..GradCheckOptions::default()
    };
    Ok(grad_check_with(model, batch, labels, &opts)?.max_rel_error)
}

pub fn grad_check_with(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    opts: &GradCheckOptions,
) -> Result<GradCheck> {
    let (_, grads) = model.loss_and_grads(batch, labels, Wrt::Both)?;
    let base_sig = model.branch_signature(batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.step;
    let mut tensors = Vec::new();

    // Input coordinates.
    {
        let analytic = grads.input.as_ref().expect("input gradient requested");
        let mut probe = batch.clone();
        let coords = pick(&mut rng, batch.len(), opts.samples_per_tensor);
        let mut tc = TensorCheck {
            name: "input".into(),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for j in coords {
            let orig = probe.data()[j];
            probe.data_mut()[j] = orig + h;
            let (lp, sp) = (model.loss(&probe, labels)?.mean, model.branch_signature(&probe)?);
            probe.data_mut()[j] = orig - h;
            let (lm, sm) = (model.loss(&probe, labels)?.mean, model.branch_signature(&probe)?);
            probe.data_mut()[j] = orig;
            if sp != base_sig || sm != base_sig {
                tc.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            tc.max_rel_error = tc.max_rel_error.max(relative_error(analytic.data()[j], numeric));
            tc.checked += 1;
        }
        tensors.push(tc);
    }

    // Parameter coordinates.
    let analytic = grads.params.expect("parameter gradients requested");
    let mut probe = model.clone();
    for (t, g) in analytic.iter().enumerate() {
        let coords = pick(&mut rng, g.len(), opts.samples_per_tensor);
        let mut tc = TensorCheck {
            name: format!("param[{t}]"),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for j in coords {
            let orig = probe.params()[t].data()[j];
            probe.params_mut()[t].data_mut()[j] = orig + h;
            let (lp, sp) = (probe.loss(batch, labels)?.mean, probe.branch_signature(batch)?);
            probe.params_mut()[t].data_mut()[j] = orig - h;
            let (lm, sm) = (probe.loss(batch, labels)?.mean, probe.branch_signature(batch)?);
            probe.params_mut()[t].data_mut()[j] = orig;
            if sp != base_sig || sm != base_sig {
                tc.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            tc.max_rel_error = tc.max_rel_error.max(relative_error(g.data()[j], numeric));
            tc.checked += 1;
        }
        tensors.push(tc);
    }

    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_error,
        tensors,
    })
}

fn pick(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Vec<usize> {
    if len <= n {
        (0..len).collect()
    } else {
        let mut v = index::sample(rng, len, n).into_vec();
        v.sort_unstable();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Arch;

    #[test]
    fn zero_model_on_zero_batch_is_exact() {
        let mut m = Model::build(Arch::Lenet, 0.125, 10, &[1, 8, 8], 0).unwrap();
        for p in m.params_mut() {
            p.data_mut().fill(0.0);
        }
        let x = Tensor::zeros(&[2, 1, 8, 8]);
        let err = grad_check(&m, &x, &[1, 4], 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(1e-9, 2e-9) - 1e-3).abs() < 1e-15);
    }
}
