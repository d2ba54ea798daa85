use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, Cache, Conv2d, Layer, Linear};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Widen factors the LeNet family is defined for.
pub const LENET_WIDENS: [f64; 6] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0];

const CONV_KERNEL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// conv(32w) → ReLU → pool → conv(64w) → ReLU → pool → fc(1024w) → ReLU → fc(k)
    Lenet,
    /// A single fully-connected layer.
    Linear,
    /// fc(1024w) → ReLU → fc(k)
    Mlp,
}

impl Arch {
    pub fn id(self) -> u32 {
        match self {
            Arch::Lenet => 1,
            Arch::Linear => 2,
            Arch::Mlp => 3,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            1 => Some(Arch::Lenet),
            2 => Some(Arch::Linear),
            3 => Some(Arch::Mlp),
            _ => None,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Lenet => "lenet",
            Arch::Linear => "linear",
            Arch::Mlp => "mlp",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lenet" | "lenet5" => Ok(Arch::Lenet),
            "linear" => Ok(Arch::Linear),
            "mlp" => Ok(Arch::Mlp),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }
}

/// Which gradients `loss_and_grads` should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    Params,
    Input,
    Both,
}

impl Wrt {
    fn params(self) -> bool {
        matches!(self, Wrt::Params | Wrt::Both)
    }

    fn input(self) -> bool {
        matches!(self, Wrt::Input | Wrt::Both)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub mean: f64,
    pub per_example: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Gradients {
    /// One tensor per parameter, in [`Model::params`] order.
    pub params: Option<Vec<Tensor>>,
    /// Gradient with respect to the raw (unstandardized) input batch.
    pub input: Option<Tensor>,
}

/// A layered image classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Arch,
    pub widen: f64,
    pub num_classes: usize,
    /// Shape of one input item, e.g. `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    /// Standardize each image to zero mean and unit variance before layer 0.
    pub standardize_input: bool,
    pub layers: Vec<Layer>,
}

/// `round(base · widen)` with halves rounded up, never below 1.
pub fn widened(base: usize, widen: f64) -> usize {
    ((base as f64 * widen + 0.5).floor() as usize).max(1)
}

struct Forward {
    logits: Tensor,
    caches: Vec<Cache>,
    standardized: Option<Standardized>,
}

struct Standardized {
    /// Standardized input, i.e. the input to layer 0.
    out: Tensor,
    /// Per-image divisor `max(std, 1/√d)`.
    scale: Vec<f64>,
    /// Whether the floor was active for each image.
    floored: Vec<bool>,
}

impl Model {
    /// Builds a freshly initialized model. Weights are drawn from a
    /// fan-in-scaled uniform distribution and rounded to single precision;
    /// biases start at zero.
    pub fn build(
        arch: Arch,
        widen: f64,
        num_classes: usize,
        input_shape: &[usize],
        seed: u64,
    ) -> Result<Model> {
        if !(widen > 0.0 && widen.is_finite()) {
            return Err(Error::invalid(format!("widen must be positive, got {widen}")));
        }
        if num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Shape(format!("bad input shape {input_shape:?}")));
        }
        let d: usize = input_shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = match arch {
            Arch::Lenet => {
                let &[ch, h, w] = input_shape else {
                    return Err(Error::Shape(format!(
                        "lenet needs a [channels, height, width] input, got {input_shape:?}"
                    )));
                };
                if h < 4 || w < 4 {
                    return Err(Error::Shape(format!(
                        "lenet needs at least 4×4 images, got {h}×{w}"
                    )));
                }
                let c1 = widened(32, widen);
                let c2 = widened(64, widen);
                let fc = widened(1024, widen);
                let flat = c2 * (h / 2 / 2) * (w / 2 / 2);
                vec![
                    Layer::Conv2d(conv(&mut rng, ch, c1)),
                    Layer::Relu,
                    Layer::MaxPool2,
                    Layer::Conv2d(conv(&mut rng, c1, c2)),
                    Layer::Relu,
                    Layer::MaxPool2,
                    Layer::Linear(linear(&mut rng, flat, fc)),
                    Layer::Relu,
                    Layer::Linear(linear(&mut rng, fc, num_classes)),
                ]
            }
            Arch::Linear => vec![Layer::Linear(linear(&mut rng, d, num_classes))],
            Arch::Mlp => {
                let hidden = widened(1024, widen);
                vec![
                    Layer::Linear(linear(&mut rng, d, hidden)),
                    Layer::Relu,
                    Layer::Linear(linear(&mut rng, hidden, num_classes)),
                ]
            }
        };
        let model = Model {
            arch,
            widen,
            num_classes,
            input_shape: input_shape.to_vec(),
            standardize_input: false,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn with_standardization(mut self, on: bool) -> Self {
        self.standardize_input = on;
        self
    }

    /// Checks that consecutive layer shapes compose and end in `num_classes`.
    pub fn validate(&self) -> Result<()> {
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(&shape).ok_or_else(|| {
                Error::Shape(format!(
                    "layer {i} ({}) cannot take input {shape:?}",
                    layer.kind_name()
                ))
            })?;
        }
        if shape != [self.num_classes] {
            return Err(Error::Shape(format!(
                "model produces {shape:?}, expected [{}]",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Zero tensors shaped like the parameters.
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params().iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    /// Rounds every parameter to the nearest single-precision value.
    pub fn round_params_to_f32(&mut self) {
        for p in self.params_mut() {
            for v in p.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Reshapes a batch to `[n, ...input_shape]`, checking the item size.
    fn shaped_input(&self, batch: &Tensor) -> Result<Tensor> {
        if batch.shape().len() < 2 || batch.item_len() != self.input_len() {
            return Err(Error::Shape(format!(
                "batch {:?} does not match model input {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        let mut shape = vec![batch.batch()];
        shape.extend_from_slice(&self.input_shape);
        batch.clone().reshape(&shape)
    }

    fn run(&self, batch: &Tensor, keep: bool) -> Result<Forward> {
        let mut x = self.shaped_input(batch)?;
        let standardized = if self.standardize_input {
            let s = standardize(&x);
            x = s.out.clone();
            Some(s)
        } else {
            None
        };
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        for layer in &self.layers {
            let (out, cache) = layers::forward(layer, &x, keep);
            if let Some(c) = cache {
                caches.push(c);
            }
            x = out;
        }
        Ok(Forward {
            logits: x,
            caches,
            standardized: standardized.filter(|_| keep),
        })
    }

    /// Logits, shape `[n, num_classes]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.run(batch, false)?.logits)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(batch)?))
    }

    /// Mean softmax cross-entropy without gradients.
    pub fn loss(&self, batch: &Tensor, labels: &[usize]) -> Result<LossValue> {
        let logits = self.forward(batch)?;
        let (loss, _) = cross_entropy(&logits, labels, self.num_classes)?;
        Ok(loss)
    }

    /// Mean softmax cross-entropy and its exact reverse-mode gradients.
    pub fn loss_and_grads(
        &self,
        batch: &Tensor,
        labels: &[usize],
        wrt: Wrt,
    ) -> Result<(LossValue, Gradients)> {
        let fwd = self.run(batch, true)?;
        let (loss, dlogits) = cross_entropy(&fwd.logits, labels, self.num_classes)?;

        let mut param_grads = wrt.params().then(|| self.zero_grads());
        // Parameter tensors are laid out layer by layer; find each layer's slot.
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.params().len();
        }

        let mut grad = dlogits;
        for (i, (layer, cache)) in self.layers.iter().zip(&fwd.caches).enumerate().rev() {
            let need_input = i > 0 || wrt.input();
            let n_params = layer.params().len();
            let slot = param_grads
                .as_mut()
                .filter(|_| n_params > 0)
                .map(|g| &mut g[offsets[i]..offsets[i] + n_params]);
            match layers::backward(layer, cache, &grad, slot, need_input) {
                Some(g) => grad = g,
                None => break,
            }
        }

        let input = if wrt.input() {
            let g = match &fwd.standardized {
                Some(s) => standardize_backward(s, &grad),
                None => grad,
            };
            Some(g.reshape(batch.shape())?)
        } else {
            None
        };
        Ok((
            loss,
            Gradients {
                params: param_grads,
                input,
            },
        ))
    }

    /// Branch decisions (ReLU masks, pool winners, standardization floor)
    /// taken on this batch. Finite-difference checks skip coordinates whose
    /// perturbation changes this.
    pub(crate) fn branch_signature(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let fwd = self.run(batch, true)?;
        let mut sig: Vec<usize> = fwd.caches.iter().flat_map(Cache::signature).collect();
        if let Some(s) = &fwd.standardized {
            sig.extend(s.floored.iter().map(|&f| usize::from(f)));
        }
        Ok(sig)
    }
}

fn conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Conv2d {
    let fan_in = cin * CONV_KERNEL * CONV_KERNEL;
    Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel: CONV_KERNEL,
        weight: fan_in_uniform(rng, &[cout, cin, CONV_KERNEL, CONV_KERNEL], fan_in),
        bias: Tensor::zeros(&[cout]),
    }
}

fn linear(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize) -> Linear {
    Linear {
        in_features: n_in,
        out_features: n_out,
        weight: fan_in_uniform(rng, &[n_out, n_in], n_in),
        bias: Tensor::zeros(&[n_out]),
    }
}

/// `U(−1/√fan_in, 1/√fan_in)`.
fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(-bound..bound) as f32 as f64)
        .collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

fn standardize(x: &Tensor) -> Standardized {
    let d = x.item_len();
    let floor = 1.0 / (d as f64).sqrt();
    let mut out = x.clone();
    let mut scale = Vec::with_capacity(x.batch());
    let mut floored = Vec::with_capacity(x.batch());
    for i in 0..x.batch() {
        let item = out.item_mut(i);
        // An exactly constant image maps to exact zeros.
        let mean = if item.iter().all(|&v| v == item[0]) {
            item[0]
        } else {
            item.iter().sum::<f64>() / d as f64
        };
        let var = item.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let std = var.sqrt();
        let s = std.max(floor);
        for v in item.iter_mut() {
            *v = (*v - mean) / s;
        }
        scale.push(s);
        floored.push(std <= floor);
    }
    Standardized {
        out,
        scale,
        floored,
    }
}

fn standardize_backward(s: &Standardized, grad: &Tensor) -> Tensor {
    let d = grad.item_len() as f64;
    let mut gx = grad.clone();
    for i in 0..grad.batch() {
        let y = s.out.item(i);
        let g = gx.item_mut(i);
        let mean_g = g.iter().sum::<f64>() / d;
        if s.floored[i] {
            for v in g.iter_mut() {
                *v = (*v - mean_g) / s.scale[i];
            }
        } else {
            let mean_gy = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / d;
            for (v, &yv) in g.iter_mut().zip(y) {
                *v = (*v - mean_g - yv * mean_gy) / s.scale[i];
            }
        }
    }
    gx
}

/// Mean cross-entropy and its gradient with respect to the logits.
///
/// The true-class gradient is formed as `-Σ_{c≠y} p_c` rather than
/// `p_y − 1` so it stays nonzero when `p_y` rounds to one.
pub(crate) fn cross_entropy(
    logits: &Tensor,
    labels: &[usize],
    num_classes: usize,
) -> Result<(LossValue, Tensor)> {
    let n = logits.batch();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes });
    }
    let k = logits.item_len();
    let mut grad = Tensor::zeros(&[n, k]);
    let mut per_example = Vec::with_capacity(n);
    let inv_n = 1.0 / n as f64;
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.item(i);
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        per_example.push((lse - z[y]).max(0.0));
        let g = grad.item_mut(i);
        let mut others = 0.0;
        for c in 0..k {
            if c != y {
                let p = (z[c] - lse).exp();
                g[c] = p * inv_n;
                others += p;
            }
        }
        g[y] = -others * inv_n;
    }
    let mean = per_example.iter().sum::<f64>() * inv_n;
    Ok((LossValue { mean, per_example }, grad))
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.batch())
        .map(|i| {
            let row = logits.item(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_weights(mut m: Model) -> Model {
        for p in m.params_mut() {
            p.data_mut().fill(0.0);
        }
        m
    }

    #[test]
    fn lenet_widen_one_matches_reference_widths() {
        let m = Model::build(Arch::Lenet, 1.0, 10, &[1, 28, 28], 7).unwrap();
        let shapes: Vec<_> = m.params().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes[0], vec![32, 1, 5, 5]);
        assert_eq!(shapes[2], vec![64, 32, 5, 5]);
        assert_eq!(shapes[4], vec![1024, 64 * 7 * 7]);
        assert_eq!(shapes[6], vec![10, 1024]);
    }

    #[test]
    fn lenet_eighth_width_has_four_and_eight_channels() {
        let m = Model::build(Arch::Lenet, 0.125, 10, &[1, 28, 28], 3).unwrap();
        let shapes: Vec<_> = m.params().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes[0][0], 4);
        assert_eq!(shapes[2][0], 8);
        assert_eq!(shapes[4][0], 128);
    }

    #[test]
    fn linear_arch_is_single_layer() {
        let m = Model::build(Arch::Linear, 1.0, 2, &[5], 0).unwrap();
        assert_eq!(m.layers.len(), 1);
        assert_eq!(m.params()[0].shape(), &[2, 5]);
    }

    #[test]
    fn widened_rounds_half_up_with_floor_of_one() {
        assert_eq!(widened(32, 0.125), 4);
        assert_eq!(widened(1, 0.5), 1);
        assert_eq!(widened(3, 0.5), 2);
        assert_eq!(widened(64, 0.001), 1);
    }

    #[test]
    fn build_rejects_bad_inputs() {
        assert!(matches!("resnet".parse::<Arch>(), Err(Error::UnknownArch(_))));
        assert!(Model::build(Arch::Lenet, 1.0, 10, &[784], 0).is_err());
        assert!(Model::build(Arch::Lenet, 0.0, 10, &[1, 28, 28], 0).is_err());
        assert!(Model::build(Arch::Lenet, 1.0, 10, &[1, 3, 3], 0).is_err());
    }

    #[test]
    fn param_count_depends_only_on_arch_and_widen() {
        let a = Model::build(Arch::Lenet, 0.25, 10, &[1, 28, 28], 1).unwrap();
        let b = Model::build(Arch::Lenet, 0.25, 10, &[1, 28, 28], 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_ne!(a, b);
        let c = Model::build(Arch::Lenet, 0.25, 10, &[1, 28, 28], 1).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn zero_model_gives_uniform_softmax_and_ln_k_loss() {
        let m = zero_weights(Model::build(Arch::Lenet, 0.125, 10, &[1, 8, 8], 0).unwrap());
        let x = Tensor::from_vec(&[3, 1, 8, 8], (0..192).map(|i| i as f64 / 192.0).collect())
            .unwrap();
        let logits = m.forward(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let labels = [0, 3, 3];
        let (loss, grads) = m.loss_and_grads(&x, &labels, Wrt::Params).unwrap();
        assert!((loss.mean - 10f64.ln()).abs() < 1e-12);
        // Final bias gradient = mean(softmax − onehot).
        let gb = grads.params.unwrap().pop().unwrap();
        let mut expect = [0.1; 10];
        expect[0] -= 1.0 / 3.0;
        expect[3] -= 2.0 / 3.0;
        for (g, e) in gb.data().iter().zip(expect) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn linear_logits_are_wx_plus_b() {
        let mut m = Model::build(Arch::Linear, 1.0, 2, &[3], 0).unwrap();
        let Layer::Linear(l) = &mut m.layers[0] else { unreachable!() };
        l.weight = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.0, -1.0]).unwrap();
        l.bias = Tensor::from_vec(&[2], vec![0.25, -0.5]).unwrap();
        let x = Tensor::from_vec(&[1, 3], vec![2.0, 1.0, 4.0]).unwrap();
        // [1·2 − 2·1 + 0.5·4 + 0.25, 0·2 + 3·1 − 1·4 − 0.5]
        assert_eq!(m.forward(&x).unwrap().data(), &[2.25, -1.5]);
    }

    #[test]
    fn linear_binary_input_gradient_is_p_minus_y_times_w() {
        let mut m = Model::build(Arch::Linear, 1.0, 2, &[3], 0).unwrap();
        let Layer::Linear(l) = &mut m.layers[0] else { unreachable!() };
        l.weight = Tensor::from_vec(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, -2.0, 0.5]).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![0.1, 0.2, 0.3, 0.9, 0.1, 0.4]).unwrap();
        let labels = [1, 0];
        let (_, g) = m.loss_and_grads(&x, &labels, Wrt::Input).unwrap();
        let gi = g.input.unwrap();
        let w = [1.0, -2.0, 0.5];
        for (i, &y) in labels.iter().enumerate() {
            let z: f64 = x.item(i).iter().zip(w).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            for j in 0..3 {
                let expect = (p - y as f64) * w[j] / 2.0;
                assert!((gi.item(i)[j] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let m = Model::build(Arch::Linear, 1.0, 3, &[2], 0).unwrap();
        let x = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            m.loss_and_grads(&x, &[3], Wrt::Both),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn constant_image_standardizes_to_zero() {
        let x = Tensor::from_vec(&[1, 16], vec![0.7; 16]).unwrap();
        let s = standardize(&x);
        assert!(s.out.data().iter().all(|&v| v == 0.0));
        assert!(s.floored[0]);
    }

    #[test]
    fn standardization_ignores_constant_shift() {
        let base: Vec<f64> = (0..25).map(|i| ((i * 13) % 7) as f64 / 10.0).collect();
        let shifted: Vec<f64> = base.iter().map(|v| v + 0.123).collect();
        let a = standardize(&Tensor::from_vec(&[1, 25], base).unwrap());
        let b = standardize(&Tensor::from_vec(&[1, 25], shifted).unwrap());
        assert!(a.out.max_abs_diff(&b.out) < 1e-6);
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let m = Model::build(Arch::Linear, 1.0, 2, &[4], 0).unwrap();
        assert!(matches!(m.forward(&Tensor::zeros(&[2, 5])), Err(Error::Shape(_))));
    }
}
