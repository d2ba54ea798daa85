//! The fixed layer set and its hand-written backward passes.
//!
//! Activations are `[batch, channels, height, width]` for spatial layers and
//! `[batch, features]` for fully-connected ones; a `Linear` layer flattens
//! whatever it receives.

use crate::tensor::Tensor;

/// Convolution with stride 1 and "same" zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[out, in, k, k]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Relu,
    /// 2×2 max pooling, stride 2, odd trailing rows/columns dropped.
    MaxPool2,
    Linear(Linear),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2 => "maxpool2",
            Layer::Linear(_) => "linear",
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    /// Output shape of one item given the input item shape.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match self {
            Layer::Conv2d(c) => match input {
                [ch, h, w] if *ch == c.in_channels => Some(vec![c.out_channels, *h, *w]),
                _ => None,
            },
            Layer::Relu => Some(input.to_vec()),
            Layer::MaxPool2 => match input {
                [ch, h, w] if *h >= 2 && *w >= 2 => Some(vec![*ch, h / 2, w / 2]),
                _ => None,
            },
            Layer::Linear(l) => {
                (input.iter().product::<usize>() == l.in_features).then(|| vec![l.out_features])
            }
        }
    }
}

/// What a layer keeps from the forward pass for its backward pass.
#[derive(Debug)]
pub(crate) enum Cache {
    Conv { input: Tensor },
    Relu { mask: Vec<bool> },
    Pool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Linear { input: Tensor },
}

impl Cache {
    /// Branch decisions taken by the piecewise-linear layers.
    pub(crate) fn signature(&self) -> Vec<usize> {
        match self {
            Cache::Relu { mask } => mask.iter().map(|&m| usize::from(m)).collect(),
            Cache::Pool { argmax, .. } => argmax.clone(),
            _ => Vec::new(),
        }
    }
}

pub(crate) fn forward(layer: &Layer, x: &Tensor, keep: bool) -> (Tensor, Option<Cache>) {
    match layer {
        Layer::Conv2d(c) => conv_forward(c, x, keep),
        Layer::Relu => {
            let out = x.map(|v| v.max(0.0));
            let cache = keep.then(|| Cache::Relu {
                mask: x.data().iter().map(|&v| v > 0.0).collect(),
            });
            (out, cache)
        }
        Layer::MaxPool2 => pool_forward(x, keep),
        Layer::Linear(l) => linear_forward(l, x, keep),
    }
}

/// Propagates `grad_out` through `layer`, accumulating parameter gradients
/// into `param_grads` when given. Returns the input gradient when
/// `need_input` is set.
pub(crate) fn backward(
    layer: &Layer,
    cache: &Cache,
    grad_out: &Tensor,
    param_grads: Option<&mut [Tensor]>,
    need_input: bool,
) -> Option<Tensor> {
    match (layer, cache) {
        (Layer::Conv2d(c), Cache::Conv { input }) => conv_backward(c, input, grad_out, param_grads, need_input),
        (Layer::Relu, Cache::Relu { mask }) => need_input.then(|| {
            let mut g = grad_out.clone();
            for (v, &m) in g.data_mut().iter_mut().zip(mask) {
                if !m {
                    *v = 0.0;
                }
            }
            g
        }),
        (Layer::MaxPool2, Cache::Pool { argmax, in_shape }) => need_input.then(|| {
            let mut g = Tensor::zeros(in_shape);
            let gd = g.data_mut();
            for (&src, &v) in argmax.iter().zip(grad_out.data()) {
                gd[src] += v;
            }
            g
        }),
        (Layer::Linear(l), Cache::Linear { input }) => {
            linear_backward(l, input, grad_out, param_grads, need_input)
        }
        _ => unreachable!("cache does not belong to layer"),
    }
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds are the caller's contract; check the extents once here.
    debug_assert!(a.len() >= ((m - 1) as isize * rsa + (k.max(1) - 1) as isize * csa + 1) as usize);
    debug_assert!(b.len() >= ((k.max(1) - 1) as isize * rsb + (n - 1) as isize * csb + 1) as usize);
    debug_assert!(c.len() >= ((m - 1) as isize * rsc + (n - 1) as isize * csc + 1) as usize);
    // SAFETY: the extents asserted above keep every access in bounds, and
    // `c` does not alias `a` or `b` since it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Writes the `[c·k·k, h·w]` patch matrix of one image into `cols`.
fn im2col(img: &[f64], ch: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k - 1) / 2;
    let hw = h * w;
    for c in 0..ch {
        let plane = &img[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                // Output columns x whose source column x + kx − pad is inside.
                let x0 = pad.saturating_sub(kx).min(w);
                let x1 = (w + pad).saturating_sub(kx).min(w).max(x0);
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[(sy - pad) * w..(sy - pad + 1) * w];
                    dst[..x0].fill(0.0);
                    dst[x0..x1].copy_from_slice(&src[x0 + kx - pad..x1 + kx - pad]);
                    dst[x1..].fill(0.0);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a patch matrix back into the image.
fn col2im(cols: &[f64], ch: usize, h: usize, w: usize, k: usize, img: &mut [f64]) {
    let pad = (k - 1) / 2;
    let hw = h * w;
    for c in 0..ch {
        let plane = &mut img[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                let x0 = pad.saturating_sub(kx).min(w);
                let x1 = (w + pad).saturating_sub(kx).min(w).max(x0);
                for y in 0..h {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let src = &row[y * w + x0..y * w + x1];
                    let dst = &mut plane[(sy - pad) * w + x0 + kx - pad..(sy - pad) * w + x1 + kx - pad];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

// Convolutions run image by image so the patch matrix stays in cache. The
// cache keeps the layer input; patches are rebuilt only for the weight
// gradient.

fn conv_forward(c: &Conv2d, x: &Tensor, keep: bool) -> (Tensor, Option<Cache>) {
    let (b, ch, h, w) = dims4(x);
    let hw = h * w;
    let ckk = ch * c.kernel * c.kernel;
    let oc = c.out_channels;
    let mut col = vec![0.0; ckk * hw];
    let mut out = Tensor::zeros(&[b, oc, h, w]);
    let od = out.data_mut();
    for i in 0..b {
        im2col(x.item(i), ch, h, w, c.kernel, &mut col);
        let o = &mut od[i * oc * hw..(i + 1) * oc * hw];
        for (ob, &bias) in o.chunks_exact_mut(hw).zip(c.bias.data()) {
            ob.fill(bias);
        }
        gemm(oc, ckk, hw, c.weight.data(), (ckk as isize, 1), &col, (hw as isize, 1), 1.0, o, (hw as isize, 1));
    }
    let cache = keep.then(|| Cache::Conv { input: x.clone() });
    (out, cache)
}

fn conv_backward(
    c: &Conv2d,
    input: &Tensor,
    grad_out: &Tensor,
    param_grads: Option<&mut [Tensor]>,
    need_input: bool,
) -> Option<Tensor> {
    let (b, ch, h, w) = dims4(input);
    let hw = h * w;
    let ckk = ch * c.kernel * c.kernel;
    let oc = c.out_channels;
    let mut col = vec![0.0; ckk * hw];
    if let Some(grads) = param_grads {
        let (gw, gb) = grads.split_at_mut(1);
        for i in 0..b {
            let go = grad_out.item(i);
            im2col(input.item(i), ch, h, w, c.kernel, &mut col);
            gemm(oc, hw, ckk, go, (hw as isize, 1), &col, (1, hw as isize), 1.0, gw[0].data_mut(), (ckk as isize, 1));
            for (gbias, g) in gb[0].data_mut().iter_mut().zip(go.chunks_exact(hw)) {
                *gbias += g.iter().sum::<f64>();
            }
        }
    }
    if !need_input {
        return None;
    }
    let mut gx = Tensor::zeros(input.shape());
    for i in 0..b {
        gemm(ckk, oc, hw, c.weight.data(), (1, ckk as isize), grad_out.item(i), (hw as isize, 1), 0.0, &mut col, (hw as isize, 1));
        col2im(&col, ch, h, w, c.kernel, gx.item_mut(i));
    }
    Some(gx)
}

fn pool_forward(x: &Tensor, keep: bool) -> (Tensor, Option<Cache>) {
    let (b, ch, h, w) = dims4(x);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, ch, oh, ow]);
    let mut argmax = Vec::with_capacity(b * ch * oh * ow);
    let xd = x.data();
    let od = out.data_mut();
    let mut o = 0;
    for plane in 0..b * ch {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                od[o] = xd[best];
                argmax.push(best);
                o += 1;
            }
        }
    }
    let cache = keep.then(|| Cache::Pool {
        argmax,
        in_shape: x.shape().to_vec(),
    });
    (out, cache)
}

fn linear_forward(l: &Linear, x: &Tensor, keep: bool) -> (Tensor, Option<Cache>) {
    let b = x.batch();
    let n_in = l.in_features;
    let n_out = l.out_features;
    debug_assert_eq!(x.item_len(), n_in);
    let mut out = Tensor::zeros(&[b, n_out]);
    for row in out.data_mut().chunks_mut(n_out) {
        row.copy_from_slice(l.bias.data());
    }
    gemm(
        b,
        n_in,
        n_out,
        x.data(),
        (n_in as isize, 1),
        l.weight.data(),
        (1, n_in as isize),
        1.0,
        out.data_mut(),
        (n_out as isize, 1),
    );
    let cache = keep.then(|| Cache::Linear { input: x.clone() });
    (out, cache)
}

fn linear_backward(
    l: &Linear,
    input: &Tensor,
    grad_out: &Tensor,
    param_grads: Option<&mut [Tensor]>,
    need_input: bool,
) -> Option<Tensor> {
    let b = input.batch();
    let n_in = l.in_features;
    let n_out = l.out_features;
    if let Some(grads) = param_grads {
        let (gw, gb) = grads.split_at_mut(1);
        gemm(
            n_out,
            b,
            n_in,
            grad_out.data(),
            (1, n_out as isize),
            input.data(),
            (n_in as isize, 1),
            1.0,
            gw[0].data_mut(),
            (n_in as isize, 1),
        );
        for row in grad_out.data().chunks(n_out) {
            for (g, v) in gb[0].data_mut().iter_mut().zip(row) {
                *g += v;
            }
        }
    }
    need_input.then(|| {
        let mut gx = Tensor::zeros(input.shape());
        gemm(
            b,
            n_out,
            n_in,
            grad_out.data(),
            (n_out as isize, 1),
            l.weight.data(),
            (n_in as isize, 1),
            0.0,
            gx.data_mut(),
            (n_in as isize, 1),
        );
        gx
    })
}

fn dims4(x: &Tensor) -> (usize, usize, usize, usize) {
    match x.shape() {
        &[b, c, h, w] => (b, c, h, w),
        s => panic!("expected a 4-d activation, got {s:?}"),
    }
}
