//! Pointwise pixel maps. All of them send `[0, 1]` into `[0, 1]`.

/// Rounds to 0 or 1; exactly one half goes up.
pub fn binarize(x: f64) -> f64 {
    if x >= 0.5 {
        1.0
    } else {
        0.0
    }
}

/// `sign(2x − 1) · |2x − 1|^(2/p) / 2 + 1/2`.
///
/// Pushes pixels towards {0, 1} for `p > 2` and towards 1/2 for `p < 2`.
/// `p = 2` is the identity and `p = ∞` a three-way threshold that keeps
/// exactly one half in place.
pub fn saturate(x: f64, p: f64) -> f64 {
    if p == 2.0 {
        return x;
    }
    let t = 2.0 * x - 1.0;
    if p.is_infinite() {
        return if t > 0.0 {
            1.0
        } else if t < 0.0 {
            0.0
        } else {
            0.5
        };
    }
    if t == 0.0 {
        return 0.5;
    }
    let out = t.signum() * t.abs().powf(2.0 / p) / 2.0 + 0.5;
    out.clamp(0.0, 1.0)
}

pub fn gamma(x: f64, g: f64) -> f64 {
    x.powf(g)
}

/// `α (x − 1/2) + 1/2`.
pub fn scale_center(x: f64, alpha: f64) -> f64 {
    alpha * (x - 0.5) + 0.5
}
