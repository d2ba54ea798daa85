//! Concentration-of-measure lower bounds on the mass of ε-expansions, and
//! the vulnerability fractions they imply for balanced k-class problems.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The constant `C` with `δ(ε) ≥ C·ε²` on the unit ball.
pub const BALL_C: f64 = 0.089_316_397_477_040_94; // (2 − √3) / 3

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundForm {
    GaussianExact,
    /// The tight `(1 − δ)^{2d}` form on the ball.
    Tight,
    ExponentialLower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Cube,
    Ball,
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cube" => Ok(Domain::Cube),
            "ball" => Ok(Domain::Ball),
            _ => Err(Error::invalid(format!("unknown domain `{s}` (expected cube or ball)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundResult {
    /// Clamped to `[0, 1]`.
    pub value: f64,
    pub form: BoundForm,
    /// The looser closed form, when it applies.
    pub exponential_lower: Option<f64>,
    pub p: f64,
    pub eps: f64,
    pub d: Option<usize>,
}

/// Standard normal CDF, through the complementary error function so the
/// lower tail keeps full relative precision.
pub fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile: Acklam's rational approximation polished by
/// two Newton steps on `phi`.
pub fn phi_inv(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let p_low = 0.02425;
    let mut x = if p < p_low {
        tail((-2.0 * p.ln()).sqrt())
    } else if p > 1.0 - p_low {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    for _ in 0..2 {
        let density = phi_pdf(x);
        if density > 0.0 {
            x -= (phi(x) - p) / density;
        }
    }
    x
}

fn check_prob(name: &str, p: f64, allow_one: bool) -> Result<()> {
    let ok = p > 0.0 && (p < 1.0 || (allow_one && p == 1.0));
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be in (0, 1{}, got {p}", if allow_one { "]" } else { ")" })))
    }
}

/// `Φ(ε√(2π) + Φ⁻¹(p_A))` for a set of measure `p_A` in the unit cube;
/// `1 − e^{−πε²}` is reported alongside when `p_A ≥ 1/2`.
pub fn cube_mass_bound(p_a: f64, eps: f64) -> Result<BoundResult> {
    check_prob("p_A", p_a, false)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let value = phi(eps * (2.0 * std::f64::consts::PI).sqrt() + phi_inv(p_a));
    let exponential_lower = (p_a >= 0.5).then(|| -(-std::f64::consts::PI * eps * eps).exp_m1());
    Ok(BoundResult {
        value: value.clamp(0.0, 1.0),
        form: BoundForm::GaussianExact,
        exponential_lower,
        p: p_a,
        eps,
        d: None,
    })
}

/// `δ(ε) = 1 − √(1 − ε²/4)`.
pub fn delta_l2(eps: f64) -> f64 {
    // 1 − √(1 − u) = u / (1 + √(1 − u)) avoids cancellation for small ε.
    let u = eps * eps / 4.0;
    u / (1.0 + (1.0 - u).sqrt())
}

/// `1 − (1/p_B)(1 − δ(ε))^{2d}` for a set of measure `p_B` in the unit
/// ℓ2 ball of dimension `d`, with `1 − (1/p_B)e^{−2dCε²}` alongside.
pub fn ball_mass_bound(p_b: f64, eps: f64, d: usize) -> Result<BoundResult> {
    check_prob("p_B", p_b, true)?;
    if !(eps > 0.0 && eps < 2.0) {
        return Err(Error::invalid(format!("eps must be in (0, 2), got {eps}")));
    }
    if d == 0 {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    let two_d = 2.0 * d as f64;
    let tight = 1.0 - (two_d * (-delta_l2(eps)).ln_1p() - p_b.ln()).exp();
    let loose = 1.0 - (-two_d * BALL_C * eps * eps - p_b.ln()).exp();
    Ok(BoundResult {
        value: tight.clamp(0.0, 1.0),
        form: BoundForm::Tight,
        exponential_lower: Some(loose.clamp(0.0, 1.0)),
        p: p_b,
        eps,
        d: Some(d),
    })
}

/// Lower bound on the fraction of a balanced `k`-class distribution that is
/// misclassified or attackable within `ε`, for any classifier.
///
/// Each class's complement has mass `1 − 1/k ≥ 1/2`, so its ε-expansion
/// covers at least `b = bound(1 − 1/k, ε)`; the robust part of each class
/// is at most `1 − b`, giving `1 − k(1 − b)` overall.
pub fn vulnerability_bound(k: usize, eps: f64, domain: Domain, d: Option<usize>) -> Result<f64> {
    vulnerability_bound_with(k, eps, domain, d, false)
}

/// As [`vulnerability_bound`], optionally composing with the looser
/// exponential form instead of the exact one.
pub fn vulnerability_bound_with(k: usize, eps: f64, domain: Domain, d: Option<usize>, exponential: bool) -> Result<f64> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {k}")));
    }
    let p = 1.0 - 1.0 / k as f64;
    let r = match domain {
        Domain::Cube => cube_mass_bound(p, eps)?,
        Domain::Ball => {
            let d = d.ok_or_else(|| Error::invalid("the ball domain needs a dimension"))?;
            ball_mass_bound(p, eps, d)?
        }
    };
    let b = if exponential {
        r.exponential_lower.expect("p ≥ 1/2 always has an exponential form")
    } else {
        r.value
    };
    Ok((1.0 - k as f64 * (1.0 - b)).clamp(0.0, 1.0))
}
