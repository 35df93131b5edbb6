//! Radial weighting kernels.
//!
//! The compact polynomial kernel is
//!
//! ```text
//! γ(s; k, m) = (1 - s/(m k))^(2m) · (2s/k + 1)   for 0 <= s <= m k
//!            = 0                                  for s > m k
//! ```
//!
//! where `s` is the *squared* distance between the query and the point. Its
//! support is the ball of squared radius `m k`. The exponential kernel
//! `exp(-s / r²)` is kept as a baseline.
//!
//! Every kernel call site in this crate passes squared distances.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Lower bound applied to `k` during optimization.
pub const K_MIN: f64 = 1e-6;
/// Lower bound on `m`; keeps `2m - 1 >= 1` so `dγ/ds` is continuous at the support edge.
pub const M_MIN: f64 = 1.0;
/// Upper bound applied to `m` during optimization.
pub const M_MAX: f64 = 32.0;

/// Truncation of the exponential baseline, in units of its radius `r`.
///
/// The exponential kernel is used with `r = sqrt(m k) / EXPONENTIAL_CUTOFF`, so
/// both kernels share the support ball of squared radius `m k`.
pub const EXPONENTIAL_CUTOFF: f64 = 3.0;

const UNDERFLOW: f64 = 1e-300;

/// Per-point shape parameters of the compact kernel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelParams {
    k: f64,
    m: f64,
}

impl KernelParams {
    pub fn new(k: f64, m: f64) -> Result<Self> {
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::invalid(format!("kernel k must be positive, got {k}")));
        }
        if !(m.is_finite() && m >= M_MIN) {
            return Err(Error::invalid(format!("kernel m must be >= 1, got {m}")));
        }
        Ok(Self { k, m })
    }

    /// Builds parameters with `k` floored at [`K_MIN`] and `m` clamped to
    /// `[M_MIN, M_MAX]`. Non-finite inputs map to the nearest bound.
    pub fn clamped(k: f64, m: f64) -> Self {
        let k = if k.is_nan() { K_MIN } else { k.max(K_MIN) };
        let m = if m.is_nan() { M_MIN } else { m.clamp(M_MIN, M_MAX) };
        Self { k, m }
    }

    #[inline]
    pub fn k(&self) -> f64 {
        self.k
    }

    #[inline]
    pub fn m(&self) -> f64 {
        self.m
    }

    /// Squared-distance support bound `m k`.
    #[inline]
    pub fn support_radius_sq(&self) -> f64 {
        self.m * self.k
    }
}

pub fn support_radius_sq(params: &KernelParams) -> f64 {
    params.support_radius_sq()
}

/// `base^exponent` for `base` in `[0, 1]`, flushing to zero on underflow.
#[inline]
fn pow_unit(base: f64, exponent: f64) -> f64 {
    if base < UNDERFLOW {
        0.0
    } else {
        (exponent * base.ln()).exp()
    }
}

/// `1 - s/(m k)` if `s` lies strictly inside the support.
#[inline]
fn interior_base(s: f64, params: &KernelParams) -> Option<f64> {
    debug_assert!(s >= 0.0, "squared distance must be non-negative");
    let support = params.support_radius_sq();
    if s < support {
        Some(1.0 - s / support)
    } else {
        None
    }
}

pub fn eval_compact(s: f64, params: &KernelParams) -> f64 {
    match interior_base(s, params) {
        Some(b) => pow_unit(b, 2.0 * params.m) * (2.0 * s / params.k + 1.0),
        None => 0.0,
    }
}

/// `dγ/ds` of the compact kernel.
pub fn grad_s(s: f64, params: &KernelParams) -> f64 {
    let Some(b) = interior_base(s, params) else {
        return 0.0;
    };
    let (k, m) = (params.k, params.m);
    let b_lo = pow_unit(b, 2.0 * m - 1.0);
    (2.0 / k) * (b_lo * b - b_lo * (2.0 * s / k + 1.0))
}

/// `dγ/dk` of the compact kernel.
pub fn grad_k(s: f64, params: &KernelParams) -> f64 {
    let Some(b) = interior_base(s, params) else {
        return 0.0;
    };
    let (k, m) = (params.k, params.m);
    let b_lo = pow_unit(b, 2.0 * m - 1.0);
    (2.0 * s / (k * k)) * (b_lo * (2.0 * s / k + 1.0) - b_lo * b)
}

/// `dγ/dm` of the compact kernel. Zero at and beyond the support edge, where
/// the closed form is singular.
pub fn grad_m(s: f64, params: &KernelParams) -> f64 {
    let Some(b) = interior_base(s, params) else {
        return 0.0;
    };
    let (k, m) = (params.k, params.m);
    let value = pow_unit(b, 2.0 * m) * (2.0 * s / k + 1.0);
    if value == 0.0 {
        return 0.0;
    }
    value * 2.0 * (b.ln() + s / (k * m * b))
}

/// Exponential baseline `exp(-sq_dist / r²)`, untruncated.
pub fn eval_exponential(sq_dist: f64, r: f64) -> Result<f64> {
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::invalid(format!("exponential radius must be positive, got {r}")));
    }
    if !(sq_dist >= 0.0) {
        return Err(Error::invalid(format!("squared distance must be non-negative, got {sq_dist}")));
    }
    Ok((-sq_dist / (r * r)).exp())
}

/// Kernel value and its partials with respect to `s`, `k` and `m`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KernelEval {
    pub value: f64,
    pub d_s: f64,
    pub d_k: f64,
    pub d_m: f64,
}

/// Which kernel turns squared distances into blending weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum KernelKind {
    #[default]
    Compact,
    /// Exponential with `r² = m k / EXPONENTIAL_CUTOFF²`, truncated at `s = m k`.
    Exponential,
}

impl KernelKind {
    #[inline]
    pub fn weight(self, s: f64, params: &KernelParams) -> f64 {
        match self {
            KernelKind::Compact => eval_compact(s, params),
            KernelKind::Exponential => {
                let support = params.support_radius_sq();
                if s < support {
                    (-s * EXPONENTIAL_CUTOFF * EXPONENTIAL_CUTOFF / support).exp()
                } else {
                    0.0
                }
            }
        }
    }

    pub fn eval_with_grads(self, s: f64, params: &KernelParams) -> KernelEval {
        match self {
            KernelKind::Compact => {
                let Some(b) = interior_base(s, params) else {
                    return KernelEval::default();
                };
                let (k, m) = (params.k, params.m);
                let poly = 2.0 * s / k + 1.0;
                let b_lo = pow_unit(b, 2.0 * m - 1.0);
                let b_hi = b_lo * b;
                let value = b_hi * poly;
                let d_m = if value == 0.0 {
                    0.0
                } else {
                    value * 2.0 * (b.ln() + s / (k * m * b))
                };
                KernelEval {
                    value,
                    d_s: (2.0 / k) * (b_hi - b_lo * poly),
                    d_k: (2.0 * s / (k * k)) * (b_lo * poly - b_hi),
                    d_m,
                }
            }
            KernelKind::Exponential => {
                let support = params.support_radius_sq();
                if s >= support {
                    return KernelEval::default();
                }
                let (k, m) = (params.k, params.m);
                let c2 = EXPONENTIAL_CUTOFF * EXPONENTIAL_CUTOFF;
                let value = (-s * c2 / support).exp();
                KernelEval {
                    value,
                    d_s: -c2 / support * value,
                    d_k: value * s * c2 / (m * k * k),
                    d_m: value * s * c2 / (m * m * k),
                }
            }
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelKind::Compact => "compact",
            KernelKind::Exponential => "exponential",
        })
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compact" => Ok(KernelKind::Compact),
            "exponential" | "exp" => Ok(KernelKind::Exponential),
            other => Err(Error::invalid(format!("unknown kernel `{other}`"))),
        }
    }
}
