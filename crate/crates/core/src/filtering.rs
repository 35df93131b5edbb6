//! Stochastic preconditioning and Laplacian filtering of scalar fields.
//!
//! Both filters are Monte-Carlo estimators over Gaussian query offsets
//! `δ ~ N(0, αI)` (standard deviation `sqrt(α)`); perturbed queries are folded
//! back into the unit cube with a period-2 reflection. The blur estimate is the
//! sample mean of `f(R(q + δ))`; the Laplacian estimate reuses the same samples
//! with weights `‖δ‖²/α² - d/α`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::Vec3;

const DIM: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig {
    /// Noise covariance scale `α` (variance of each offset component).
    pub alpha: f64,
    /// Laplacian strength `λ`.
    pub lambda_lap: f64,
    /// Monte-Carlo samples per query.
    pub mc_samples: usize,
    /// Fraction of the run over which `α` decays before being switched off.
    pub anneal_fraction: f64,
    pub seed: u64,
    /// Scale the second Laplacian term by the dimension so affine fields are
    /// annihilated. `false` keeps the uncorrected `α⁻¹` coefficient.
    pub dim_corrected: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0025,
            lambda_lap: 0.8,
            mc_samples: 1,
            anneal_fraction: 1.0 / 3.0,
            seed: 0,
            dim_corrected: true,
        }
    }
}

impl FilterConfig {
    /// No perturbation, no Laplacian.
    pub fn disabled() -> Self {
        Self {
            alpha: 0.0,
            lambda_lap: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.lambda_lap.is_finite() && self.lambda_lap >= 0.0) {
            return Err(Error::invalid(format!("lambda_lap must be >= 0, got {}", self.lambda_lap)));
        }
        if self.mc_samples == 0 {
            return Err(Error::invalid("mc_samples must be >= 1"));
        }
        if !(self.anneal_fraction > 0.0 && self.anneal_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "anneal_fraction must lie in (0, 1], got {}",
                self.anneal_fraction
            )));
        }
        Ok(())
    }
}

/// Folds `x` into `[0, 1]` by mirroring with period 2.
pub fn reflect(x: f64) -> f64 {
    let m = x.rem_euclid(2.0);
    if m <= 1.0 {
        m
    } else {
        2.0 - m
    }
}

pub fn reflect_point(q: &Vec3) -> Vec3 {
    q.map(reflect)
}

/// Independent random stream for query `index` at optimization step `step`.
pub fn query_rng(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step << 32) ^ index);
    rng
}

/// Draws one offset `δ ~ N(0, αI)`.
pub fn sample_offset<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Vec3 {
    let sigma = alpha.sqrt();
    Vec3::new(
        rng.sample::<f64, _>(StandardNormal) * sigma,
        rng.sample::<f64, _>(StandardNormal) * sigma,
        rng.sample::<f64, _>(StandardNormal) * sigma,
    )
}

/// Per-sample Laplacian weight `‖δ‖²/α² - c/α`, with `c = 3` when dimension
/// corrected and `c = 1` otherwise.
#[inline]
pub fn laplacian_weight(offset: &Vec3, alpha: f64, dim_corrected: bool) -> f64 {
    let c = if dim_corrected { DIM } else { 1.0 };
    offset.norm_squared() / (alpha * alpha) - c / alpha
}

/// Monte-Carlo mean and its empirical standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

fn mean_and_error(terms: &[f64]) -> McEstimate {
    let n = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / n;
    let var = if terms.len() > 1 {
        terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    McEstimate {
        value: mean,
        std_error: (var / n).sqrt(),
    }
}

/// Gaussian-blurred field value at `q`. Exactly `field(q)` when `α = 0`.
pub fn blur_estimate<F, R>(field: F, q: &Vec3, cfg: &FilterConfig, rng: &mut R) -> f64
where
    F: Fn(&Vec3) -> f64,
    R: Rng + ?Sized,
{
    if cfg.alpha == 0.0 {
        return field(q);
    }
    let m = cfg.mc_samples.max(1);
    let mut acc = 0.0;
    for _ in 0..m {
        let delta = sample_offset(cfg.alpha, rng);
        acc += field(&reflect_point(&(q + delta)));
    }
    acc / m as f64
}

/// Laplacian-of-Gaussian filtered value at `q` with its standard error.
pub fn laplacian_estimate_with_error<F, R>(
    field: F,
    q: &Vec3,
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<McEstimate>
where
    F: Fn(&Vec3) -> f64,
    R: Rng + ?Sized,
{
    if !(cfg.alpha > 0.0) {
        return Err(Error::invalid("the Laplacian estimator needs alpha > 0"));
    }
    let terms: Vec<f64> = (0..cfg.mc_samples.max(1))
        .map(|_| {
            let delta = sample_offset(cfg.alpha, rng);
            laplacian_weight(&delta, cfg.alpha, cfg.dim_corrected) * field(&reflect_point(&(q + delta)))
        })
        .collect();
    Ok(mean_and_error(&terms))
}

pub fn laplacian_estimate<F, R>(field: F, q: &Vec3, cfg: &FilterConfig, rng: &mut R) -> Result<f64>
where
    F: Fn(&Vec3) -> f64,
    R: Rng + ?Sized,
{
    laplacian_estimate_with_error(field, q, cfg, rng).map(|e| e.value)
}

/// `Blur[f](q) + λ Lap[f](q)` from one shared set of samples.
pub fn filtered_field<F, R>(field: F, q: &Vec3, cfg: &FilterConfig, rng: &mut R) -> f64
where
    F: Fn(&Vec3) -> f64,
    R: Rng + ?Sized,
{
    if cfg.alpha == 0.0 {
        return field(q);
    }
    let m = cfg.mc_samples.max(1);
    let mut acc = 0.0;
    for _ in 0..m {
        let delta = sample_offset(cfg.alpha, rng);
        let w = 1.0 + cfg.lambda_lap * laplacian_weight(&delta, cfg.alpha, cfg.dim_corrected);
        acc += w * field(&reflect_point(&(q + delta)));
    }
    acc / m as f64
}

/// Noise scale at `step`: `α₀ exp(-5 t / T_a)` for `t < T_a`, then zero, where
/// `T_a = anneal_fraction · total_steps`.
pub fn anneal_alpha(step: usize, total_steps: usize, alpha0: f64, cfg: &FilterConfig) -> f64 {
    let t_anneal = cfg.anneal_fraction * total_steps as f64;
    let t = step as f64;
    if t >= t_anneal {
        0.0
    } else {
        alpha0 * (-5.0 * t / t_anneal).exp()
    }
}
