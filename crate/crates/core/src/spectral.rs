//! Model parameters, the Dirichlet Laplacian spectrum on `(0, π)^d`, and the
//! closed-form moments of the Fourier modes.
//!
//! Every mode `u_k` of the fractional stochastic heat equation is an
//! independent Ornstein–Uhlenbeck process with decay rate `θ₀ λ_k^{2β}` and
//! noise scale `σ λ_k^{-γ}`. The functions here evaluate its exact moments and
//! the Fisher information of the drift, which the rest of the crate uses as
//! reference values.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use thiserror::Error;

/// Largest supported spatial dimension.
pub const MAX_DIMENSION: usize = 4;

/// Upper bound on the number of eigenvalues a single enumeration may produce.
pub const MAX_EIGEN_COUNT: usize = 1 << 28;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("unsupported dimension {0} (supported: 1..={MAX_DIMENSION})")]
    UnsupportedDimension(usize),
    #[error("eigenvalue count must be at least 1")]
    EmptyCount,
    #[error("lattice enumeration for {count} eigenvalues overflows")]
    EnumerationOverflow { count: usize },
    #[error("invalid model parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("requested {requested} modes but only {available} eigenvalues are available")]
    NotEnoughEigenvalues { requested: usize, available: usize },
}

/// A violated asymptotic hypothesis. Reported, never fatal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HypothesisWarning {
    BetaNotAboveHalf,
    GammaNotAboveHalfDimension,
}

impl fmt::Display for HypothesisWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BetaNotAboveHalf => {
                write!(f, "hypothesis β>1/2 is violated; asymptotic results may not apply")
            }
            Self::GammaNotAboveHalfDimension => write!(
                f,
                "hypothesis γ>d/2 (well-posedness 2γ>d) is violated; asymptotic results may not apply"
            ),
        }
    }
}

/// Coefficients of `dU + θ(-Δ)^β U dt = σ Σ λ_k^{-γ} h_k dw_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub theta0: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub dimension: usize,
    /// Per-mode initial values `u_k(0)`; modes beyond the list start at zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_modes: Option<Vec<f64>>,
}

impl ModelParams {
    pub fn new(theta0: f64, beta: f64, gamma: f64, sigma: f64, dimension: usize) -> Self {
        Self {
            theta0,
            beta,
            gamma,
            sigma,
            dimension,
            initial_modes: None,
        }
    }

    pub fn with_initial_modes(mut self, values: Vec<f64>) -> Self {
        self.initial_modes = Some(values);
        self
    }

    /// Checks the hard constraints and returns the list of violated asymptotic
    /// hypotheses.
    pub fn validate(&self) -> Result<Vec<HypothesisWarning>, SpectralError> {
        fn bad(field: &'static str, reason: &str) -> SpectralError {
            SpectralError::InvalidParameter {
                field,
                reason: reason.to_string(),
            }
        }
        if !(self.theta0.is_finite() && self.theta0 > 0.0) {
            return Err(bad("theta0", "must be a finite positive number"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(bad("beta", "must be a finite positive number"));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(bad("gamma", "must be a finite nonnegative number"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(bad("sigma", "must be a finite nonnegative number"));
        }
        if self.dimension == 0 {
            return Err(bad("dimension", "must be at least 1"));
        }
        if self.dimension > MAX_DIMENSION {
            return Err(SpectralError::UnsupportedDimension(self.dimension));
        }
        if let Some(values) = &self.initial_modes {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(bad("initial_modes", "all values must be finite"));
            }
        }

        let mut warnings = Vec::new();
        if self.beta <= 0.5 {
            warnings.push(HypothesisWarning::BetaNotAboveHalf);
        }
        if 2.0 * self.gamma <= self.dimension as f64 {
            warnings.push(HypothesisWarning::GammaNotAboveHalfDimension);
        }
        Ok(warnings)
    }

    /// `u_k(0)` for the zero-based mode index.
    pub fn initial_value(&self, mode: usize) -> f64 {
        self.initial_modes
            .as_ref()
            .and_then(|v| v.get(mode).copied())
            .unwrap_or(0.0)
    }

    /// Drift rate `θ₀ λ^{2β}` of the mode with eigenvalue root `lambda`.
    pub fn decay_rate(&self, lambda: f64) -> f64 {
        self.theta0 * lambda.powf(2.0 * self.beta)
    }

    /// Diffusion scale `σ λ^{-γ}`.
    pub fn noise_scale(&self, lambda: f64) -> f64 {
        self.sigma * lambda.powf(-self.gamma)
    }
}

/// `1 - e^{-x}` without cancellation for small `x`.
#[inline]
pub fn one_minus_exp_neg(x: f64) -> f64 {
    -(-x).exp_m1()
}

/// `x - (1 - e^{-x})`, accurate down to tiny `x` where both terms nearly cancel.
pub fn exp_neg_remainder(x: f64) -> f64 {
    if x < 1e-2 {
        // alternating series x²/2 - x³/6 + x⁴/24 - ...
        let mut term = x * x / 2.0;
        let mut sum = 0.0f64;
        let mut n = 2.0;
        while term.abs() > 1e-18 * sum.abs().max(f64::MIN_POSITIVE) {
            sum += term;
            n += 1.0;
            term *= -x / n;
        }
        sum
    } else {
        x + (-x).exp_m1()
    }
}

/// Sorted eigenvalue roots `λ_k = √(-ν_k)` of the Dirichlet Laplacian on
/// `(0, π)^d`, with the Weyl constant of that box.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenSequence {
    dimension: usize,
    lambdas: Vec<f64>,
    varpi: f64,
}

impl EigenSequence {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn varpi(&self) -> f64 {
        self.varpi
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    /// The first `count` eigenvalue roots, or an error if fewer are stored.
    pub fn leading(&self, count: usize) -> Result<&[f64], SpectralError> {
        self.lambdas
            .get(..count)
            .ok_or(SpectralError::NotEnoughEigenvalues {
                requested: count,
                available: self.lambdas.len(),
            })
    }

    /// `λ_k² k^{-2/d}` at the one-based index `k`; tends to [`Self::varpi`].
    pub fn weyl_ratio(&self, k: usize) -> Option<f64> {
        let lambda = *self.lambdas.get(k.checked_sub(1)?)?;
        Some(lambda * lambda * (k as f64).powf(-2.0 / self.dimension as f64))
    }
}

fn check_dimension(dimension: usize) -> Result<(), SpectralError> {
    if (1..=MAX_DIMENSION).contains(&dimension) {
        Ok(())
    } else {
        Err(SpectralError::UnsupportedDimension(dimension))
    }
}

/// `ϖ = (2^d / V_d)^{2/d}` with `V_d` the volume of the unit ball in `R^d`.
pub fn weyl_constant(dimension: usize) -> Result<f64, SpectralError> {
    check_dimension(dimension)?;
    let unit_ball = match dimension {
        1 => 2.0,
        2 => PI,
        3 => 4.0 * PI / 3.0,
        4 => PI * PI / 2.0,
        _ => unreachable!(),
    };
    let d = dimension as f64;
    Ok((2f64.powi(dimension as i32) / unit_ball).powf(2.0 / d))
}

/// Number of positive integer tuples of length `dimension` with squared norm
/// at most `radius_sq`, saturating once `cap` is exceeded.
fn count_lattice_points(dimension: usize, radius_sq: u64, cap: u64) -> u64 {
    if dimension == 0 {
        return 1;
    }
    if dimension == 1 {
        return radius_sq.isqrt().min(cap.saturating_add(1));
    }
    let mut total = 0u64;
    let mut m = 1u64;
    while m * m <= radius_sq {
        total = total.saturating_add(count_lattice_points(dimension - 1, radius_sq - m * m, cap));
        if total > cap {
            return total;
        }
        m += 1;
    }
    total
}

fn push_lattice_points(
    dimension: usize,
    radius_sq: u64,
    prefix: &mut [u32; MAX_DIMENSION],
    depth: usize,
    partial: u64,
    out: &mut Vec<(u64, [u32; MAX_DIMENSION])>,
) {
    if depth == dimension {
        out.push((partial, *prefix));
        return;
    }
    let mut m = 1u64;
    while partial + m * m <= radius_sq {
        prefix[depth] = m as u32;
        push_lattice_points(dimension, radius_sq, prefix, depth + 1, partial + m * m, out);
        m += 1;
    }
    prefix[depth] = 0;
}

/// The first `count` values `√(m₁² + … + m_d²)` over positive integer tuples,
/// sorted, ties kept with multiplicity and ordered by lexicographic multi-index.
pub fn build_eigensequence(dimension: usize, count: usize) -> Result<EigenSequence, SpectralError> {
    check_dimension(dimension)?;
    if count == 0 {
        return Err(SpectralError::EmptyCount);
    }
    let overflow = SpectralError::EnumerationOverflow { count };
    if count > MAX_EIGEN_COUNT {
        return Err(overflow);
    }

    // Doubling search for a squared radius whose ball holds `count` points.
    let target = count as u64;
    let mut radius_sq = 1u64;
    while count_lattice_points(dimension, radius_sq, target) < target {
        radius_sq = radius_sq.checked_mul(2).ok_or(overflow.clone())?;
        if radius_sq > (u32::MAX as u64) {
            return Err(overflow);
        }
    }

    let mut points = Vec::new();
    let mut prefix = [0u32; MAX_DIMENSION];
    push_lattice_points(dimension, radius_sq, &mut prefix, 0, 0, &mut points);
    points.sort_unstable();
    points.truncate(count);

    Ok(EigenSequence {
        dimension,
        lambdas: points.iter().map(|&(n2, _)| (n2 as f64).sqrt()).collect(),
        varpi: weyl_constant(dimension)?,
    })
}

/// `Σ_{k ≤ count} λ_k^power`.
pub fn spectral_sum(eigs: &EigenSequence, power: f64, count: usize) -> Result<f64, SpectralError> {
    Ok(eigs.leading(count)?.iter().map(|l| l.powf(power)).sum())
}

/// `E u_k²(t)` for a mode started at zero.
pub fn second_moment(params: &ModelParams, lambda: f64, t: f64) -> f64 {
    let rate = params.decay_rate(lambda);
    params.sigma.powi(2) * lambda.powf(-2.0 * params.beta - 2.0 * params.gamma)
        * one_minus_exp_neg(2.0 * rate * t)
        / (2.0 * params.theta0)
}

/// `E u_k⁴(t) = 3 (E u_k²(t))²` for a mode started at zero.
pub fn fourth_moment(params: &ModelParams, lambda: f64, t: f64) -> f64 {
    let rate = params.decay_rate(lambda);
    let g = one_minus_exp_neg(2.0 * rate * t);
    3.0 * params.sigma.powi(4) * lambda.powf(-4.0 * params.beta - 4.0 * params.gamma) * g * g
        / (2.0 * params.theta0).powi(2)
}

/// `E u_k(t) u_k(s)` for a mode started at zero. Argument order is irrelevant.
pub fn covariance(params: &ModelParams, lambda: f64, t: f64, s: f64) -> f64 {
    let (t, s) = if t <= s { (t, s) } else { (s, t) };
    let rate = params.decay_rate(lambda);
    // e^{-a(s-t)} - e^{-a(s+t)} = e^{-a(s-t)} (1 - e^{-2at})
    params.sigma.powi(2) * lambda.powf(-2.0 * params.gamma - 2.0 * params.beta)
        * (-rate * (s - t)).exp()
        * one_minus_exp_neg(2.0 * rate * t)
        / (2.0 * params.theta0)
}

/// Exact Fisher information `𝓘_{N,T}` of the drift from `N` modes on `[0, T]`.
pub fn fisher_information(
    params: &ModelParams,
    eigs: &EigenSequence,
    modes: usize,
    horizon: f64,
) -> Result<f64, SpectralError> {
    let lambdas = eigs.leading(modes)?;
    let sum: f64 = lambdas
        .iter()
        .map(|&lambda| {
            let rate2 = 2.0 * params.decay_rate(lambda);
            // λ^{2β} (T - (1 - e^{-2aT}) / (2a)) with 2a = 2θ₀λ^{2β}
            lambda.powf(2.0 * params.beta) * exp_neg_remainder(rate2 * horizon) / rate2
        })
        .sum();
    Ok(sum / (2.0 * params.theta0))
}

/// Large-`N`, large-`T` equivalent `ϖ^β d T N^{2β/d+1} / ((4β + 2d) θ₀)`.
pub fn fisher_information_asymptotic(params: &ModelParams, varpi: f64, modes: usize, horizon: f64) -> f64 {
    let d = params.dimension as f64;
    let beta = params.beta;
    varpi.powf(beta) * d * horizon * (modes as f64).powf(2.0 * beta / d + 1.0)
        / ((4.0 * beta + 2.0 * d) * params.theta0)
}
