//! Drift estimators and the pieces of their error decomposition.
//!
//! The discretized estimator is
//!
//! ```text
//! θ̃ = - Σ_k λ_k^{2β+2γ} Σ_i u_k(t_{i-1}) (u_k(t_i) - u_k(t_{i-1}))
//!       / Σ_k λ_k^{4β+2γ} Σ_i u_k²(t_{i-1}) Δt
//! ```
//!
//! and the continuous-time estimator θ̂ replaces both sums by integrals, which
//! are realized on the fine simulation grid. Per-mode sums are exposed so the
//! experiment harness can stream one mode at a time.

use crate::simulator::{simulate_mode, ObservationMatrix, PathEnsemble, Provenance, SimError};
use crate::spectral::{EigenSequence, ModelParams, SpectralError};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("zero denominator: every observed pre-terminal value is zero (degenerate sample)")]
    ZeroDenominator,
    #[error("ensemble has no stream provenance; Brownian increments are unavailable")]
    MissingProvenance,
    #[error("oversample factor F = {0} leaves no fine sub-grid; need F >= 2")]
    InsufficientOversampling(usize),
    #[error("observation matrix has {rows} modes but {requested} were requested")]
    ShapeMismatch { rows: usize, requested: usize },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Continuous,
    Discrete,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Continuous => "continuous",
            Self::Discrete => "discrete",
        })
    }
}

/// How `∫₀ᵀ u_k du_k` is evaluated for θ̂.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumeratorMode {
    /// `½(u²(T) - u²(0) - σ²λ^{-2γ}T)`
    #[default]
    ItoIdentity,
    /// left-point sum over the fine grid
    FineRiemann,
}

/// Quadrature of `∫₀ᵀ u_k² dt` on the fine grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    #[default]
    Trapezoid,
    LeftPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DecompositionTerms {
    pub y_coarse: f64,
    pub y_fine: f64,
    pub i_coarse: f64,
    pub i_fine: f64,
    pub v: f64,
}

impl DecompositionTerms {
    /// `(θ₀V - σY) / I`, the right-hand side of the decomposition of `θ̃ - θ₀`.
    pub fn predicted_error(&self, params: &ModelParams) -> f64 {
        (params.theta0 * self.v - params.sigma * self.y_coarse) / self.i_coarse
    }
}

impl std::ops::AddAssign for DecompositionTerms {
    fn add_assign(&mut self, rhs: Self) {
        self.y_coarse += rhs.y_coarse;
        self.y_fine += rhs.y_fine;
        self.i_coarse += rhs.i_coarse;
        self.i_fine += rhs.i_fine;
        self.v += rhs.v;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub kind: EstimatorKind,
    pub theta_hat: f64,
    pub z_score: f64,
    pub modes: usize,
    pub observations: usize,
    pub horizon: f64,
    pub terms: Option<DecompositionTerms>,
    pub provenance: Option<Provenance>,
}

/// `λ^{2β+2γ}` and `λ^{4β+2γ}`.
#[inline]
pub fn estimator_weights(params: &ModelParams, lambda: f64) -> (f64, f64) {
    let b2 = 2.0 * params.beta;
    let g2 = 2.0 * params.gamma;
    (lambda.powf(b2 + g2), lambda.powf(2.0 * b2 + g2))
}

/// Left-point sums of one mode sampled every `stride` nodes of `row`:
/// `(Σ u_{i-1}(u_i - u_{i-1}), Σ u_{i-1}²)`.
pub fn left_point_sums(row: &[f64], stride: usize) -> (f64, f64) {
    let mut cross = 0.0;
    let mut square = 0.0;
    let mut prev = row[0];
    for &next in row.iter().step_by(stride).skip(1) {
        cross += prev * (next - prev);
        square += prev * prev;
        prev = next;
    }
    (cross, square)
}

/// Trapezoidal `∫ u²` over a uniformly spaced row.
pub fn trapezoid_square(row: &[f64], step: f64) -> f64 {
    let (first, last) = (row[0], row[row.len() - 1]);
    let inner: f64 = row.iter().map(|u| u * u).sum();
    step * (inner - 0.5 * (first * first + last * last))
}

/// Accumulates weighted numerator and denominator over modes.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RatioAccumulator {
    pub numerator: f64,
    pub denominator: f64,
}

impl RatioAccumulator {
    pub fn add(&mut self, numerator: f64, denominator: f64) {
        self.numerator += numerator;
        self.denominator += denominator;
    }

    pub fn estimate(&self) -> Result<f64, EstimateError> {
        if self.denominator > 0.0 && self.denominator.is_finite() {
            Ok(-self.numerator / self.denominator)
        } else {
            Err(EstimateError::ZeroDenominator)
        }
    }
}

/// Weighted contribution of one mode to θ̃, reading its coarse nodes every
/// `stride` entries of `row`.
pub fn discrete_mode_contribution(
    params: &ModelParams,
    lambda: f64,
    row: &[f64],
    stride: usize,
    coarse_step: f64,
) -> (f64, f64) {
    let (w_num, w_den) = estimator_weights(params, lambda);
    let (cross, square) = left_point_sums(row, stride);
    (w_num * cross, w_den * (square * coarse_step))
}

/// Weighted contribution of one fine-grid mode path to θ̂.
pub fn continuous_mode_contribution(
    params: &ModelParams,
    lambda: f64,
    row: &[f64],
    fine_step: f64,
    numerator: NumeratorMode,
    quadrature: Quadrature,
) -> (f64, f64) {
    let (w_num, w_den) = estimator_weights(params, lambda);
    let horizon = fine_step * (row.len() - 1) as f64;
    let (riemann, left_square) = left_point_sums(row, 1);
    let stochastic = match numerator {
        NumeratorMode::ItoIdentity => {
            let (u0, ut) = (row[0], row[row.len() - 1]);
            0.5 * (ut * ut - u0 * u0 - params.noise_scale(lambda).powi(2) * horizon)
        }
        NumeratorMode::FineRiemann => riemann,
    };
    let energy = match quadrature {
        Quadrature::Trapezoid => trapezoid_square(row, fine_step),
        Quadrature::LeftPoint => left_square * fine_step,
    };
    (w_num * stochastic, w_den * energy)
}

/// `Υ = (ϖ^β / ((4β/d + 2) θ₀))^{1/2}`
pub fn upsilon(params: &ModelParams, varpi: f64) -> f64 {
    let d = params.dimension as f64;
    (varpi.powf(params.beta) / ((4.0 * params.beta / d + 2.0) * params.theta0)).sqrt()
}

/// `Υ √T N^{β/d + 1/2}`, the inverse of the asymptotic standard deviation.
pub fn rate_normalizer(params: &ModelParams, varpi: f64, modes: usize, horizon: f64) -> f64 {
    let d = params.dimension as f64;
    upsilon(params, varpi) * horizon.sqrt() * (modes as f64).powf(params.beta / d + 0.5)
}

/// `z = Υ √T N^{β/d+1/2} (θ₀ - θ̂)`
pub fn normalize_error(theta_hat: f64, params: &ModelParams, varpi: f64, modes: usize, horizon: f64) -> f64 {
    rate_normalizer(params, varpi, modes, horizon) * (params.theta0 - theta_hat)
}

pub fn theoretical_std(params: &ModelParams, varpi: f64, modes: usize, horizon: f64) -> f64 {
    1.0 / rate_normalizer(params, varpi, modes, horizon)
}

/// Discretized MLE θ̃ from coarse observations.
pub fn mle_discrete(
    obs: &ObservationMatrix,
    params: &ModelParams,
    eigs: &EigenSequence,
) -> Result<EstimateRecord, EstimateError> {
    let lambdas = eigs.leading(obs.modes())?;
    let dt = obs.coarse_step();
    let mut acc = RatioAccumulator::default();
    for (row, &lambda) in obs.rows().zip(lambdas) {
        let (n, d) = discrete_mode_contribution(params, lambda, row, 1, dt);
        acc.add(n, d);
    }
    let theta_hat = acc.estimate()?;
    Ok(EstimateRecord {
        kind: EstimatorKind::Discrete,
        theta_hat,
        z_score: normalize_error(theta_hat, params, eigs.varpi(), obs.modes(), obs.horizon()),
        modes: obs.modes(),
        observations: obs.observations(),
        horizon: obs.horizon(),
        terms: None,
        provenance: None,
    })
}

/// Continuous-time MLE θ̂ with a trapezoidal denominator.
pub fn mle_continuous(
    ensemble: &PathEnsemble,
    params: &ModelParams,
    eigs: &EigenSequence,
    numerator: NumeratorMode,
) -> Result<EstimateRecord, EstimateError> {
    mle_continuous_with(ensemble, params, eigs, numerator, Quadrature::Trapezoid)
}

pub fn mle_continuous_with(
    ensemble: &PathEnsemble,
    params: &ModelParams,
    eigs: &EigenSequence,
    numerator: NumeratorMode,
    quadrature: Quadrature,
) -> Result<EstimateRecord, EstimateError> {
    let lambdas = eigs.leading(ensemble.modes())?;
    let grid = ensemble.grid();
    let mut acc = RatioAccumulator::default();
    for (row, &lambda) in ensemble.rows().zip(lambdas) {
        let (n, d) = continuous_mode_contribution(params, lambda, row, grid.fine_step(), numerator, quadrature);
        acc.add(n, d);
    }
    let theta_hat = acc.estimate()?;
    Ok(EstimateRecord {
        kind: EstimatorKind::Continuous,
        theta_hat,
        z_score: normalize_error(theta_hat, params, eigs.varpi(), ensemble.modes(), grid.horizon()),
        modes: ensemble.modes(),
        observations: grid.observations(),
        horizon: grid.horizon(),
        terms: None,
        provenance: ensemble.provenance(),
    })
}

/// Unweighted Y/I/V pieces of one mode from its fine path and the Brownian
/// increments of each fine step. Coarse nodes are every `stride` fine nodes.
pub fn mode_decomposition(path: &[f64], increments: &[f64], stride: usize, fine_step: f64) -> DecompositionTerms {
    let coarse_step = fine_step * stride as f64;
    let mut terms = DecompositionTerms::default();
    for (block, incs) in path.windows(stride + 1).step_by(stride).zip(increments.chunks_exact(stride)) {
        let anchor = block[0];
        let mut dw = 0.0;
        for (u, inc) in block.iter().zip(incs) {
            terms.y_fine += u * inc;
            dw += inc;
        }
        terms.y_coarse += anchor * dw;
        terms.i_coarse += anchor * anchor * coarse_step;
        // trapezoid of ∫ (u - anchor) over the block; the first node contributes zero
        let inner: f64 = block[1..].iter().map(|u| u - anchor).sum();
        let drift = fine_step * (inner - 0.5 * (block[stride] - anchor));
        terms.v += anchor * drift;
    }
    terms.i_fine = trapezoid_square(path, fine_step);
    terms
}

/// Applies the `λ^{2β+γ}` and `λ^{4β+2γ}` weights to one mode's pieces.
pub fn weight_decomposition(params: &ModelParams, lambda: f64, raw: DecompositionTerms) -> DecompositionTerms {
    let w_y = lambda.powf(2.0 * params.beta + params.gamma);
    let (_, w_i) = estimator_weights(params, lambda);
    DecompositionTerms {
        y_coarse: w_y * raw.y_coarse,
        y_fine: w_y * raw.y_fine,
        i_coarse: w_i * raw.i_coarse,
        i_fine: w_i * raw.i_fine,
        v: w_i * raw.v,
    }
}

/// Y, I and V on the coarse grid with their fine-grid counterparts. Brownian
/// increments are replayed from the ensemble's streams.
pub fn decomposition_terms(
    ensemble: &PathEnsemble,
    params: &ModelParams,
    eigs: &EigenSequence,
) -> Result<DecompositionTerms, EstimateError> {
    let provenance = ensemble.provenance().ok_or(EstimateError::MissingProvenance)?;
    let grid = *ensemble.grid();
    if grid.oversample() < 2 {
        return Err(EstimateError::InsufficientOversampling(grid.oversample()));
    }
    let lambdas = eigs.leading(ensemble.modes())?;
    let mut replay = vec![0.0; grid.fine_len()];
    let mut increments = vec![0.0; grid.fine_steps()];
    let mut total = DecompositionTerms::default();
    for (k, (row, &lambda)) in ensemble.rows().zip(lambdas).enumerate() {
        simulate_mode(
            params,
            lambda,
            row[0],
            &grid,
            provenance.key(k),
            &mut replay,
            Some(&mut increments),
        )?;
        let raw = mode_decomposition(row, &increments, grid.oversample(), grid.fine_step());
        total += weight_decomposition(params, lambda, raw);
    }
    Ok(total)
}
