//! Monte Carlo studies of the drift estimators and their persistence.
//!
//! Every replication is keyed by `(master_seed, replication id, mode)`, where
//! the replication id packs the sweep point index into the upper 32 bits. The
//! work for one replication is streamed mode by mode through a reusable path
//! buffer, so memory stays at one fine path per worker.

use crate::estimators::{
    continuous_mode_contribution, discrete_mode_contribution, mode_decomposition, normalize_error,
    theoretical_std, weight_decomposition, DecompositionTerms, EstimateError, EstimatorKind,
    NumeratorMode, Quadrature, RatioAccumulator,
};
use crate::simulator::{simulate_mode, Provenance, SimError, SimGrid};
use crate::spectral::{build_eigensequence, fisher_information, EigenSequence, ModelParams, SpectralError};
use crate::stats::{empirical_moments, ks_test, loglog_slope, KsResult, SlopeFit, StatsError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

/// Fraction of failed replications at a sweep point above which a run aborts.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

/// Below this many successful replications the variance–Fisher product is
/// flagged as low precision.
pub const LOW_PRECISION_REPLICATIONS: usize = 100;

pub const DEFAULT_OVERSAMPLE: usize = 8;
pub const DEFAULT_REPLICATIONS: usize = 100;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("{failed} of {total} replications failed at N={modes}, M={observations}, T={horizon}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        modes: usize,
        observations: usize,
        horizon: f64,
    },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("could not build thread pool: {0}")]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),
}

fn invalid(field: &str, reason: impl Into<String>) -> ExperimentError {
    ExperimentError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentKind {
    #[serde(rename = "normality")]
    Normality,
    #[serde(rename = "consistency")]
    Consistency,
    #[serde(rename = "consistency_fixed_MT", alias = "consistency_fixed_mt")]
    ConsistencyFixedMt,
    #[serde(rename = "rates")]
    Rates,
    #[serde(rename = "fisher")]
    Fisher,
}

impl ExperimentKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "normality" => Some(Self::Normality),
            "consistency" => Some(Self::Consistency),
            "consistency_fixed_MT" | "consistency_fixed_mt" => Some(Self::ConsistencyFixedMt),
            "rates" => Some(Self::Rates),
            "fisher" => Some(Self::Fisher),
            _ => None,
        }
    }
}

/// Which estimators a normality run evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorChoice {
    #[default]
    Discrete,
    Continuous,
    Both,
}

impl EstimatorChoice {
    fn includes(self, kind: EstimatorKind) -> bool {
        matches!(
            (self, kind),
            (Self::Both, _)
                | (Self::Discrete, EstimatorKind::Discrete)
                | (Self::Continuous, EstimatorKind::Continuous)
        )
    }
}

/// One `(N, M, T)` coordinate. For `rates` runs `M` is the fine step count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    #[serde(rename = "N")]
    pub modes: usize,
    #[serde(rename = "M")]
    pub observations: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
}

impl SweepPoint {
    pub fn new(modes: usize, observations: usize, horizon: f64) -> Self {
        Self {
            modes,
            observations,
            horizon,
        }
    }
}

/// Hypothesis-condition quantities at one sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionValues {
    /// `T² N^{4β/d - 1} / M²`
    pub consistency: f64,
    /// `T³ N^{6β/d} / M²`
    pub normality_cubic: f64,
    /// `T N^{2β/d} / M`
    pub normality_linear: f64,
}

impl ConditionValues {
    pub fn new(params: &ModelParams, modes: usize, observations: usize, horizon: f64) -> Self {
        let d = params.dimension as f64;
        let b = params.beta;
        let n = modes as f64;
        let m = observations as f64;
        let t = horizon;
        Self {
            consistency: t * t * n.powf(4.0 * b / d - 1.0) / (m * m),
            normality_cubic: t.powi(3) * n.powf(6.0 * b / d) / (m * m),
            normality_linear: t * n.powf(2.0 * b / d) / m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub id: String,
    pub kind: ExperimentKind,
    pub model: ModelParams,
    pub sweep: Vec<SweepPoint>,
    /// Coarse observation counts for `rates`; each divides the fine step count.
    pub ladder: Vec<usize>,
    pub replications: usize,
    pub master_seed: u64,
    pub oversample: usize,
    pub estimator: EstimatorChoice,
    pub numerator: NumeratorMode,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn new(id: impl Into<String>, kind: ExperimentKind, model: ModelParams, sweep: Vec<SweepPoint>) -> Self {
        Self {
            id: id.into(),
            kind,
            model,
            sweep,
            ladder: Vec::new(),
            replications: DEFAULT_REPLICATIONS,
            master_seed: 0,
            oversample: DEFAULT_OVERSAMPLE,
            estimator: EstimatorChoice::default(),
            numerator: NumeratorMode::default(),
            output_dir: PathBuf::from("results"),
        }
    }

    /// Validates the model and the sweep; returns human-readable warnings.
    pub fn validate(&self) -> Result<Vec<String>, ExperimentError> {
        let mut warnings: Vec<String> = match self.model.validate() {
            Ok(w) => w.iter().map(ToString::to_string).collect(),
            Err(SpectralError::InvalidParameter { field, reason }) => {
                return Err(invalid(&format!("model.{field}"), reason))
            }
            Err(SpectralError::UnsupportedDimension(d)) => {
                return Err(invalid("model.dimension", format!("unsupported dimension {d}")))
            }
            Err(e) => return Err(e.into()),
        };
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
            || self.id.starts_with('.')
        {
            return Err(invalid(
                "experiment.id",
                "must be a nonempty file-name component of [A-Za-z0-9_.-]",
            ));
        }
        if self.replications == 0 {
            return Err(invalid("experiment.replications", "must be at least 1"));
        }
        if self.oversample == 0 {
            return Err(invalid("grid.oversample", "must be at least 1"));
        }
        if self.sweep.is_empty() {
            return Err(invalid("grid.sweep", "must contain at least one point"));
        }
        if self.sweep.len() >= 1 << 32 {
            return Err(invalid("grid.sweep", "too many points"));
        }
        for (i, p) in self.sweep.iter().enumerate() {
            if p.modes == 0 {
                return Err(invalid(&format!("grid.sweep[{i}].N"), "must be at least 1"));
            }
            let oversample = if self.kind == ExperimentKind::Rates { 1 } else { self.oversample };
            SimGrid::new(p.horizon, p.observations, oversample)
                .map_err(|e| invalid(&format!("grid.sweep[{i}]"), e.to_string()))?;
        }
        match self.kind {
            ExperimentKind::Rates => {
                if self.ladder.len() < 4 {
                    return Err(invalid("grid.ladder", "rates needs at least 4 levels"));
                }
                for p in &self.sweep {
                    for &m in &self.ladder {
                        if m == 0 || p.observations % m != 0 || p.observations / m < 2 {
                            return Err(invalid(
                                "grid.ladder",
                                format!(
                                    "level {m} must divide the fine step count {} with a factor of at least 2",
                                    p.observations
                                ),
                            ));
                        }
                    }
                }
            }
            ExperimentKind::ConsistencyFixedMt => {
                let d = self.model.dimension as f64;
                if 4.0 * self.model.beta >= d {
                    warnings.push(format!(
                        "fixed-(M,T) consistency needs 4β<d; here 4β={} and d={}",
                        4.0 * self.model.beta,
                        self.model.dimension
                    ));
                }
                let first = (self.sweep[0].observations, self.sweep[0].horizon);
                if self.sweep.iter().any(|p| (p.observations, p.horizon) != first) {
                    warnings.push("sweep varies M or T in a fixed-(M,T) study".to_string());
                }
            }
            _ => {}
        }
        Ok(warnings)
    }

    fn max_modes(&self) -> usize {
        self.sweep.iter().map(|p| p.modes).max().unwrap_or(0)
    }

    fn grid_for(&self, point: &SweepPoint) -> Result<SimGrid, SimError> {
        match self.kind {
            ExperimentKind::Rates => SimGrid::new(point.horizon, point.observations, 1),
            _ => SimGrid::new(point.horizon, point.observations, self.oversample),
        }
    }

    /// Estimators whose records a run produces.
    fn estimators(&self) -> Vec<EstimatorKind> {
        match self.kind {
            ExperimentKind::Normality => [EstimatorKind::Continuous, EstimatorKind::Discrete]
                .into_iter()
                .filter(|k| self.estimator.includes(*k))
                .collect(),
            ExperimentKind::Fisher => vec![EstimatorKind::Continuous],
            _ => vec![EstimatorKind::Discrete],
        }
    }
}

/// Replication id used in stream keys: point index in the upper 32 bits.
pub fn replication_id(point_index: usize, replication: usize) -> u64 {
    ((point_index as u64) << 32) | replication as u64
}

/// One estimator evaluation in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub experiment_id: String,
    #[serde(rename = "N")]
    pub modes: usize,
    #[serde(rename = "M")]
    pub observations: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub replication: usize,
    pub estimator: EstimatorKind,
    /// `None` for a failed (degenerate) replication
    pub theta_hat: Option<f64>,
    pub z_score: Option<f64>,
    #[serde(rename = "Y_coarse")]
    pub y_coarse: Option<f64>,
    #[serde(rename = "Y_fine")]
    pub y_fine: Option<f64>,
    #[serde(rename = "I_coarse")]
    pub i_coarse: Option<f64>,
    #[serde(rename = "I_fine")]
    pub i_fine: Option<f64>,
    #[serde(rename = "V")]
    pub v: Option<f64>,
    pub seed: u64,
    #[serde(skip)]
    pub wall_time: f64,
}

impl ReplicationRecord {
    pub fn terms(&self) -> Option<DecompositionTerms> {
        Some(DecompositionTerms {
            y_coarse: self.y_coarse?,
            y_fine: self.y_fine?,
            i_coarse: self.i_coarse?,
            i_fine: self.i_fine?,
            v: self.v?,
        })
    }

    fn sort_key(&self) -> (usize, usize, u64, usize, EstimatorKind) {
        (self.modes, self.observations, self.horizon.to_bits(), self.replication, self.estimator)
    }
}

/// Sorts records by `(N, M, T, replication, estimator)`.
pub fn sort_records(records: &mut [ReplicationRecord]) {
    records.sort_by_key(ReplicationRecord::sort_key);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    #[serde(rename = "N")]
    pub modes: usize,
    #[serde(rename = "M")]
    pub observations: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub estimator: EstimatorKind,
    pub successes: usize,
    pub failures: usize,
    pub mean: f64,
    pub bias: f64,
    pub rmse: f64,
    /// unbiased sample variance of the estimates
    pub empirical_variance: f64,
    pub empirical_std: f64,
    pub theoretical_std: f64,
    pub z_mean: f64,
    pub z_std: f64,
    pub ks: Option<KsResult>,
    /// `insufficient-sample`, or `degenerate` when every z-score coincides
    pub ks_note: Option<String>,
    pub fisher_information: f64,
    pub variance_fisher_product: f64,
    pub low_precision: bool,
    pub conditions: ConditionValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateLevel {
    #[serde(rename = "M")]
    pub observations: usize,
    pub samples: usize,
    /// mean of `(Y_coarse - Y_fine)²`
    pub y_discrepancy: f64,
    pub y_standard_error: f64,
    /// mean of `(I_coarse - I_fine)²`
    pub i_discrepancy: f64,
    pub i_standard_error: f64,
    /// mean of `V²`
    pub v_square: f64,
    pub v_standard_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub fit: Option<SlopeFit>,
    /// reason the fit was skipped
    pub skipped: Option<String>,
    pub bound_exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    #[serde(rename = "N")]
    pub modes: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub fine_steps: usize,
    pub levels: Vec<RateLevel>,
    pub y: RateFit,
    pub i: RateFit,
    pub v: RateFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub experiment_id: String,
    pub kind: ExperimentKind,
    pub master_seed: u64,
    pub replications: usize,
    pub oversample: usize,
    pub threads: usize,
    pub warnings: Vec<String>,
    pub points: Vec<PointSummary>,
    pub rates: Vec<RateSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<ReplicationRecord>,
    pub summary: SummaryTable,
}

/// Simulates one replication at one sweep point and evaluates every requested
/// estimator.
fn run_replication(
    config: &ExperimentConfig,
    eigs: &EigenSequence,
    point_index: usize,
    replication: usize,
) -> Result<Vec<ReplicationRecord>, SimError> {
    let started = Instant::now();
    let point = config.sweep[point_index];
    let params = &config.model;
    let grid = config.grid_for(&point)?;
    let lambdas = eigs.leading(point.modes)?;
    let provenance = Provenance {
        master_seed: config.master_seed,
        replication: replication_id(point_index, replication),
    };
    let estimators = config.estimators();
    let want_terms = config.kind == ExperimentKind::Rates;
    let levels: Vec<usize> = if want_terms {
        config.ladder.clone()
    } else {
        vec![point.observations]
    };

    let mut path = vec![0.0; grid.fine_len()];
    let mut increments = if want_terms { vec![0.0; grid.fine_steps()] } else { Vec::new() };
    let mut discrete = vec![RatioAccumulator::default(); levels.len()];
    let mut continuous = RatioAccumulator::default();
    let mut terms = vec![DecompositionTerms::default(); levels.len()];

    for (k, &lambda) in lambdas.iter().enumerate() {
        simulate_mode(
            params,
            lambda,
            params.initial_value(k),
            &grid,
            provenance.key(k),
            &mut path,
            want_terms.then_some(&mut increments[..]),
        )?;
        for (level, &m) in levels.iter().enumerate() {
            let stride = grid.fine_steps() / m;
            let coarse_step = point.horizon / m as f64;
            if estimators.contains(&EstimatorKind::Discrete) {
                let (n, d) = discrete_mode_contribution(params, lambda, &path, stride, coarse_step);
                discrete[level].add(n, d);
            }
            if want_terms {
                let raw = mode_decomposition(&path, &increments, stride, grid.fine_step());
                terms[level] += weight_decomposition(params, lambda, raw);
            }
        }
        if estimators.contains(&EstimatorKind::Continuous) {
            let (n, d) = continuous_mode_contribution(
                params,
                lambda,
                &path,
                grid.fine_step(),
                config.numerator,
                Quadrature::Trapezoid,
            );
            continuous.add(n, d);
        }
    }

    let wall_time = started.elapsed().as_secs_f64();
    let record = |observations: usize, kind: EstimatorKind, acc: &RatioAccumulator, terms: Option<DecompositionTerms>| {
        let theta_hat = acc.estimate().ok();
        ReplicationRecord {
            experiment_id: config.id.clone(),
            modes: point.modes,
            observations,
            horizon: point.horizon,
            replication,
            estimator: kind,
            theta_hat,
            z_score: theta_hat.map(|t| normalize_error(t, params, eigs.varpi(), point.modes, point.horizon)),
            y_coarse: terms.map(|t| t.y_coarse),
            y_fine: terms.map(|t| t.y_fine),
            i_coarse: terms.map(|t| t.i_coarse),
            i_fine: terms.map(|t| t.i_fine),
            v: terms.map(|t| t.v),
            seed: config.master_seed,
            wall_time,
        }
    };

    let mut out = Vec::new();
    for kind in estimators {
        match kind {
            EstimatorKind::Continuous => {
                out.push(record(point.observations, kind, &continuous, None));
            }
            EstimatorKind::Discrete => {
                for (level, &m) in levels.iter().enumerate() {
                    out.push(record(m, kind, &discrete[level], want_terms.then_some(terms[level])));
                }
            }
        }
    }
    Ok(out)
}

/// Runs every replication of every sweep point on the current rayon pool.
fn simulate_records(config: &ExperimentConfig, eigs: &EigenSequence) -> Result<Vec<ReplicationRecord>, ExperimentError> {
    let jobs: Vec<(usize, usize)> = (0..config.sweep.len())
        .flat_map(|p| (0..config.replications).map(move |r| (p, r)))
        .collect();
    let batches: Vec<Vec<ReplicationRecord>> = jobs
        .par_iter()
        .map(|&(p, r)| run_replication(config, eigs, p, r))
        .collect::<Result<_, SimError>>()?;
    Ok(batches.into_iter().flatten().collect())
}

/// Runs the study named by `config.kind`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    let warnings = config.validate()?;
    let eigs = build_eigensequence(config.model.dimension, config.max_modes())?;
    let records = simulate_records(config, &eigs)?;
    let summary = summarize(config, &records, rayon::current_num_threads(), warnings)?;
    for p in &summary.points {
        let total = p.successes + p.failures;
        if p.failures as f64 > MAX_FAILURE_FRACTION * total as f64 {
            return Err(ExperimentError::TooManyFailures {
                failed: p.failures,
                total,
                modes: p.modes,
                observations: p.observations,
                horizon: p.horizon,
            });
        }
    }
    Ok(ExperimentOutput { records, summary })
}

/// Runs on a dedicated pool of `threads` workers (all cores when `None`).
pub fn run_experiment_with_threads(
    config: &ExperimentConfig,
    threads: Option<usize>,
) -> Result<ExperimentOutput, ExperimentError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    builder.build()?.install(|| run_experiment(config))
}

fn check_kind(config: &ExperimentConfig, allowed: &[ExperimentKind]) -> Result<(), ExperimentError> {
    if allowed.contains(&config.kind) {
        Ok(())
    } else {
        Err(invalid("experiment.kind", format!("{:?} is not valid for this study", config.kind)))
    }
}

/// Asymptotic normality of the z-scores.
pub fn run_normality(config: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    check_kind(config, &[ExperimentKind::Normality])?;
    run_experiment(config)
}

/// RMSE of θ̃ along a sweep, jointly in `(N, M, T)` or in `N` alone.
pub fn run_consistency(config: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    check_kind(config, &[ExperimentKind::Consistency, ExperimentKind::ConsistencyFixedMt])?;
    run_experiment(config)
}

/// Coarse-grid discrepancies of Y, I and V against a fixed fine grid.
pub fn run_rate_verification(config: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    check_kind(config, &[ExperimentKind::Rates])?;
    run_experiment(config)
}

/// Variance of θ̂ times the exact Fisher information.
pub fn run_fisher_efficiency(config: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    check_kind(config, &[ExperimentKind::Fisher])?;
    run_experiment(config)
}

fn mean_and_standard_error(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn point_summary(
    config: &ExperimentConfig,
    eigs: &EigenSequence,
    point: &SweepPoint,
    observations: usize,
    estimator: EstimatorKind,
    records: &[&ReplicationRecord],
) -> Result<PointSummary, ExperimentError> {
    let params = &config.model;
    let thetas: Vec<f64> = records.iter().filter_map(|r| r.theta_hat).collect();
    let zs: Vec<f64> = records.iter().filter_map(|r| r.z_score).collect();
    let successes = thetas.len();
    let failures = records.len() - successes;
    let fisher = fisher_information(params, eigs, point.modes, point.horizon)?;
    let nan = f64::NAN;
    let (mean, empirical_variance, rmse) = if successes == 0 {
        (nan, nan, nan)
    } else {
        let n = successes as f64;
        let mean = thetas.iter().sum::<f64>() / n;
        let variance = if successes >= 2 {
            empirical_moments(&thetas)?.variance
        } else {
            nan
        };
        let mse = thetas.iter().map(|t| (t - params.theta0).powi(2)).sum::<f64>() / n;
        (mean, variance, mse.sqrt())
    };
    let (z_mean, z_std) = if zs.len() >= 2 {
        let m = empirical_moments(&zs)?;
        (m.mean, m.variance.sqrt())
    } else {
        (zs.first().copied().unwrap_or(nan), nan)
    };
    let (ks, ks_note) = if zs.len() < 2 {
        (None, Some("insufficient-sample".to_string()))
    } else {
        let ks = ks_test(&zs)?;
        let degenerate = zs.iter().all(|z| *z == zs[0]);
        (Some(ks), degenerate.then(|| "degenerate".to_string()))
    };
    Ok(PointSummary {
        modes: point.modes,
        observations,
        horizon: point.horizon,
        estimator,
        successes,
        failures,
        mean,
        bias: mean - params.theta0,
        rmse,
        empirical_variance,
        empirical_std: empirical_variance.sqrt(),
        theoretical_std: theoretical_std(params, eigs.varpi(), point.modes, point.horizon),
        z_mean,
        z_std,
        ks,
        ks_note,
        fisher_information: fisher,
        variance_fisher_product: empirical_variance * fisher,
        low_precision: successes < LOW_PRECISION_REPLICATIONS,
        conditions: ConditionValues::new(params, point.modes, observations, point.horizon),
    })
}

fn rate_fit(points: Vec<(f64, f64)>, bound_exponent: f64) -> RateFit {
    if points.iter().all(|(_, y)| *y == 0.0) {
        return RateFit {
            fit: None,
            skipped: Some("identically zero discrepancy".to_string()),
            bound_exponent,
        };
    }
    match loglog_slope(&points) {
        Ok(fit) => RateFit {
            fit: Some(fit),
            skipped: None,
            bound_exponent,
        },
        Err(e) => RateFit {
            fit: None,
            skipped: Some(e.to_string()),
            bound_exponent,
        },
    }
}

fn rate_summary(point: &SweepPoint, ladder: &[usize], records: &[&ReplicationRecord]) -> RateSummary {
    let mut levels = Vec::new();
    for &m in ladder {
        let terms: Vec<DecompositionTerms> = records
            .iter()
            .filter(|r| r.observations == m)
            .filter_map(|r| r.terms())
            .collect();
        let y: Vec<f64> = terms.iter().map(|t| (t.y_coarse - t.y_fine).powi(2)).collect();
        let i: Vec<f64> = terms.iter().map(|t| (t.i_coarse - t.i_fine).powi(2)).collect();
        let v: Vec<f64> = terms.iter().map(|t| t.v * t.v).collect();
        let (y_mean, y_se) = mean_and_standard_error(&y);
        let (i_mean, i_se) = mean_and_standard_error(&i);
        let (v_mean, v_se) = mean_and_standard_error(&v);
        levels.push(RateLevel {
            observations: m,
            samples: terms.len(),
            y_discrepancy: y_mean,
            y_standard_error: y_se,
            i_discrepancy: i_mean,
            i_standard_error: i_se,
            v_square: v_mean,
            v_standard_error: v_se,
        });
    }
    let series = |f: fn(&RateLevel) -> f64| -> Vec<(f64, f64)> {
        levels.iter().map(|l| (l.observations as f64, f(l))).collect()
    };
    RateSummary {
        modes: point.modes,
        horizon: point.horizon,
        fine_steps: point.observations,
        y: rate_fit(series(|l| l.y_discrepancy), -1.0),
        i: rate_fit(series(|l| l.i_discrepancy), -2.0),
        v: rate_fit(series(|l| l.v_square), -2.0),
        levels,
    }
}

/// Aggregates records into a summary. Depends only on the config and the
/// record contents, so it can be recomputed from a parsed CSV.
pub fn summarize(
    config: &ExperimentConfig,
    records: &[ReplicationRecord],
    threads: usize,
    warnings: Vec<String>,
) -> Result<SummaryTable, ExperimentError> {
    let eigs = build_eigensequence(config.model.dimension, config.max_modes())?;
    let mut points = Vec::new();
    let mut rates = Vec::new();
    for point in &config.sweep {
        let at_point: Vec<&ReplicationRecord> = records
            .iter()
            .filter(|r| r.modes == point.modes && r.horizon == point.horizon)
            .collect();
        if config.kind == ExperimentKind::Rates {
            for &m in &config.ladder {
                let level: Vec<&ReplicationRecord> =
                    at_point.iter().copied().filter(|r| r.observations == m).collect();
                points.push(point_summary(config, &eigs, point, m, EstimatorKind::Discrete, &level)?);
            }
            rates.push(rate_summary(point, &config.ladder, &at_point));
        } else {
            for kind in config.estimators() {
                let group: Vec<&ReplicationRecord> = at_point
                    .iter()
                    .copied()
                    .filter(|r| r.observations == point.observations && r.estimator == kind)
                    .collect();
                points.push(point_summary(config, &eigs, point, point.observations, kind, &group)?);
            }
        }
    }
    Ok(SummaryTable {
        experiment_id: config.id.clone(),
        kind: config.kind,
        master_seed: config.master_seed,
        replications: config.replications,
        oversample: config.oversample,
        threads,
        warnings,
        points,
        rates,
    })
}

pub fn records_path(output_dir: &Path, experiment_id: &str) -> PathBuf {
    output_dir.join(format!("{experiment_id}_records.csv"))
}

pub fn summary_path(output_dir: &Path, experiment_id: &str) -> PathBuf {
    output_dir.join(format!("{experiment_id}_summary.json"))
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    file.write_all(bytes).map_err(io_err(&tmp))?;
    file.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn records_to_csv(records: &[ReplicationRecord]) -> Result<Vec<u8>, csv::Error> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        writer.write_record([
            "experiment_id",
            "N",
            "M",
            "T",
            "replication",
            "estimator",
            "theta_hat",
            "z_score",
            "Y_coarse",
            "Y_fine",
            "I_coarse",
            "I_fine",
            "V",
            "seed",
        ])?;
    }
    for r in records {
        writer.serialize(r)?;
    }
    writer.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

pub fn read_records(path: &Path) -> Result<Vec<ReplicationRecord>, ExperimentError> {
    let csv_err = |source| ExperimentError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    reader
        .deserialize()
        .collect::<Result<Vec<ReplicationRecord>, _>>()
        .map_err(csv_err)
}

/// Writes `{id}_records.csv` (sorted by N, M, T, replication) and
/// `{id}_summary.json` into `output_dir`.
pub fn write_outputs(
    records: &[ReplicationRecord],
    summary: &SummaryTable,
    output_dir: &Path,
) -> Result<(PathBuf, PathBuf), ExperimentError> {
    fs::create_dir_all(output_dir).map_err(io_err(output_dir))?;
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let csv_path = records_path(output_dir, &summary.experiment_id);
    let bytes = records_to_csv(&sorted).map_err(|source| ExperimentError::Csv {
        path: csv_path.clone(),
        source,
    })?;
    write_atomic(&csv_path, &bytes)?;
    let json_path = summary_path(output_dir, &summary.experiment_id);
    let json = serde_json::to_vec_pretty(summary)
        .map_err(|e| io_err(&json_path)(io::Error::new(io::ErrorKind::InvalidData, e)))?;
    write_atomic(&json_path, &json)?;
    Ok((csv_path, json_path))
}
