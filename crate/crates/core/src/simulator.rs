//! Exact-in-law simulation of the Fourier modes.
//!
//! Each mode is advanced with the exact Ornstein–Uhlenbeck transition over a
//! fine grid of `M·F` steps. Random numbers come from ChaCha streams keyed by
//! `(master_seed, replication, mode)`, so a mode's path depends only on its
//! key and never on how work is scheduled across threads.
//!
//! The Brownian increments driving a path are drawn from a second stream with
//! the same key. For a fine step `h` with decay `a`, the pair
//! `X = ∫₀ʰ e^{-a(h-r)} dw(r)` and `ΔW = w(h)` is bivariate Gaussian; the
//! path consumes `X` and the increment stream supplies `ΔW | X`. Paths are
//! therefore identical whether or not increments are requested.

use crate::spectral::{one_minus_exp_neg, EigenSequence, ModelParams, SpectralError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use thiserror::Error;

pub const DUMP_MAGIC: &[u8; 8] = b"SPDEOBS1";
pub const DUMP_HEADER_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error("buffer length {actual} does not match the grid ({expected})")]
    BufferLength { expected: usize, actual: usize },
    #[error("observation dump: {0}")]
    Dump(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Uniform observation grid on `[0, T]` with `M` coarse steps, each split into
/// `F` fine simulation steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimGrid {
    horizon: f64,
    observations: usize,
    oversample: usize,
}

impl SimGrid {
    pub fn new(horizon: f64, observations: usize, oversample: usize) -> Result<Self, SimError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(SimError::InvalidGrid(format!("horizon must be positive, got {horizon}")));
        }
        if observations == 0 {
            return Err(SimError::InvalidGrid("observation count M must be at least 1".into()));
        }
        if oversample == 0 {
            return Err(SimError::InvalidGrid("oversample F must be at least 1".into()));
        }
        observations
            .checked_mul(oversample)
            .and_then(|n| n.checked_add(1))
            .ok_or_else(|| SimError::InvalidGrid("M·F overflows".into()))?;
        Ok(Self {
            horizon,
            observations,
            oversample,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `M`
    pub fn observations(&self) -> usize {
        self.observations
    }

    /// `F`
    pub fn oversample(&self) -> usize {
        self.oversample
    }

    pub fn fine_steps(&self) -> usize {
        self.observations * self.oversample
    }

    /// Number of fine nodes, `M·F + 1`.
    pub fn fine_len(&self) -> usize {
        self.fine_steps() + 1
    }

    /// `Δt = T / M`
    pub fn coarse_step(&self) -> f64 {
        self.horizon / self.observations as f64
    }

    /// `δ = T / (M·F)`
    pub fn fine_step(&self) -> f64 {
        self.horizon / self.fine_steps() as f64
    }

    /// Same fine grid observed with a different number of coarse steps.
    pub fn with_observations(&self, observations: usize) -> Result<Self, SimError> {
        let fine = self.fine_steps();
        if observations == 0 || !fine.is_multiple_of(observations) {
            return Err(SimError::InvalidGrid(format!(
                "M = {observations} does not divide the fine step count {fine}"
            )));
        }
        Self::new(self.horizon, observations, fine / observations)
    }
}

/// Key material of one Gaussian stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStreamKey {
    pub master_seed: u64,
    pub replication: u64,
    pub mode: u64,
}

impl RngStreamKey {
    pub fn new(master_seed: u64, replication: u64, mode: u64) -> Self {
        Self {
            master_seed,
            replication,
            mode,
        }
    }
}

/// Which of the two streams belonging to a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Substream {
    Path = 0,
    Increment = 1,
}

/// Deterministic sequence of independent standard normal variates.
#[derive(Debug, Clone)]
pub struct GaussianStream {
    rng: ChaCha8Rng,
}

impl GaussianStream {
    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

impl Iterator for GaussianStream {
    type Item = f64;

    #[inline]
    fn next(&mut self) -> Option<f64> {
        Some(self.next_normal())
    }
}

/// The path stream for `key`.
pub fn derive_stream(key: RngStreamKey) -> GaussianStream {
    derive_substream(key, Substream::Path)
}

/// The full 256-bit ChaCha key is `(master_seed, replication, mode, substream)`,
/// so distinct keys never share a keystream.
pub fn derive_substream(key: RngStreamKey, substream: Substream) -> GaussianStream {
    let mut seed = [0u8; 32];
    for (chunk, word) in seed.chunks_exact_mut(8).zip([
        key.master_seed,
        key.replication,
        key.mode,
        substream as u64,
    ]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    GaussianStream {
        rng: ChaCha8Rng::from_seed(seed),
    }
}

/// Precomputed coefficients of the exact transition over one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeKernel {
    /// `e^{-a h}`
    pub decay: f64,
    /// conditional standard deviation of `u(t+h)` given `u(t)`
    pub noise_sd: f64,
    /// `ΔW = increment_loading · z_path + increment_residual_sd · z_increment`
    pub increment_loading: f64,
    pub increment_residual_sd: f64,
}

impl ModeKernel {
    pub fn new(params: &ModelParams, lambda: f64, step: f64) -> Self {
        let rate = params.decay_rate(lambda);
        let scale = params.noise_scale(lambda);
        let x = rate * step;
        // Var X = (1 - e^{-2ah}) / 2a,  Cov(X, ΔW) = (1 - e^{-ah}) / a
        let var_x = one_minus_exp_neg(2.0 * x) / (2.0 * rate);
        let cov = one_minus_exp_neg(x) / rate;
        let sd_x = var_x.sqrt();
        let (loading, residual) = if params.sigma == 0.0 {
            (0.0, 0.0)
        } else {
            (cov / sd_x, (step - cov * cov / var_x).max(0.0).sqrt())
        };
        Self {
            decay: (-x).exp(),
            noise_sd: scale * sd_x,
            increment_loading: loading,
            increment_residual_sd: residual,
        }
    }

    #[inline]
    pub fn advance(&self, u: f64, z: f64) -> f64 {
        self.decay * u + self.noise_sd * z
    }
}

/// One exact Ornstein–Uhlenbeck step of size `step` driven by the standard
/// normal `z`.
pub fn exact_transition(u: f64, lambda: f64, params: &ModelParams, step: f64, z: f64) -> f64 {
    ModeKernel::new(params, lambda, step).advance(u, z)
}

/// Simulates one mode on the fine grid into `path` (length `M·F + 1`) and,
/// when given, the Brownian increments of each fine step into `increments`
/// (length `M·F`).
pub fn simulate_mode(
    params: &ModelParams,
    lambda: f64,
    initial: f64,
    grid: &SimGrid,
    key: RngStreamKey,
    path: &mut [f64],
    increments: Option<&mut [f64]>,
) -> Result<(), SimError> {
    if path.len() != grid.fine_len() {
        return Err(SimError::BufferLength {
            expected: grid.fine_len(),
            actual: path.len(),
        });
    }
    let kernel = ModeKernel::new(params, lambda, grid.fine_step());
    let mut normals = derive_substream(key, Substream::Path);
    path[0] = initial;
    match increments {
        None => {
            for i in 1..path.len() {
                path[i] = kernel.advance(path[i - 1], normals.next_normal());
            }
        }
        Some(increments) => {
            if increments.len() != grid.fine_steps() {
                return Err(SimError::BufferLength {
                    expected: grid.fine_steps(),
                    actual: increments.len(),
                });
            }
            let mut extra = derive_substream(key, Substream::Increment);
            for i in 1..path.len() {
                let z = normals.next_normal();
                path[i] = kernel.advance(path[i - 1], z);
                increments[i - 1] =
                    kernel.increment_loading * z + kernel.increment_residual_sd * extra.next_normal();
            }
        }
    }
    Ok(())
}

/// Seeds an ensemble was generated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub master_seed: u64,
    pub replication: u64,
}

impl Provenance {
    pub fn key(&self, mode: usize) -> RngStreamKey {
        RngStreamKey::new(self.master_seed, self.replication, mode as u64)
    }
}

/// Mode trajectories on the fine grid, row-major with one row per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    params: ModelParams,
    eigs: EigenSequence,
    grid: SimGrid,
    modes: usize,
    values: Vec<f64>,
    provenance: Option<Provenance>,
}

impl PathEnsemble {
    /// Wraps externally produced paths. Without provenance the Brownian
    /// increments cannot be reconstructed.
    pub fn from_values(
        params: ModelParams,
        eigs: EigenSequence,
        grid: SimGrid,
        modes: usize,
        values: Vec<f64>,
    ) -> Result<Self, SimError> {
        eigs.leading(modes)?;
        if values.len() != modes * grid.fine_len() {
            return Err(SimError::BufferLength {
                expected: modes * grid.fine_len(),
                actual: values.len(),
            });
        }
        Ok(Self {
            params,
            eigs,
            grid,
            modes,
            values,
            provenance: None,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn eigs(&self) -> &EigenSequence {
        &self.eigs
    }

    pub fn grid(&self) -> &SimGrid {
        &self.grid
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn provenance(&self) -> Option<Provenance> {
        self.provenance
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, mode: usize) -> &[f64] {
        let len = self.grid.fine_len();
        &self.values[mode * len..(mode + 1) * len]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.grid.fine_len())
    }
}

/// Simulates the first `modes` Fourier modes for one replication.
pub fn simulate_ensemble(
    params: &ModelParams,
    eigs: &EigenSequence,
    grid: &SimGrid,
    modes: usize,
    master_seed: u64,
    replication: u64,
) -> Result<PathEnsemble, SimError> {
    let lambdas = eigs.leading(modes)?;
    let provenance = Provenance {
        master_seed,
        replication,
    };
    let mut values = vec![0.0; modes * grid.fine_len()];
    values
        .par_chunks_mut(grid.fine_len())
        .zip(lambdas.par_iter())
        .enumerate()
        .try_for_each(|(k, (row, &lambda))| {
            simulate_mode(params, lambda, params.initial_value(k), grid, provenance.key(k), row, None)
        })?;
    Ok(PathEnsemble {
        params: params.clone(),
        eigs: eigs.clone(),
        grid: *grid,
        modes,
        values,
        provenance: Some(provenance),
    })
}

/// Coarse observations `u_k(t_i)`, `i = 0..=M`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix {
    modes: usize,
    observations: usize,
    horizon: f64,
    values: Vec<f64>,
}

impl ObservationMatrix {
    pub fn new(modes: usize, observations: usize, horizon: f64, values: Vec<f64>) -> Result<Self, SimError> {
        if observations == 0 || !(horizon.is_finite() && horizon > 0.0) {
            return Err(SimError::InvalidGrid(format!(
                "M = {observations}, T = {horizon} is not a valid observation grid"
            )));
        }
        if values.len() != modes * (observations + 1) {
            return Err(SimError::BufferLength {
                expected: modes * (observations + 1),
                actual: values.len(),
            });
        }
        Ok(Self {
            modes,
            observations,
            horizon,
            values,
        })
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn observations(&self) -> usize {
        self.observations
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn coarse_step(&self) -> f64 {
        self.horizon / self.observations as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, mode: usize) -> &[f64] {
        let len = self.observations + 1;
        &self.values[mode * len..(mode + 1) * len]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.observations + 1)
    }

    /// Little-endian dump: magic, `N` (u64), `M` (u64), `T` (f64), then the
    /// `N × (M+1)` values row-major.
    pub fn write_to<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(DUMP_MAGIC)?;
        out.write_all(&(self.modes as u64).to_le_bytes())?;
        out.write_all(&(self.observations as u64).to_le_bytes())?;
        out.write_all(&self.horizon.to_le_bytes())?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, SimError> {
        let mut header = [0u8; DUMP_HEADER_LEN];
        input
            .read_exact(&mut header)
            .map_err(|e| SimError::Dump(format!("truncated header: {e}")))?;
        if &header[..8] != DUMP_MAGIC {
            return Err(SimError::Dump("bad magic, expected SPDEOBS1".into()));
        }
        let word = |i: usize| <[u8; 8]>::try_from(&header[i..i + 8]).unwrap();
        let modes = u64::from_le_bytes(word(8));
        let observations = u64::from_le_bytes(word(16));
        let horizon = f64::from_le_bytes(word(24));
        let count = modes
            .checked_mul(observations.saturating_add(1))
            .filter(|&c| c <= (isize::MAX as u64) / 8)
            .ok_or_else(|| SimError::Dump(format!("implausible shape {modes} × {observations}")))?
            as usize;
        let mut bytes = Vec::with_capacity(count * 8);
        input.read_to_end(&mut bytes)?;
        if bytes.len() != count * 8 {
            return Err(SimError::Dump(format!(
                "expected {} payload bytes, found {}",
                count * 8,
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(modes as usize, observations as usize, horizon, values)
    }
}

/// Every `F`-th fine node of the ensemble.
pub fn subsample(ensemble: &PathEnsemble) -> ObservationMatrix {
    let grid = ensemble.grid();
    let stride = grid.oversample();
    let values = ensemble
        .rows()
        .flat_map(|row| row.iter().step_by(stride).copied())
        .collect();
    ObservationMatrix {
        modes: ensemble.modes(),
        observations: grid.observations(),
        horizon: grid.horizon(),
        values,
    }
}

/// Coarse observations simulated one mode at a time, without holding the full
/// fine ensemble. Equal to `subsample(simulate_ensemble(..))`.
pub fn simulate_observations(
    params: &ModelParams,
    eigs: &EigenSequence,
    grid: &SimGrid,
    modes: usize,
    master_seed: u64,
    replication: u64,
) -> Result<ObservationMatrix, SimError> {
    let lambdas = eigs.leading(modes)?;
    let provenance = Provenance {
        master_seed,
        replication,
    };
    let stride = grid.oversample();
    let rows: Vec<Vec<f64>> = lambdas
        .par_iter()
        .enumerate()
        .map_init(
            || vec![0.0; grid.fine_len()],
            |path, (k, &lambda)| {
                simulate_mode(params, lambda, params.initial_value(k), grid, provenance.key(k), path, None)?;
                Ok(path.iter().step_by(stride).copied().collect())
            },
        )
        .collect::<Result<_, SimError>>()?;
    ObservationMatrix::new(modes, grid.observations(), grid.horizon(), rows.concat())
}
