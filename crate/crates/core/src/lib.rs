//! Spectral simulation and drift estimation for the fractional stochastic
//! heat equation `dU + θ(-Δ)^β U dt = σ Σ λ_k^{-γ} h_k dw_k` on `(0, π)^d`.

pub mod cli;
pub mod estimators;
pub mod experiments;
pub mod simulator;
pub mod spectral;
pub mod stats;
