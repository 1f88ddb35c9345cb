//! Kolmogorov–Smirnov test against the standard normal, sample moments, and
//! log-log slope regression.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::f64::consts::{PI, SQRT_2};
use thiserror::Error;

/// Terms kept in the Kolmogorov distribution series.
const KOLMOGOROV_TERMS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("sample has {actual} values, need at least {required}")]
    Undersized { required: usize, actual: usize },
    #[error("sample contains a non-finite value")]
    NonFinite,
    #[error("point ({x}, {y}) is not strictly positive")]
    NonPositive { x: f64, y: f64 },
    #[error("all abscissae coincide; slope is undefined")]
    DegenerateAbscissae,
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// `P(K > λ)` for the limiting Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let p = if lambda < 1.0 {
        // small-λ form: K(λ) = √(2π)/λ Σ exp(-(2j-1)²π²/(8λ²))
        let c = PI * PI / (8.0 * lambda * lambda);
        let sum: f64 = (1..=KOLMOGOROV_TERMS)
            .map(|j| {
                let m = (2 * j - 1) as f64;
                (-m * m * c).exp()
            })
            .sum();
        1.0 - (2.0 * PI).sqrt() / lambda * sum
    } else {
        2.0 * (1..=KOLMOGOROV_TERMS)
            .map(|j| {
                let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
                let j = j as f64;
                sign * (-2.0 * j * j * lambda * lambda).exp()
            })
            .sum::<f64>()
    };
    p.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub sample_size: usize,
}

/// One-sample KS test against the fully specified standard normal.
pub fn ks_test(sample: &[f64]) -> Result<KsResult, StatsError> {
    if sample.is_empty() {
        return Err(StatsError::Undersized {
            required: 1,
            actual: 0,
        });
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let statistic = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let cdf = normal_cdf(x);
            ((i + 1) as f64 / n - cdf).max(cdf - i as f64 / n)
        })
        .fold(0.0, f64::max);
    Ok(KsResult {
        statistic,
        p_value: kolmogorov_survival(n.sqrt() * statistic),
        sample_size: sorted.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    /// unbiased (`n - 1` divisor)
    pub variance: f64,
    /// standardized third moment; `None` when the variance vanishes
    pub skewness: Option<f64>,
    /// standardized fourth moment (3 for a normal); needs `n ≥ 4`
    pub kurtosis: Option<f64>,
}

pub fn empirical_moments(sample: &[f64]) -> Result<Moments, StatsError> {
    if sample.len() < 2 {
        return Err(StatsError::Undersized {
            required: 2,
            actual: sample.len(),
        });
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in sample {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    let skewness = (m2 > 0.0).then(|| m3 / m2.powf(1.5));
    let kurtosis = (m2 > 0.0 && sample.len() >= 4).then(|| m4 / (m2 * m2));
    Ok(Moments {
        mean,
        variance: m2 * n / (n - 1.0),
        skewness,
        kurtosis,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: Vec<(f64, f64)>,
}

/// Least-squares line through `(ln x, ln y)`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<SlopeFit, StatsError> {
    if points.len() < 2 {
        return Err(StatsError::Undersized {
            required: 2,
            actual: points.len(),
        });
    }
    if let Some(&(x, y)) = points
        .iter()
        .find(|(x, y)| !(*x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite()))
    {
        return Err(StatsError::NonPositive { x, y });
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mean_x = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &logs {
        let (dx, dy) = (x - mean_x, y - mean_y);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(StatsError::DegenerateAbscissae);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let residual: f64 = logs
        .iter()
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (1.0 - residual / syy).clamp(0.0, 1.0)
    };
    Ok(SlopeFit {
        slope,
        intercept,
        r_squared,
        points: points.to_vec(),
    })
}
