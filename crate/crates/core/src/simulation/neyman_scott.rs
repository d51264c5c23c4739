//! Closed forms for the Gaussian variance model with two-way mean effects.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{PanelError, Result};
use crate::panel::halves;

use super::dgp::{Dgp, DgpKind, DgpSpec};

/// Two-sided normal critical value used for the intervals.
pub const Z_95: f64 = 1.96;

/// `(1/NT) Σ (y_it − ȳ_i. − ȳ_.t + ȳ_..)²`.
pub fn residual_variance(y: &DMatrix<f64>) -> f64 {
    let (n, t) = y.shape();
    let rows: Vec<f64> = (0..n).map(|i| y.row(i).mean()).collect();
    let cols: Vec<f64> = (0..t).map(|s| y.column(s).mean()).collect();
    let grand = y.mean();
    let mut ssr = 0.0;
    for i in 0..n {
        for s in 0..t {
            ssr += (y[(i, s)] - rows[i] - cols[s] + grand).powi(2);
        }
    }
    ssr / (n * t) as f64
}

/// Estimates from one outcome grid, in the order FE, analytical, jackknife.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NeymanScottEstimates {
    pub fixed_effects: f64,
    pub analytical: f64,
    pub jackknife: f64,
}

pub fn estimate(y: &DMatrix<f64>) -> NeymanScottEstimates {
    let (n, t) = y.shape();
    let fe = residual_variance(y);
    let (t1, t2) = halves(t);
    let (u1, u2) = halves(n);
    let time_mean = (residual_variance(&y.columns(t1.start, t1.len()).into_owned())
        + residual_variance(&y.columns(t2.start, t2.len()).into_owned()))
        / 2.0;
    let unit_mean = (residual_variance(&y.rows(u1.start, u1.len()).into_owned())
        + residual_variance(&y.rows(u2.start, u2.len()).into_owned()))
        / 2.0;
    NeymanScottEstimates {
        fixed_effects: fe,
        analytical: fe * (1.0 + 1.0 / n as f64 + 1.0 / t as f64),
        jackknife: 3.0 * fe - time_mean - unit_mean,
    }
}

/// `E[β̂]/β⁰` on an `n×t` panel.
pub fn expected_ratio(n: usize, t: usize) -> f64 {
    ((n - 1) * (t - 1)) as f64 / (n * t) as f64
}

/// Analytic row of the bias, dispersion and coverage tables, in units of
/// the true variance.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[allow(non_snake_case)]
pub struct OracleRow {
    pub N: usize,
    pub T: usize,
    pub bias_fe: f64,
    pub bias_analytical: f64,
    /// Bias of the jackknife with even halves, `−1/(NT)`.
    pub bias_jackknife: f64,
    /// Exact bias of the jackknife with the overlapping halves used for odd sizes.
    pub bias_jackknife_exact: f64,
    pub sd_fe: f64,
    pub sd_analytical: f64,
    pub coverage_fe: f64,
    pub coverage_analytical: f64,
    /// Interval around the degrees-of-freedom corrected estimator.
    pub coverage_unbiased: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jackknife: Option<JackknifeSimulation>,
}

/// Coverage of `c·β̂ (1 ± z√(2/NT))` for `β⁰ = 1`, with `NTβ̂ ∼ χ²_{(N−1)(T−1)}`.
pub fn coverage(n: usize, t: usize, scale: f64) -> f64 {
    let nt = (n * t) as f64;
    let h = Z_95 * (2.0 / nt).sqrt();
    let chi = ChiSquared::new(((n - 1) * (t - 1)) as f64).expect("positive degrees of freedom");
    // covered iff 1/(c(1+h)) ≤ β̂ ≤ 1/(c(1−h))
    let lower = chi.cdf(nt / (scale * (1.0 + h)));
    let upper = if h < 1.0 { chi.cdf(nt / (scale * (1.0 - h))) } else { 1.0 };
    upper - lower
}

pub fn oracle(n: usize, t: usize) -> Result<OracleRow> {
    if n < 2 || t < 2 {
        return Err(PanelError::Config(format!("Neyman–Scott oracle needs N, T ≥ 2, got N={n}, T={t}")));
    }
    let (nf, tf) = (n as f64, t as f64);
    let fe = expected_ratio(n, t);
    let factor = 1.0 + 1.0 / nf + 1.0 / tf;
    let sd_fe = (2.0 * ((n - 1) * (t - 1)) as f64).sqrt() / (nf * tf);
    let (t1, t2) = halves(t);
    let (u1, u2) = halves(n);
    let jack = 3.0 * fe
        - (expected_ratio(n, t1.len()) + expected_ratio(n, t2.len())) / 2.0
        - (expected_ratio(u1.len(), t) + expected_ratio(u2.len(), t)) / 2.0;
    Ok(OracleRow {
        N: n,
        T: t,
        bias_fe: fe - 1.0,
        bias_analytical: factor * fe - 1.0,
        bias_jackknife: -1.0 / (nf * tf),
        bias_jackknife_exact: jack - 1.0,
        sd_fe,
        sd_analytical: factor * sd_fe,
        coverage_fe: coverage(n, t, 1.0),
        coverage_analytical: coverage(n, t, factor),
        coverage_unbiased: coverage(n, t, 1.0 / fe),
        jackknife: None,
    })
}

/// Simulated moments of the jackknife, in units of the true variance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JackknifeSimulation {
    pub replications: usize,
    pub seed: u64,
    pub mean: f64,
    /// Monte Carlo standard error of `mean`.
    pub mean_mc_se: f64,
    pub sd: f64,
    pub coverage: f64,
}

/// Simulates the jackknife with `β⁰ = 1`; replication `r` uses stream `r`.
pub fn simulate_jackknife(n: usize, t: usize, replications: usize, seed: u64) -> Result<JackknifeSimulation> {
    if replications < 2 {
        return Err(PanelError::Config("need at least 2 replications".into()));
    }
    let dgp = Dgp::new(DgpSpec::new(DgpKind::NeymanScott, n, t, seed))?;
    let h = Z_95 * (2.0 / (n * t) as f64).sqrt();
    let draws: Vec<f64> = (0..replications).into_par_iter().map(|r| estimate(&dgp.neyman_scott_grid(r)).jackknife).collect();
    let rf = replications as f64;
    let mean = draws.iter().sum::<f64>() / rf;
    let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (rf - 1.0)).sqrt();
    let hits = draws.iter().filter(|&&b| (b - 1.0).abs() <= h * b.abs()).count();
    Ok(JackknifeSimulation { replications, seed, mean, mean_mc_se: sd / rf.sqrt(), sd, coverage: hits as f64 / rf })
}

pub fn oracle_with_jackknife(n: usize, t: usize, replications: usize, seed: u64) -> Result<OracleRow> {
    let mut row = oracle(n, t)?;
    row.jackknife = Some(simulate_jackknife(n, t, replications, seed)?);
    Ok(row)
}

/// The six panel sizes of the published tables.
pub const TABLE_SIZES: [(usize, usize); 6] = [(10, 10), (25, 10), (25, 25), (50, 10), (50, 25), (50, 50)];
