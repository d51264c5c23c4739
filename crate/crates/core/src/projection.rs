//! Weighted least-squares projection of an `N×T` array onto `{a_i + g_t}`.

use nalgebra::{DMatrix, DVector};

use crate::error::{PanelError, Result};
use crate::hessian::{Normalization, StructuredHessian};

/// Convergence threshold on the sweep-to-sweep change of fitted values.
const FITTED_TOL: f64 = 1e-12;
/// Target for the extrapolated remaining error; sweeps also stop once
/// rounding stalls below `FITTED_TOL`.
const POLISH_TOL: f64 = 1e-14;

#[derive(Debug, Clone)]
pub struct TwoWayProjection {
    pub weights: DMatrix<f64>,
    pub a: DVector<f64>,
    pub g: DVector<f64>,
    /// `a_i + g_t` on every cell, observed or not.
    pub fitted: DMatrix<f64>,
    /// `A - fitted` on observed cells, zero elsewhere.
    pub residuals: DMatrix<f64>,
    pub sweeps: usize,
    pub used_dense: bool,
}

/// Minimizes `Σ w_it (A_it - a_i - g_t)²` over observed cells (`w > 0`),
/// normalized so that `Σa = Σg`. Entries of `A` on cells with zero weight
/// are never read.
pub fn project(w: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<TwoWayProjection> {
    let (n, t) = w.shape();
    if target.shape() != (n, t) {
        return Err(PanelError::DegenerateProjection(format!(
            "weights are {n}x{t} but target is {}x{}",
            target.nrows(),
            target.ncols()
        )));
    }
    if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(PanelError::DegenerateProjection("weights must be finite and non-negative".into()));
    }
    let row_w: Vec<f64> = (0..n).map(|i| w.row(i).sum()).collect();
    let col_w: Vec<f64> = (0..t).map(|s| w.column(s).sum()).collect();
    if let Some(i) = row_w.iter().position(|v| *v <= 0.0) {
        return Err(PanelError::DegenerateProjection(format!("unit {i} has no weighted cell")));
    }
    if let Some(s) = col_w.iter().position(|v| *v <= 0.0) {
        return Err(PanelError::DegenerateProjection(format!("period {s} has no weighted cell")));
    }
    let at = |i: usize, s: usize| if w[(i, s)] > 0.0 { target[(i, s)] } else { 0.0 };
    let scale = 1.0 + (0..n).flat_map(|i| (0..t).map(move |s| (i, s))).fold(0.0f64, |m, (i, s)| m.max(at(i, s).abs()));

    let mut a = vec![0.0; n];
    let mut g = vec![0.0; t];
    let max_sweeps = 10 * (n + t);
    let mut sweeps = 0;
    let mut converged = false;
    let mut last_change = f64::INFINITY;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut change = 0.0f64;
        for i in 0..n {
            let mut acc = 0.0;
            for s in 0..t {
                let wi = w[(i, s)];
                if wi > 0.0 {
                    acc += wi * (target[(i, s)] - g[s]);
                }
            }
            let new = acc / row_w[i];
            change = change.max((new - a[i]).abs());
            a[i] = new;
        }
        let mut gchange = 0.0f64;
        for s in 0..t {
            let mut acc = 0.0;
            for i in 0..n {
                let wi = w[(i, s)];
                if wi > 0.0 {
                    acc += wi * (target[(i, s)] - a[i]);
                }
            }
            let new = acc / col_w[s];
            gchange = gchange.max((new - g[s]).abs());
            g[s] = new;
        }
        let step = change + gchange;
        // remaining error of a geometric sequence with the observed rate
        let rate = step / last_change;
        let tail = if rate < 1.0 { step * rate / (1.0 - rate) } else { f64::INFINITY };
        let stalled = step <= FITTED_TOL * scale && rate >= 1.0;
        let settled = step == 0.0 || (last_change.is_finite() && tail <= POLISH_TOL * scale) || stalled;
        if settled && row_residual(w, target, &a, &g, &row_w) <= FITTED_TOL * scale {
            converged = true;
            break;
        }
        last_change = step;
    }
    let mut used_dense = false;
    if !converged {
        used_dense = true;
        let mut rhs = vec![0.0; n + t];
        for i in 0..n {
            for s in 0..t {
                let v = w[(i, s)] * at(i, s);
                rhs[i] += v;
                rhs[n + s] += v;
            }
        }
        let h = StructuredHessian::new(w.clone(), Normalization::penalty(), 1.0);
        let z = h
            .factor()
            .map_err(|e| PanelError::DegenerateProjection(e.to_string()))?
            .solve(&rhs);
        a.copy_from_slice(&z[..n]);
        g.copy_from_slice(&z[n..]);
    }
    let c = (a.iter().sum::<f64>() - g.iter().sum::<f64>()) / (n + t) as f64;
    a.iter_mut().for_each(|v| *v -= c);
    g.iter_mut().for_each(|v| *v += c);

    let fitted = DMatrix::from_fn(n, t, |i, s| a[i] + g[s]);
    let residuals = DMatrix::from_fn(n, t, |i, s| if w[(i, s)] > 0.0 { target[(i, s)] - fitted[(i, s)] } else { 0.0 });
    Ok(TwoWayProjection {
        weights: w.clone(),
        a: DVector::from_vec(a),
        g: DVector::from_vec(g),
        fitted,
        residuals,
        sweeps,
        used_dense,
    })
}

/// Largest weighted row mean of the residual; column means are exactly zero
/// right after a column update.
fn row_residual(w: &DMatrix<f64>, target: &DMatrix<f64>, a: &[f64], g: &[f64], row_w: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for (i, ai) in a.iter().enumerate() {
        let mut acc = 0.0;
        for (s, gs) in g.iter().enumerate() {
            let wi = w[(i, s)];
            if wi > 0.0 {
                acc += wi * (target[(i, s)] - ai - gs);
            }
        }
        worst = worst.max((acc / row_w[i]).abs());
    }
    worst
}
