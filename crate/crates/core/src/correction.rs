//! Analytical bias and variance estimators for slopes and average partial effects.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PanelError, Result};
use crate::family::{LikelihoodFamily, PartialEffectSpec};
use crate::panel::PanelDataset;
use crate::plugin::{EffectGrid, PlugIns};
use crate::solver::{fit_given_beta, FitOptions, FitResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    /// Regressors identically distributed over units; no cross-unit term.
    #[default]
    Conditional,
    /// Adds the within-period cross-unit term, centering at period means.
    IidUnits,
    /// Adds the within-period cross-unit term, centering at unit means.
    StationaryTimes,
    /// Adds the within-period cross-unit term, centering at the overall effect.
    Both,
}

impl std::str::FromStr for VarianceMode {
    type Err = PanelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditional" => Ok(VarianceMode::Conditional),
            "iid-units" => Ok(VarianceMode::IidUnits),
            "stationary-times" => Ok(VarianceMode::StationaryTimes),
            "both" => Ok(VarianceMode::Both),
            other => Err(PanelError::Config(format!(
                "unknown variance mode `{other}` (expected conditional|iid-units|stationary-times|both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CorrectionOptions {
    /// Number of lags `L` in the spectral sums.
    pub trim: usize,
    /// Use the bias and variance expressions that avoid information-matrix
    /// equalities (valid for conditional moment models).
    pub no_bartlett: bool,
}

#[derive(Debug, Clone, Serialize)]
#[allow(non_snake_case)]
pub struct CorrectionResult {
    pub beta_hat: Vec<f64>,
    #[serde(serialize_with = "rows")]
    pub W_hat: DMatrix<f64>,
    pub B_hat: Vec<f64>,
    pub D_hat: Vec<f64>,
    pub beta_tilde_A: Vec<f64>,
    #[serde(serialize_with = "rows")]
    pub vcov: DMatrix<f64>,
    pub se: Vec<f64>,
    pub trim: usize,
    pub no_bartlett: bool,
    /// Observed cells per unit and per period (`T` and `N` when balanced).
    pub periods_effective: f64,
    pub units_effective: f64,
}

/// Writes a matrix as a list of rows.
pub fn rows<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let v: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    v.serialize(s)
}

/// `Ŵ = -(1/n) Σ [∂_ββ' ℓ - ∂_π² ℓ Ξ Ξ']`, checked for positive definiteness.
pub fn estimate_w(p: &PlugIns) -> Result<DMatrix<f64>> {
    let k = p.k;
    let n_obs = p.n_observed() as f64;
    let mut w = -p.sum_d_beta_beta.clone();
    let mut scale = vec![0.0; k];
    for (i, s) in p.cells() {
        for a in 0..k {
            scale[a] += p.d_beta_pi[a][(i, s)].powi(2) / p.weights[(i, s)].max(f64::MIN_POSITIVE);
            for b in 0..k {
                w[(a, b)] += p.d_pi2[(i, s)] * p.xi[a][(i, s)] * p.xi[b][(i, s)];
            }
        }
    }
    w /= n_obs;
    let w = (&w + w.transpose()) * 0.5;
    for a in 0..k {
        if !(w[(a, a)] > 1e-10 * scale[a] / n_obs) {
            return Err(PanelError::SingularInformation(format!(
                "regressor {a} has no information left after partialling out the effects"
            )));
        }
    }
    if Cholesky::new(w.clone()).is_none() {
        return Err(PanelError::SingularInformation("Ŵ is not positive definite".into()));
    }
    Ok(w)
}

fn check_trim(p: &PlugIns, trim: usize) -> Result<()> {
    if trim + 1 >= p.t {
        return Err(PanelError::InvalidTrim { trim, periods: p.t });
    }
    Ok(())
}

fn unit_denominator(p: &PlugIns, i: usize) -> f64 {
    (0..p.t).filter(|&s| p.observed[(i, s)]).map(|s| p.d_pi2[(i, s)]).sum()
}

fn period_denominator(p: &PlugIns, s: usize) -> f64 {
    (0..p.n).filter(|&i| p.observed[(i, s)]).map(|i| p.d_pi2[(i, s)]).sum()
}

fn add_into(acc: &mut [f64], v: &[f64], c: f64) {
    acc.iter_mut().zip(v).for_each(|(a, x)| *a += c * x);
}

/// Bias term from the unit effects.
pub fn estimate_b(p: &PlugIns, opts: &CorrectionOptions) -> Result<Vec<f64>> {
    check_trim(p, opts.trim)?;
    let mut out = vec![0.0; p.k];
    for i in 0..p.n {
        let den = unit_denominator(p, i);
        let lag = p.lag_sum(i, opts.trim, |s| p.d_pi[(i, s)], |s| p.d_beta_pi_tilde(i, s));
        let mut second = vec![0.0; p.k];
        let mut score_sq = 0.0;
        for s in (0..p.t).filter(|&s| p.observed[(i, s)]) {
            add_into(&mut second, &p.d_beta_pi2_tilde(i, s), 1.0);
            score_sq += p.d_pi[(i, s)].powi(2);
        }
        add_into(&mut out, &lag, -1.0 / den);
        if opts.no_bartlett {
            add_into(&mut out, &second, 0.5 * score_sq / (den * den));
        } else {
            add_into(&mut out, &second, -0.5 / den);
        }
    }
    out.iter_mut().for_each(|v| *v /= p.n as f64);
    Ok(out)
}

/// Bias term from the period effects.
pub fn estimate_d(p: &PlugIns, opts: &CorrectionOptions) -> Vec<f64> {
    let mut out = vec![0.0; p.k];
    for s in 0..p.t {
        let den = period_denominator(p, s);
        let mut first = vec![0.0; p.k];
        let mut second = vec![0.0; p.k];
        let mut score_sq = 0.0;
        for i in (0..p.n).filter(|&i| p.observed[(i, s)]) {
            add_into(&mut first, &p.d_beta_pi_tilde(i, s), p.d_pi[(i, s)]);
            add_into(&mut second, &p.d_beta_pi2_tilde(i, s), 1.0);
            score_sq += p.d_pi[(i, s)].powi(2);
        }
        add_into(&mut out, &first, -1.0 / den);
        if opts.no_bartlett {
            add_into(&mut out, &second, 0.5 * score_sq / (den * den));
        } else {
            add_into(&mut out, &second, -0.5 / den);
        }
    }
    out.iter_mut().for_each(|v| *v /= p.t as f64);
    out
}

fn inverse_spd(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::new(w.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| PanelError::SingularInformation("Ŵ is not positive definite".into()))
}

/// `β̃ = β̂ - Ŵ⁻¹B̂/T - Ŵ⁻¹D̂/N` with plug-in covariance `Ŵ⁻¹/(NT)`.
pub fn analytical_correct(
    d: &PanelDataset,
    f: &dyn LikelihoodFamily,
    fit: &FitResult,
    opts: &CorrectionOptions,
) -> Result<CorrectionResult> {
    let p = PlugIns::at_fit(d, f, fit)?;
    correct_from(&p, fit, opts)
}

pub fn correct_from(p: &PlugIns, fit: &FitResult, opts: &CorrectionOptions) -> Result<CorrectionResult> {
    let w = estimate_w(p)?;
    let b = estimate_b(p, opts)?;
    let dd = estimate_d(p, opts);
    let winv = inverse_spd(&w)?;
    let n_obs = p.n_observed() as f64;
    let periods_effective = n_obs / p.n as f64;
    let units_effective = n_obs / p.t as f64;
    let bb = &winv * DVector::from_column_slice(&b);
    let db = &winv * DVector::from_column_slice(&dd);
    let corrected: Vec<f64> = fit
        .beta()
        .iter()
        .enumerate()
        .map(|(a, v)| v - bb[a] / periods_effective - db[a] / units_effective)
        .collect();
    let vcov = if opts.no_bartlett {
        let mut omega = DMatrix::zeros(p.k, p.k);
        for (i, s) in p.cells() {
            let g = DVector::from_vec(p.d_beta_tilde(i, s));
            omega += &g * g.transpose();
        }
        omega /= n_obs;
        &winv * omega * &winv / n_obs
    } else {
        &winv / n_obs
    };
    let se = (0..p.k).map(|a| vcov[(a, a)].sqrt()).collect();
    Ok(CorrectionResult {
        beta_hat: fit.beta().to_vec(),
        W_hat: w,
        B_hat: b,
        D_hat: dd,
        beta_tilde_A: corrected,
        vcov,
        se,
        trim: opts.trim,
        no_bartlett: opts.no_bartlett,
        periods_effective,
        units_effective,
    })
}

#[derive(Debug, Clone, Serialize)]
#[allow(non_snake_case)]
pub struct ApeCorrectionResult {
    pub spec: PartialEffectSpec,
    pub delta_hat: f64,
    pub B_delta: f64,
    pub D_delta: f64,
    /// Effect rebuilt at the corrected slopes.
    pub delta_tilde: f64,
    pub delta_tilde_A: f64,
    /// Variance of the effect estimator (`V̂^δ / r²`).
    pub V_delta: f64,
    pub se: f64,
    pub variance_mode: VarianceMode,
}

/// Bias and variance pieces of one partial effect, evaluated at the
/// uncorrected fit.
#[derive(Debug, Clone)]
pub struct ApeBias {
    pub delta_hat: f64,
    pub b: f64,
    pub d: f64,
    pub variance: f64,
}

pub fn ape_bias(
    d: &PanelDataset,
    f: &dyn LikelihoodFamily,
    fit: &FitResult,
    p: &PlugIns,
    spec: &PartialEffectSpec,
    trim: usize,
    mode: VarianceMode,
) -> Result<ApeBias> {
    check_trim(p, trim)?;
    let e = EffectGrid::new(d, f, spec, &fit.state)?;
    let psi = p.project_ratio(&e.d_pi)?;
    let n_obs = p.n_observed() as f64;
    let delta_hat = e.value.sum() / n_obs;

    let mut b = 0.0;
    for i in 0..p.n {
        let den = unit_denominator(p, i);
        let lag = p.lag_sum(i, trim, |s| p.d_pi[(i, s)], |s| vec![p.d_pi2[(i, s)] * psi[(i, s)]]);
        let curv: f64 = (0..p.t)
            .filter(|&s| p.observed[(i, s)])
            .map(|s| e.d_pi2[(i, s)] - p.d_pi3[(i, s)] * psi[(i, s)])
            .sum();
        b += lag[0] / den - 0.5 * curv / den;
    }
    b /= p.n as f64;

    let mut dd = 0.0;
    for s in 0..p.t {
        let den = period_denominator(p, s);
        let num: f64 = (0..p.n)
            .filter(|&i| p.observed[(i, s)])
            .map(|i| {
                p.d_pi[(i, s)] * p.d_pi2[(i, s)] * psi[(i, s)] - 0.5 * e.d_pi2[(i, s)] + 0.5 * p.d_pi3[(i, s)] * psi[(i, s)]
            })
            .sum();
        dd += num / den;
    }
    dd /= p.t as f64;

    let variance = ape_variance(p, &e, &psi, delta_hat, mode)?;
    Ok(ApeBias { delta_hat, b, d: dd, variance })
}

fn ape_variance(p: &PlugIns, e: &EffectGrid, psi: &DMatrix<f64>, delta_hat: f64, mode: VarianceMode) -> Result<f64> {
    let n_obs = p.n_observed() as f64;
    let winv = inverse_spd(&estimate_w(p)?)?;
    let mut d_beta_delta = DVector::zeros(p.k);
    for (i, s) in p.cells() {
        for a in 0..p.k {
            d_beta_delta[a] += e.d_beta[a][(i, s)] - p.xi[a][(i, s)] * e.d_pi[(i, s)];
        }
    }
    d_beta_delta /= n_obs;
    let loading = &winv * &d_beta_delta;

    let mut gamma_sq = 0.0;
    for (i, s) in p.cells() {
        let g: f64 = p.d_beta_tilde(i, s).iter().zip(loading.iter()).map(|(a, b)| a * b).sum::<f64>()
            - psi[(i, s)] * p.d_pi[(i, s)];
        gamma_sq += g * g;
    }

    let centered = match mode {
        VarianceMode::Conditional | VarianceMode::IidUnits => {
            let means: Vec<f64> = (0..p.t)
                .map(|s| {
                    let obs: Vec<usize> = (0..p.n).filter(|&i| p.observed[(i, s)]).collect();
                    obs.iter().map(|&i| e.value[(i, s)]).sum::<f64>() / obs.len() as f64
                })
                .collect();
            DMatrix::from_fn(p.n, p.t, |i, s| if p.observed[(i, s)] { e.value[(i, s)] - means[s] } else { 0.0 })
        }
        VarianceMode::StationaryTimes => {
            let means: Vec<f64> = (0..p.n)
                .map(|i| {
                    let obs: Vec<usize> = (0..p.t).filter(|&s| p.observed[(i, s)]).collect();
                    obs.iter().map(|&s| e.value[(i, s)]).sum::<f64>() / obs.len() as f64
                })
                .collect();
            DMatrix::from_fn(p.n, p.t, |i, s| if p.observed[(i, s)] { e.value[(i, s)] - means[i] } else { 0.0 })
        }
        VarianceMode::Both => {
            DMatrix::from_fn(p.n, p.t, |i, s| if p.observed[(i, s)] { e.value[(i, s)] - delta_hat } else { 0.0 })
        }
    };
    let within_unit: f64 = centered.row_iter().map(|r| r.sum().powi(2)).sum();
    let cross_unit = if mode == VarianceMode::Conditional {
        0.0
    } else {
        centered.column_iter().map(|c| c.sum().powi(2) - c.iter().map(|v| v * v).sum::<f64>()).sum()
    };
    Ok((within_unit + cross_unit + gamma_sq) / (n_obs * n_obs))
}

/// Corrected average partial effect. The effect is rebuilt at the corrected
/// slopes `β̃` (effects re-estimated with `β` held fixed); bias and variance
/// pieces come from the uncorrected fit.
#[allow(clippy::too_many_arguments)]
pub fn ape_correction(
    d: &PanelDataset,
    f: &dyn LikelihoodFamily,
    fit: &FitResult,
    corrected: &CorrectionResult,
    spec: &PartialEffectSpec,
    mode: VarianceMode,
    fit_opts: &FitOptions,
) -> Result<ApeCorrectionResult> {
    let p = PlugIns::at_fit(d, f, fit)?;
    let parts = ape_bias(d, f, fit, &p, spec, corrected.trim, mode)?;
    let refit = fit_given_beta(d, f, fit_opts, &corrected.beta_tilde_A, Some(&fit.state))?;
    let delta_tilde = EffectGrid::new(d, f, spec, &refit.state)?.value.sum() / p.n_observed() as f64;
    Ok(ApeCorrectionResult {
        spec: *spec,
        delta_hat: parts.delta_hat,
        B_delta: parts.b,
        D_delta: parts.d,
        delta_tilde,
        delta_tilde_A: delta_tilde - parts.b / corrected.periods_effective - parts.d / corrected.units_effective,
        V_delta: parts.variance,
        se: parts.variance.sqrt(),
        variance_mode: mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::{Gaussian, Probit};
    use crate::solver::{fit, prune_separated, FitOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn probit_panel(n: usize, t: usize, seed: u64) -> PanelDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha: Vec<f64> = (0..n).map(|_| 0.25 * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            for _ in 0..t {
                let xv = rng.sample::<f64, _>(StandardNormal) + alpha[i];
                x.push(xv);
                x.push(rng.random_range(-1.0..1.0));
                let e: f64 = rng.sample(StandardNormal);
                y.push((xv + 0.5 * x[x.len() - 1] + alpha[i] > e) as u8 as f64);
            }
        }
        let d = PanelDataset::balanced(n, t, vec!["x1".into(), "x2".into()], y, x).unwrap();
        prune_separated(&d, &Probit).unwrap().0
    }

    fn gaussian_panel(n: usize, t: usize, seed: u64) -> PanelDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * t).map(|_| rng.sample(StandardNormal)).collect();
        let y = x.iter().enumerate().map(|(c, v)| v + (c / t) as f64 * 0.1 + rng.sample::<f64, _>(StandardNormal)).collect();
        PanelDataset::balanced(n, t, vec!["x1".into()], y, x).unwrap()
    }

    /// Direct evaluation of the displays from raw bundles, with a dense
    /// least-squares projection and explicit `T/(T-j)` factors.
    fn scripted(d: &PanelDataset, fit: &FitResult, trim: usize) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
        let (n, t, k) = (d.n_units(), d.n_periods(), d.n_regressors());
        let bundles: Vec<Vec<_>> = (0..n)
            .map(|i| (0..t).map(|s| Probit.loglik_bundle(d.y(i, s), d.x(i, s), fit.beta(), fit.state.pi(i, s)).unwrap()).collect())
            .collect();
        // dense weighted regression on dummies for each Ξ_k
        let mut xi = vec![DMatrix::zeros(n, t); k];
        for a in 0..k {
            let p = n + t - 1;
            let mut xtx = DMatrix::zeros(p, p);
            let mut xty = DVector::zeros(p);
            for i in 0..n {
                for s in 0..t {
                    let w = -bundles[i][s].d_pi2;
                    let r = bundles[i][s].d_beta_pi[a] / bundles[i][s].d_pi2;
                    let idx: Vec<usize> = if s > 0 { vec![i, n + s - 1] } else { vec![i] };
                    for &u in &idx {
                        xty[u] += w * r;
                        for &v in &idx {
                            xtx[(u, v)] += w;
                        }
                    }
                }
            }
            let c = xtx.lu().solve(&xty).unwrap();
            for i in 0..n {
                for s in 0..t {
                    xi[a][(i, s)] = c[i] + if s > 0 { c[n + s - 1] } else { 0.0 };
                }
            }
        }
        let mut w = DMatrix::zeros(k, k);
        let mut b = vec![0.0; k];
        let mut dd = vec![0.0; k];
        for i in 0..n {
            for s in 0..t {
                let c = &bundles[i][s];
                for a in 0..k {
                    for bb in 0..k {
                        w[(a, bb)] -= c.d_beta_beta[(a, bb)] - c.d_pi2 * xi[a][(i, s)] * xi[bb][(i, s)];
                    }
                }
            }
        }
        w /= (n * t) as f64;
        for a in 0..k {
            for i in 0..n {
                let den: f64 = (0..t).map(|s| bundles[i][s].d_pi2).sum();
                let mut num = 0.0;
                for j in 0..=trim {
                    let f = t as f64 / (t - j) as f64;
                    for s in j..t {
                        let dbp = bundles[i][s].d_beta_pi[a] - bundles[i][s].d_pi2 * xi[a][(i, s)];
                        num += f * bundles[i][s - j].d_pi * dbp;
                    }
                }
                for s in 0..t {
                    num += 0.5 * (bundles[i][s].d_beta_pi2[a] - bundles[i][s].d_pi3 * xi[a][(i, s)]);
                }
                b[a] -= num / den / n as f64;
            }
            for s in 0..t {
                let den: f64 = (0..n).map(|i| bundles[i][s].d_pi2).sum();
                let mut num = 0.0;
                for i in 0..n {
                    let c = &bundles[i][s];
                    num += c.d_pi * (c.d_beta_pi[a] - c.d_pi2 * xi[a][(i, s)]) + 0.5 * (c.d_beta_pi2[a] - c.d_pi3 * xi[a][(i, s)]);
                }
                dd[a] -= num / den / t as f64;
            }
        }
        (w, b, dd)
    }

    #[test]
    fn probit_matches_scripted_evaluation() {
        let d = probit_panel(12, 12, 21);
        assert!(d.is_balanced() && d.n_units() == 12 && d.n_periods() == 12, "pruned panel");
        let r = fit(&d, &Probit, &FitOptions::default()).unwrap();
        for trim in [0, 1, 2] {
            let c = analytical_correct(&d, &Probit, &r, &CorrectionOptions { trim, no_bartlett: false }).unwrap();
            let (w, b, dd) = scripted(&d, &r, trim);
            assert!((&c.W_hat - &w).amax() < 1e-8);
            for a in 0..2 {
                assert!((c.B_hat[a] - b[a]).abs() < 1e-8);
                assert!((c.D_hat[a] - dd[a]).abs() < 1e-8);
            }
            let winv = w.try_inverse().unwrap();
            let bt = DVector::from_column_slice(r.beta()) - &winv * DVector::from_vec(b) / 12.0 - &winv * DVector::from_vec(dd) / 12.0;
            for a in 0..2 {
                assert!((c.beta_tilde_A[a] - bt[a]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gaussian_w_is_demeaned_gram() {
        let (n, t) = (6, 5);
        let d = gaussian_panel(n, t, 3);
        let r = fit(&d, &Gaussian, &FitOptions::default()).unwrap();
        let c = analytical_correct(&d, &Gaussian, &r, &CorrectionOptions::default()).unwrap();
        let x = d.regressor_grid(0);
        let grand = x.sum() / (n * t) as f64;
        let mut gram = 0.0;
        for i in 0..n {
            for s in 0..t {
                let xt = x[(i, s)] - x.row(i).sum() / t as f64 - x.column(s).sum() / n as f64 + grand;
                gram += xt * xt;
            }
        }
        assert!((c.W_hat[(0, 0)] - gram / (n * t) as f64).abs() < 1e-10);
        // both bias terms vanish identically at the least-squares solution
        assert!(c.D_hat[0].abs() < 1e-12);
    }

    #[test]
    fn trim_must_leave_two_periods() {
        let d = gaussian_panel(4, 4, 4);
        let r = fit(&d, &Gaussian, &FitOptions::default()).unwrap();
        let e = analytical_correct(&d, &Gaussian, &r, &CorrectionOptions { trim: 3, no_bartlett: false });
        assert!(matches!(e, Err(PanelError::InvalidTrim { trim: 3, periods: 4 })));
        assert!(analytical_correct(&d, &Gaussian, &r, &CorrectionOptions { trim: 2, no_bartlett: false }).is_ok());
    }

    #[test]
    fn constant_regressor_is_singular_information() {
        let d = gaussian_panel(4, 4, 5);
        let r = fit(&d, &Gaussian, &FitOptions::default()).unwrap();
        let c = PanelDataset::balanced(4, 4, vec!["c".into()], (0..16).map(|v| d.y(v / 4, v % 4)).collect(), vec![1.0; 16]).unwrap();
        let p = PlugIns::at_fit(&c, &Gaussian, &r).unwrap();
        assert!(matches!(estimate_w(&p), Err(PanelError::SingularInformation(_))));
    }

    #[test]
    fn both_mode_centers_at_overall_effect() {
        let d = probit_panel(8, 7, 8);
        let r = fit(&d, &Probit, &FitOptions::default()).unwrap();
        let p = PlugIns::at_fit(&d, &Probit, &r).unwrap();
        let spec = PartialEffectSpec::continuous(0);
        let e = EffectGrid::new(&d, &Probit, &spec, &r.state).unwrap();
        let psi = p.project_ratio(&e.d_pi).unwrap();
        let delta = e.value.sum() / p.n_observed() as f64;
        let v = ape_variance(&p, &e, &psi, delta, VarianceMode::Both).unwrap();
        // same quantity from the written-out sums with Δ̃ = Δ̂ - δ̂
        let ct = e.value.add_scalar(-delta);
        let mut total = 0.0;
        for i in 0..p.n {
            for s in 0..p.t {
                for tau in 0..p.t {
                    total += ct[(i, s)] * ct[(i, tau)];
                }
                for j in (0..p.n).filter(|&j| j != i) {
                    total += ct[(i, s)] * ct[(j, s)];
                }
            }
        }
        let g = ape_variance(&p, &e, &psi, delta, VarianceMode::Conditional).unwrap();
        let ctc = DMatrix::from_fn(p.n, p.t, |i, s| e.value[(i, s)] - e.value.column(s).mean());
        let within: f64 = ctc.row_iter().map(|r| r.sum().powi(2)).sum();
        let gamma_part = g * (p.n_observed() as f64).powi(2) - within;
        let expect = (total + gamma_part) / (p.n_observed() as f64).powi(2);
        assert!((v - expect).abs() < 1e-12 * expect.abs().max(1e-12));
    }

    #[test]
    fn ape_correction_runs_and_is_small_for_static_probit() {
        let d = probit_panel(20, 12, 9);
        let r = fit(&d, &Probit, &FitOptions::default()).unwrap();
        let c = analytical_correct(&d, &Probit, &r, &CorrectionOptions::default()).unwrap();
        for mode in [VarianceMode::Conditional, VarianceMode::IidUnits, VarianceMode::StationaryTimes, VarianceMode::Both] {
            let a = ape_correction(&d, &Probit, &r, &c, &PartialEffectSpec::continuous(0), mode, &FitOptions::default()).unwrap();
            assert!(a.se > 0.0 && a.se.is_finite());
            assert!((a.delta_tilde_A - a.delta_hat).abs() < 3.0 * a.se);
        }
    }

    #[test]
    fn no_bartlett_variance_is_sandwich() {
        let d = gaussian_panel(6, 6, 10);
        let r = fit(&d, &Gaussian, &FitOptions::default()).unwrap();
        let c = analytical_correct(&d, &Gaussian, &r, &CorrectionOptions { trim: 1, no_bartlett: true }).unwrap();
        let p = PlugIns::at_fit(&d, &Gaussian, &r).unwrap();
        let mut omega = 0.0;
        for (i, s) in p.cells() {
            omega += p.d_beta_tilde(i, s)[0].powi(2);
        }
        let w = c.W_hat[(0, 0)];
        assert!((c.vcov[(0, 0)] - omega / 36.0 / (w * w) / 36.0).abs() < 1e-14);
    }
}
