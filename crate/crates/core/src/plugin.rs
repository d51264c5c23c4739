//! Derivative grids evaluated at estimated parameters, and the weighted
//! projections built from them.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::family::{partial_effect_bundle, LikelihoodFamily, PartialEffectSpec};
use crate::panel::PanelDataset;
use crate::projection::project;
use crate::solver::{FitResult, ParameterState};

/// Log-likelihood derivatives on every cell (zero on unobserved cells),
/// plus the projections `Ξ̂_k`.
#[derive(Debug, Clone)]
pub struct PlugIns {
    pub n: usize,
    pub t: usize,
    pub k: usize,
    pub observed: DMatrix<bool>,
    pub d_pi: DMatrix<f64>,
    pub d_pi2: DMatrix<f64>,
    pub d_pi3: DMatrix<f64>,
    pub d_beta: Vec<DMatrix<f64>>,
    pub d_beta_pi: Vec<DMatrix<f64>>,
    pub d_beta_pi2: Vec<DMatrix<f64>>,
    /// `Σ_it ∂_ββ' ℓ_it`.
    pub sum_d_beta_beta: DMatrix<f64>,
    /// `-∂_π² ℓ` on observed cells.
    pub weights: DMatrix<f64>,
    pub xi: Vec<DMatrix<f64>>,
}

impl PlugIns {
    pub fn at_fit(d: &PanelDataset, f: &dyn LikelihoodFamily, fit: &FitResult) -> Result<Self> {
        Self::new(d, f, &fit.state)
    }

    pub fn new(d: &PanelDataset, f: &dyn LikelihoodFamily, s: &ParameterState) -> Result<Self> {
        let (n, t, k) = (d.n_units(), d.n_periods(), d.n_regressors());
        let z = || DMatrix::zeros(n, t);
        let mut p = PlugIns {
            n,
            t,
            k,
            observed: DMatrix::from_fn(n, t, |i, s| d.observed(i, s)),
            d_pi: z(),
            d_pi2: z(),
            d_pi3: z(),
            d_beta: vec![z(); k],
            d_beta_pi: vec![z(); k],
            d_beta_pi2: vec![z(); k],
            sum_d_beta_beta: DMatrix::zeros(k, k),
            weights: z(),
            xi: Vec::new(),
        };
        for (i, c) in d.cells() {
            let b = f.loglik_bundle(d.y(i, c), d.x(i, c), &s.beta, s.pi(i, c))?;
            p.d_pi[(i, c)] = b.d_pi;
            p.d_pi2[(i, c)] = b.d_pi2;
            p.d_pi3[(i, c)] = b.d_pi3;
            p.weights[(i, c)] = -b.d_pi2;
            for a in 0..k {
                p.d_beta[a][(i, c)] = b.d_beta[a];
                p.d_beta_pi[a][(i, c)] = b.d_beta_pi[a];
                p.d_beta_pi2[a][(i, c)] = b.d_beta_pi2[a];
            }
            p.sum_d_beta_beta += &b.d_beta_beta;
        }
        p.xi = (0..k)
            .map(|a| p.project_ratio(&p.d_beta_pi[a]))
            .collect::<Result<_>>()?;
        Ok(p)
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|o| **o).count()
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| (0..self.t).map(move |s| (i, s))).filter(|&(i, s)| self.observed[(i, s)])
    }

    /// Fitted values of the `w`-weighted projection of `num / ∂_π² ℓ`.
    pub fn project_ratio(&self, num: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let ratio = DMatrix::from_fn(self.n, self.t, |i, s| {
            if self.observed[(i, s)] {
                num[(i, s)] / self.d_pi2[(i, s)]
            } else {
                0.0
            }
        });
        Ok(project(&self.weights, &ratio)?.fitted)
    }

    /// `D_β ℓ = ∂_β ℓ - ∂_π ℓ · Ξ`.
    pub fn d_beta_tilde(&self, i: usize, s: usize) -> Vec<f64> {
        (0..self.k).map(|a| self.d_beta[a][(i, s)] - self.d_pi[(i, s)] * self.xi[a][(i, s)]).collect()
    }

    /// `D_βπ ℓ = ∂_βπ ℓ - ∂_π² ℓ · Ξ`.
    pub fn d_beta_pi_tilde(&self, i: usize, s: usize) -> Vec<f64> {
        (0..self.k).map(|a| self.d_beta_pi[a][(i, s)] - self.d_pi2[(i, s)] * self.xi[a][(i, s)]).collect()
    }

    /// `D_βπ² ℓ = ∂_βπ² ℓ - ∂_π³ ℓ · Ξ`.
    pub fn d_beta_pi2_tilde(&self, i: usize, s: usize) -> Vec<f64> {
        (0..self.k).map(|a| self.d_beta_pi2[a][(i, s)] - self.d_pi3[(i, s)] * self.xi[a][(i, s)]).collect()
    }

    /// Degrees-of-freedom weighted lag sum for unit `i`:
    /// `Σ_{j=0}^{L} c_ij Σ_t lagged(i, t-j)·current(i, t)` over pairs of
    /// observed cells, with `c_ij` the unit's observed count over its
    /// number of observed pairs at lag `j` (`T/(T-j)` when balanced).
    pub fn lag_sum(&self, i: usize, trim: usize, lagged: impl Fn(usize) -> f64, current: impl Fn(usize) -> Vec<f64>) -> Vec<f64> {
        let count = (0..self.t).filter(|&s| self.observed[(i, s)]).count() as f64;
        let mut out = vec![0.0; 0];
        for j in 0..=trim.min(self.t.saturating_sub(1)) {
            let mut pairs = 0usize;
            let mut acc: Vec<f64> = Vec::new();
            for s in j..self.t {
                if !(self.observed[(i, s)] && self.observed[(i, s - j)]) {
                    continue;
                }
                pairs += 1;
                let l = lagged(s - j);
                let c = current(s);
                if acc.is_empty() {
                    acc = vec![0.0; c.len()];
                }
                acc.iter_mut().zip(&c).for_each(|(a, v)| *a += l * v);
            }
            if pairs == 0 {
                continue;
            }
            let factor = count / pairs as f64;
            if out.is_empty() {
                out = vec![0.0; acc.len()];
            }
            out.iter_mut().zip(&acc).for_each(|(o, a)| *o += factor * a);
        }
        out
    }
}

/// Partial effect and its derivatives on every cell.
#[derive(Debug, Clone)]
pub struct EffectGrid {
    pub value: DMatrix<f64>,
    pub d_beta: Vec<DMatrix<f64>>,
    pub d_pi: DMatrix<f64>,
    pub d_pi2: DMatrix<f64>,
}

impl EffectGrid {
    pub fn new(d: &PanelDataset, f: &dyn LikelihoodFamily, spec: &PartialEffectSpec, s: &ParameterState) -> Result<Self> {
        spec.check(d.n_regressors())?;
        let (n, t, k) = (d.n_units(), d.n_periods(), d.n_regressors());
        let mut g = EffectGrid {
            value: DMatrix::zeros(n, t),
            d_beta: vec![DMatrix::zeros(n, t); k],
            d_pi: DMatrix::zeros(n, t),
            d_pi2: DMatrix::zeros(n, t),
        };
        for (i, c) in d.cells() {
            let e = partial_effect_bundle(f, spec, d.x(i, c), &s.beta, s.pi(i, c))?;
            g.value[(i, c)] = e.value;
            g.d_pi[(i, c)] = e.d_pi;
            g.d_pi2[(i, c)] = e.d_pi2;
            for a in 0..k {
                g.d_beta[a][(i, c)] = e.d_beta[a];
            }
        }
        Ok(g)
    }
}

/// `Ξ̂_k`: projection of `∂_β_k π ℓ / ∂_π² ℓ` under weights `-∂_π² ℓ`.
pub fn xi_hat(d: &PanelDataset, f: &dyn LikelihoodFamily, fit: &FitResult, k: usize) -> Result<DMatrix<f64>> {
    let mut p = PlugIns::at_fit(d, f, fit)?;
    Ok(p.xi.swap_remove(k))
}

/// `Ψ̂`: projection of `∂_π Δ / ∂_π² ℓ` under weights `-∂_π² ℓ`.
pub fn psi_hat(d: &PanelDataset, f: &dyn LikelihoodFamily, fit: &FitResult, spec: &PartialEffectSpec) -> Result<DMatrix<f64>> {
    let p = PlugIns::at_fit(d, f, fit)?;
    let e = EffectGrid::new(d, f, spec, &fit.state)?;
    p.project_ratio(&e.d_pi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::{Gaussian, Probit};
    use crate::solver::{fit, prune_separated, FitOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_panel(n: usize, t: usize, seed: u64) -> PanelDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * t).map(|_| rng.sample(StandardNormal)).collect();
        let y = x.iter().map(|v| v + rng.sample::<f64, _>(StandardNormal)).collect();
        PanelDataset::balanced(n, t, vec!["x1".into()], y, x).unwrap()
    }

    fn probit_panel(n: usize, t: usize, seed: u64) -> PanelDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * t).map(|_| rng.sample(StandardNormal)).collect();
        let y = x.iter().map(|v| (v + rng.sample::<f64, _>(StandardNormal) > 0.0) as u8 as f64).collect();
        let d = PanelDataset::balanced(n, t, vec!["x1".into()], y, x).unwrap();
        prune_separated(&d, &Probit).unwrap().0
    }

    #[test]
    fn gaussian_xi_is_two_way_mean() {
        let (n, t) = (5, 4);
        let d = gaussian_panel(n, t, 1);
        let r = fit(&d, &Gaussian, &FitOptions::default()).unwrap();
        let xi = xi_hat(&d, &Gaussian, &r, 0).unwrap();
        let x = d.regressor_grid(0);
        let grand = x.sum() / (n * t) as f64;
        for i in 0..n {
            for s in 0..t {
                let expect = x.row(i).sum() / t as f64 + x.column(s).sum() / n as f64 - grand;
                assert!((xi[(i, s)] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gaussian_score_operator_is_demeaned_regressor_times_residual() {
        let d = gaussian_panel(6, 5, 2);
        let r = fit(&d, &Gaussian, &FitOptions::default()).unwrap();
        let p = PlugIns::at_fit(&d, &Gaussian, &r).unwrap();
        for (i, s) in p.cells().collect::<Vec<_>>() {
            let xt = d.x(i, s)[0] - p.xi[0][(i, s)];
            let eps = p.d_pi[(i, s)];
            assert!((p.d_beta_tilde(i, s)[0] - xt * eps).abs() < 1e-10);
            assert!((p.d_beta_pi_tilde(i, s)[0] + xt).abs() < 1e-10);
            assert_eq!(p.d_beta_pi2_tilde(i, s)[0], 0.0);
        }
    }

    #[test]
    fn constant_regressor_projects_to_itself() {
        let d = probit_panel(8, 6, 3);
        let r = fit(&d, &Probit, &FitOptions::default()).unwrap();
        let p = PlugIns::at_fit(&d, &Probit, &r).unwrap();
        let c = DMatrix::from_fn(p.n, p.t, |i, s| 2.5 * p.d_pi2[(i, s)]);
        let xi = p.project_ratio(&c).unwrap();
        assert!((xi.add_scalar(-2.5)).amax() < 1e-10);
    }

    #[test]
    fn xi_matches_dense_inverse_formula() {
        let d = probit_panel(7, 5, 4);
        let r = fit(&d, &Probit, &FitOptions::default()).unwrap();
        let p = PlugIns::at_fit(&d, &Probit, &r).unwrap();
        let (n, t) = (p.n, p.t);
        // Ξ_it = -(NT)^{-1/2} Σ_jτ (H⁻¹_αα,ij + H⁻¹_γα,tj + H⁻¹_αγ,iτ + H⁻¹_γγ,tτ) ∂_βπ ℓ_jτ
        let h = crate::hessian::StructuredHessian::scaled(p.weights.clone(), 1.0).to_dense();
        let inv = h.try_inverse().unwrap();
        let root = ((n * t) as f64).sqrt();
        for i in 0..n {
            for s in 0..t {
                let mut acc = 0.0;
                for j in 0..n {
                    for tau in 0..t {
                        let hsum = inv[(i, j)] + inv[(n + s, j)] + inv[(i, n + tau)] + inv[(n + s, n + tau)];
                        acc += hsum * p.d_beta_pi[0][(j, tau)];
                    }
                }
                assert!((p.xi[0][(i, s)] + acc / root).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_slope_binary_effect_has_zero_psi() {
        let d = probit_panel(6, 6, 5);
        let r = fit(&d, &Probit, &FitOptions::default()).unwrap();
        let mut f0 = r.clone();
        f0.state.beta = vec![0.0];
        let psi = psi_hat(&d, &Probit, &f0, &PartialEffectSpec::binary(0)).unwrap();
        assert_eq!(psi.amax(), 0.0);
    }

    #[test]
    fn lag_sum_uses_degrees_of_freedom_factor() {
        let d = gaussian_panel(2, 4, 6);
        let r = fit(&d, &Gaussian, &FitOptions::default()).unwrap();
        let p = PlugIns::at_fit(&d, &Gaussian, &r).unwrap();
        let ones = p.lag_sum(0, 1, |_| 1.0, |_| vec![1.0]);
        // j=0: 4 pairs; j=1: 3 pairs scaled by 4/3
        assert!((ones[0] - (4.0 + 3.0 * 4.0 / 3.0)).abs() < 1e-15);
        let zero = p.lag_sum(0, 0, |_| 1.0, |_| vec![1.0]);
        assert_eq!(zero[0], 4.0);
    }
}
