//! Damped Newton maximization of the fixed-effects log-likelihood.
//!
//! Each step eliminates the `N+T` effects through the structured
//! factorization and solves the remaining `K×K` Schur system for `β`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PanelError, Result};
use crate::family::{index, LikelihoodFamily};
use crate::hessian::{Normalization, StructuredHessian};
use crate::panel::{validate, PanelDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub normalization: Normalization,
    /// Gradient tolerance, relative to `1 + |objective|`.
    pub tol_grad: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Effects beyond this magnitude are reported as separation.
    pub effect_bound: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            normalization: Normalization::default(),
            tol_grad: 1e-8,
            max_iter: 200,
            max_halvings: 30,
            effect_bound: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub normalization: Normalization,
}

impl ParameterState {
    pub fn pi(&self, i: usize, t: usize) -> f64 {
        self.alpha[i] + self.gamma[t]
    }

    /// Moves the additive constant between `α` and `γ` as the normalization requires.
    fn renormalize(&mut self) {
        let c = match self.normalization {
            Normalization::DropFirstAlpha => self.alpha[0],
            Normalization::DropFirstGamma => -self.gamma[0],
            Normalization::Penalty { .. } => return,
        };
        self.alpha.iter_mut().for_each(|a| *a -= c);
        self.gamma.iter_mut().for_each(|g| *g += c);
    }

    fn effects_imbalance(&self) -> f64 {
        self.alpha.iter().sum::<f64>() - self.gamma.iter().sum::<f64>()
    }

    /// Restriction to a subset of units and an index range of periods.
    pub fn restrict(&self, units: &[usize], times: std::ops::Range<usize>) -> Self {
        let mut s = Self {
            beta: self.beta.clone(),
            alpha: units.iter().map(|&i| self.alpha[i]).collect(),
            gamma: self.gamma[times].to_vec(),
            normalization: self.normalization,
        };
        s.renormalize();
        s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub state: ParameterState,
    /// Unpenalized log-likelihood at the solution.
    pub loglik: f64,
    pub iterations: usize,
    /// Max-norm of the gradient of the objective at the solution.
    pub gradient_norm: f64,
    pub converged: bool,
    /// Objective value after each accepted step, starting value first.
    pub objective_path: Vec<f64>,
}

impl FitResult {
    pub fn beta(&self) -> &[f64] {
        &self.state.beta
    }

    /// Fitted index `α̂_i + γ̂_t` for every cell.
    pub fn pi_grid(&self) -> DMatrix<f64> {
        let s = &self.state;
        DMatrix::from_fn(s.alpha.len(), s.gamma.len(), |i, t| s.pi(i, t))
    }
}

/// Fixed-effects estimates of `(β, α, γ)`.
pub fn fit(d: &PanelDataset, f: &dyn LikelihoodFamily, opts: &FitOptions) -> Result<FitResult> {
    check_inputs(d, f, true)?;
    newton(d, f, opts, start_values(d, f, opts.normalization), false)
}

/// As [`fit`], starting from `start` (e.g. a related fit).
pub fn fit_from(d: &PanelDataset, f: &dyn LikelihoodFamily, opts: &FitOptions, start: &ParameterState) -> Result<FitResult> {
    check_inputs(d, f, true)?;
    newton(d, f, opts, checked_start(d, opts, start)?, false)
}

/// Effects maximizing the likelihood with `β` held at `beta`.
pub fn fit_given_beta(
    d: &PanelDataset,
    f: &dyn LikelihoodFamily,
    opts: &FitOptions,
    beta: &[f64],
    start: Option<&ParameterState>,
) -> Result<FitResult> {
    check_inputs(d, f, false)?;
    if beta.len() != d.n_regressors() {
        return Err(PanelError::InvalidSpec(format!("β has {} entries, K={}", beta.len(), d.n_regressors())));
    }
    let mut s = match start {
        Some(s) => checked_start(d, opts, s)?,
        None => start_values(d, f, opts.normalization),
    };
    s.beta = beta.to_vec();
    newton(d, f, opts, s, true)
}

fn checked_start(d: &PanelDataset, opts: &FitOptions, start: &ParameterState) -> Result<ParameterState> {
    if start.beta.len() != d.n_regressors() || start.alpha.len() != d.n_units() || start.gamma.len() != d.n_periods() {
        return Err(PanelError::InvalidSpec("start values do not match the panel dimensions".into()));
    }
    let mut s = start.clone();
    s.normalization = opts.normalization;
    s.renormalize();
    Ok(s)
}

fn check_inputs(d: &PanelDataset, f: &dyn LikelihoodFamily, need_beta: bool) -> Result<()> {
    for (i, t) in d.cells() {
        f.check_outcome(d.y(i, t))?;
    }
    for i in 0..d.n_units() {
        let ys: Vec<f64> = (0..d.n_periods()).filter(|&t| d.observed(i, t)).map(|t| d.y(i, t)).collect();
        if f.separated(&ys) {
            return Err(PanelError::Separation(format!(
                "unit `{}` has outcomes that push its effect to infinity",
                d.unit_ids()[i]
            )));
        }
    }
    for t in 0..d.n_periods() {
        let ys: Vec<f64> = (0..d.n_units()).filter(|&i| d.observed(i, t)).map(|i| d.y(i, t)).collect();
        if f.separated(&ys) {
            return Err(PanelError::Separation(format!(
                "period `{}` has outcomes that push its effect to infinity",
                d.time_ids()[t]
            )));
        }
    }
    if need_beta {
        let report = validate(d);
        if let Some(&k) = report.collinear.first() {
            return Err(PanelError::SingularInformation(format!(
                "regressor `{}` has no variation beyond the unit and period effects",
                d.regressor_names()[k]
            )));
        }
    }
    Ok(())
}

fn start_values(d: &PanelDataset, f: &dyn LikelihoodFamily, normalization: Normalization) -> ParameterState {
    let alpha = (0..d.n_units())
        .map(|i| {
            let obs: Vec<f64> = (0..d.n_periods()).filter(|&t| d.observed(i, t)).map(|t| d.y(i, t)).collect();
            f.link(obs.iter().sum::<f64>() / obs.len() as f64)
        })
        .collect();
    let mut s = ParameterState {
        beta: vec![0.0; d.n_regressors()],
        alpha,
        gamma: vec![0.0; d.n_periods()],
        normalization,
    };
    s.renormalize();
    s
}

fn penalty_b(n: Normalization) -> f64 {
    match n {
        Normalization::Penalty { b } => b,
        _ => 0.0,
    }
}

fn objective(d: &PanelDataset, f: &dyn LikelihoodFamily, s: &ParameterState) -> Result<(f64, f64)> {
    let mut ll = 0.0;
    for (i, t) in d.cells() {
        ll += f.index_derivs(d.y(i, t), index(d.x(i, t), &s.beta) + s.pi(i, t))?.value;
    }
    let p = s.effects_imbalance();
    Ok((ll, ll - 0.5 * penalty_b(s.normalization) * p * p))
}

/// Gradient and negative Hessian pieces of the objective.
struct Local {
    grad_beta: DVector<f64>,
    grad_phi: Vec<f64>,
    neg_beta_beta: DMatrix<f64>,
    /// `(N+T)×K` cross block of the negative Hessian.
    neg_phi_beta: DMatrix<f64>,
    weights: DMatrix<f64>,
}

fn local(d: &PanelDataset, f: &dyn LikelihoodFamily, s: &ParameterState) -> Result<Local> {
    let (n, t, k) = (d.n_units(), d.n_periods(), d.n_regressors());
    let mut grad_beta = DVector::zeros(k);
    let mut grad_phi = vec![0.0; n + t];
    let mut neg_beta_beta = DMatrix::zeros(k, k);
    let mut neg_phi_beta = DMatrix::zeros(n + t, k);
    let mut weights = DMatrix::zeros(n, t);
    for (i, s_) in d.cells() {
        let b = f.loglik_bundle(d.y(i, s_), d.x(i, s_), &s.beta, s.pi(i, s_))?;
        for a in 0..k {
            grad_beta[a] += b.d_beta[a];
            neg_phi_beta[(i, a)] -= b.d_beta_pi[a];
            neg_phi_beta[(n + s_, a)] -= b.d_beta_pi[a];
        }
        neg_beta_beta -= &b.d_beta_beta;
        grad_phi[i] += b.d_pi;
        grad_phi[n + s_] += b.d_pi;
        weights[(i, s_)] = -b.d_pi2;
    }
    let pen = penalty_b(s.normalization) * s.effects_imbalance();
    for (j, g) in grad_phi.iter_mut().enumerate() {
        *g += if j < n { -pen } else { pen };
    }
    match s.normalization {
        Normalization::DropFirstAlpha => grad_phi[0] = 0.0,
        Normalization::DropFirstGamma => grad_phi[n] = 0.0,
        Normalization::Penalty { .. } => {}
    }
    Ok(Local { grad_beta, grad_phi, neg_beta_beta, neg_phi_beta, weights })
}

fn gradient_norm(l: &Local, fixed_beta: bool) -> f64 {
    let gb = if fixed_beta { 0.0 } else { l.grad_beta.amax() };
    l.grad_phi.iter().fold(gb, |m, v| m.max(v.abs()))
}

/// Full Newton direction `(Δβ, Δφ)` by block elimination.
fn newton_direction(l: &Local, normalization: Normalization, fixed_beta: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let factor = StructuredHessian::new(l.weights.clone(), normalization, 1.0).factor()?;
    let y0 = factor.solve(&l.grad_phi);
    if fixed_beta {
        return Ok((vec![0.0; l.grad_beta.len()], y0));
    }
    let y = factor.solve_matrix(&l.neg_phi_beta);
    let c = &l.neg_phi_beta;
    let schur = &l.neg_beta_beta - c.transpose() * &y;
    let rhs = &l.grad_beta - c.transpose() * DVector::from_column_slice(&y0);
    let chol = Cholesky::new(schur)
        .ok_or_else(|| PanelError::NumericalBreakdown("Schur complement for β is not positive definite".into()))?;
    let db = chol.solve(&rhs);
    let dphi_corr = &y * &db;
    let dphi = y0.iter().zip(dphi_corr.iter()).map(|(a, b)| a - b).collect();
    Ok((db.iter().copied().collect(), dphi))
}

fn stepped(s: &ParameterState, db: &[f64], dphi: &[f64], step: f64) -> ParameterState {
    let n = s.alpha.len();
    let mut out = s.clone();
    out.beta.iter_mut().zip(db).for_each(|(b, d)| *b += step * d);
    out.alpha.iter_mut().zip(&dphi[..n]).for_each(|(a, d)| *a += step * d);
    out.gamma.iter_mut().zip(&dphi[n..]).for_each(|(g, d)| *g += step * d);
    out
}

/// One damped Newton step; returns the new state and its objective value.
pub fn newton_step(
    d: &PanelDataset,
    f: &dyn LikelihoodFamily,
    state: &ParameterState,
    max_halvings: usize,
) -> Result<(ParameterState, f64)> {
    let (_, q0) = objective(d, f, state)?;
    let l = local(d, f, state)?;
    let (db, dphi) = newton_direction(&l, state.normalization, false)?;
    let gain = predicted_gain(&l, &db, &dphi);
    Ok(damped(d, f, state, q0, &db, &dphi, gain, max_halvings)?.unwrap_or((state.clone(), q0)))
}

/// Directional derivative of the objective along the Newton direction.
fn predicted_gain(l: &Local, db: &[f64], dphi: &[f64]) -> f64 {
    let gb: f64 = l.grad_beta.iter().zip(db).map(|(g, d)| g * d).sum();
    gb + l.grad_phi.iter().zip(dphi).map(|(g, d)| g * d).sum::<f64>()
}

/// Relative size below which objective differences are rounding noise.
const OBJECTIVE_RESOLUTION: f64 = 1e-13;

#[allow(clippy::too_many_arguments)]
fn damped(
    d: &PanelDataset,
    f: &dyn LikelihoodFamily,
    state: &ParameterState,
    q0: f64,
    db: &[f64],
    dphi: &[f64],
    gain: f64,
    max_halvings: usize,
) -> Result<Option<(ParameterState, f64)>> {
    // Near the optimum the ascent is invisible in the objective, so the
    // full step is taken on the strength of the local quadratic model.
    if gain.abs() <= OBJECTIVE_RESOLUTION * (1.0 + q0.abs()) {
        let trial = stepped(state, db, dphi, 1.0);
        let (_, q) = objective(d, f, &trial)?;
        return Ok(Some((trial, q)));
    }
    let mut step = 1.0;
    for _ in 0..=max_halvings {
        let trial = stepped(state, db, dphi, step);
        match objective(d, f, &trial) {
            Ok((_, q)) if q >= q0 => return Ok(Some((trial, q))),
            Ok(_) | Err(PanelError::NumericOverflow { .. }) => step *= 0.5,
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

fn newton(
    d: &PanelDataset,
    f: &dyn LikelihoodFamily,
    opts: &FitOptions,
    mut state: ParameterState,
    fixed_beta: bool,
) -> Result<FitResult> {
    let (_, mut q) = objective(d, f, &state)?;
    let mut path = vec![q];
    let mut iterations = 0;
    let (converged, gnorm) = loop {
        let l = local(d, f, &state)?;
        let gnorm = gradient_norm(&l, fixed_beta);
        if gnorm <= opts.tol_grad * (1.0 + q.abs()) {
            if let Some(what) = uninformative(d, &l.weights) {
                return Err(PanelError::Separation(format!(
                    "{what} carries no information at the optimum (quasi-complete separation)"
                )));
            }
            break (true, gnorm);
        }
        if iterations >= opts.max_iter {
            break (false, gnorm);
        }
        let (db, dphi) = newton_direction(&l, state.normalization, fixed_beta)?;
        iterations += 1;
        let gain = predicted_gain(&l, &db, &dphi);
        match damped(d, f, &state, q, &db, &dphi, gain, opts.max_halvings)? {
            Some((next, qn)) => {
                state = next;
                q = qn;
                path.push(q);
            }
            // no ascent available at machine precision
            None => break (false, gnorm),
        }
        if drifted(&state, opts.effect_bound) {
            break (false, gnorm);
        }
    };
    if drifted(&state, opts.effect_bound) {
        return Err(PanelError::Separation(format!(
            "estimated effects exceed {} in magnitude after {iterations} iterations",
            opts.effect_bound
        )));
    }
    if !converged {
        return Err(PanelError::NotConverged { iterations, gradient_norm: gnorm });
    }
    let (loglik, _) = objective(d, f, &state)?;
    Ok(FitResult { state, loglik, iterations, gradient_norm: gnorm, converged, objective_path: path })
}

/// A unit or period whose summed curvature has collapsed, which happens when
/// the index diverges to perfectly fit every cell it touches.
fn uninformative(d: &PanelDataset, w: &DMatrix<f64>) -> Option<String> {
    const FLOOR: f64 = 1e-8;
    for i in 0..d.n_units() {
        let sum: f64 = (0..d.n_periods()).filter(|&s| d.observed(i, s)).map(|s| w[(i, s)]).sum();
        if sum <= FLOOR * d.unit_count(i) as f64 {
            return Some(format!("unit `{}`", d.unit_ids()[i]));
        }
    }
    for s in 0..d.n_periods() {
        let sum: f64 = (0..d.n_units()).filter(|&i| d.observed(i, s)).map(|i| w[(i, s)]).sum();
        if sum <= FLOOR * d.period_count(s) as f64 {
            return Some(format!("period `{}`", d.time_ids()[s]));
        }
    }
    None
}

fn drifted(s: &ParameterState, bound: f64) -> bool {
    s.alpha.iter().chain(&s.gamma).any(|v| !(v.abs() <= bound))
}

/// Negative Hessian of the effects block at a fit, in the scaled form
/// `H̄ = H̄* + b·vv'/√(NT)`.
pub fn effects_hessian(d: &PanelDataset, f: &dyn LikelihoodFamily, fit: &FitResult, b: f64) -> Result<StructuredHessian> {
    let mut w = DMatrix::zeros(d.n_units(), d.n_periods());
    for (i, t) in d.cells() {
        let eta = index(d.x(i, t), fit.beta()) + fit.state.pi(i, t);
        w[(i, t)] = -f.index_derivs(d.y(i, t), eta)?.d2;
    }
    Ok(StructuredHessian::scaled(w, b))
}

/// Repeatedly drops units and periods whose outcomes make their effect
/// unbounded. Returns the reduced panel and the kept unit and period indices.
pub fn prune_separated(d: &PanelDataset, f: &dyn LikelihoodFamily) -> Result<(PanelDataset, Vec<usize>, Vec<usize>)> {
    let mut units: Vec<usize> = (0..d.n_units()).collect();
    let mut times: Vec<usize> = (0..d.n_periods()).collect();
    loop {
        let ys = |i: usize, t: usize| d.observed(i, t).then(|| d.y(i, t));
        let keep_units: Vec<usize> = units
            .iter()
            .copied()
            .filter(|&i| {
                let v: Vec<f64> = times.iter().filter_map(|&t| ys(i, t)).collect();
                !v.is_empty() && !f.separated(&v)
            })
            .collect();
        let keep_times: Vec<usize> = times
            .iter()
            .copied()
            .filter(|&t| {
                let v: Vec<f64> = keep_units.iter().filter_map(|&i| ys(i, t)).collect();
                !v.is_empty() && !f.separated(&v)
            })
            .collect();
        let stable = keep_units.len() == units.len() && keep_times.len() == times.len();
        units = keep_units;
        times = keep_times;
        if units.len() < 2 || times.len() < 2 {
            return Err(PanelError::DegeneratePanel("fewer than two units or periods remain after removing separated groups".into()));
        }
        if stable {
            break;
        }
    }
    Ok((d.restrict(&units, &times)?, units, times))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::{Gaussian, Logit, Poisson, Probit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn probit_panel(n: usize, t: usize, seed: u64) -> PanelDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha: Vec<f64> = (0..n).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let gamma: Vec<f64> = (0..t).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            for s in 0..t {
                let xv: f64 = rng.sample::<f64, _>(StandardNormal) + alpha[i];
                let e: f64 = rng.sample(StandardNormal);
                x.push(xv);
                y.push((xv + alpha[i] + gamma[s] > e) as u8 as f64);
            }
        }
        PanelDataset::balanced(n, t, vec!["x1".into()], y, x).unwrap()
    }

    fn noiseless_gaussian(n: usize, t: usize) -> PanelDataset {
        let x: Vec<f64> = (0..n * t).map(|c| ((c * 13 % 11) as f64 * 0.9).sin() + (c % t) as f64 * 0.1).collect();
        let y = (0..n * t).map(|c| 2.0 * x[c] + (c / t) as f64 * 0.3 - (c % t) as f64 * 0.2).collect();
        PanelDataset::balanced(n, t, vec!["x1".into()], y, x).unwrap()
    }

    #[test]
    fn gaussian_interpolation_is_exact() {
        let d = noiseless_gaussian(6, 5);
        let r = fit(&d, &Gaussian, &FitOptions::default()).unwrap();
        assert!((r.beta()[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn gaussian_takes_one_newton_step() {
        let d = noiseless_gaussian(5, 7);
        let r = fit(&d, &Gaussian, &FitOptions::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.objective_path.len(), 2);
    }

    #[test]
    fn probit_objective_is_monotone() {
        let d = probit_panel(5, 5, 11);
        match fit(&d, &Probit, &FitOptions::default()) {
            Ok(r) => {
                assert!(r.converged);
                assert!(r.objective_path.windows(2).all(|w| w[1] >= w[0]));
            }
            Err(PanelError::Separation(_)) => {}
            Err(e) => panic!("{e}"),
        }
        let d = probit_panel(12, 10, 12);
        let (d, _, _) = prune_separated(&d, &Probit).unwrap();
        let r = fit(&d, &Probit, &FitOptions::default()).unwrap();
        assert!(r.objective_path.windows(2).all(|w| w[1] >= w[0]));
        assert!(r.gradient_norm <= 1e-8 * (1.0 + r.loglik.abs()));
    }

    #[test]
    fn stationary_point_is_kept() {
        let d = noiseless_gaussian(4, 4);
        let r = fit(&d, &Gaussian, &FitOptions::default()).unwrap();
        let (s, _) = newton_step(&d, &Gaussian, &r.state, 30).unwrap();
        let diff = s.beta.iter().zip(&r.state.beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn normalizations_agree() {
        let (d, _, _) = prune_separated(&probit_panel(15, 8, 3), &Probit).unwrap();
        let norms = [
            Normalization::Penalty { b: 0.5 },
            Normalization::Penalty { b: 1.0 },
            Normalization::Penalty { b: 2.0 },
            Normalization::DropFirstAlpha,
            Normalization::DropFirstGamma,
        ];
        let fits: Vec<FitResult> = norms
            .iter()
            .map(|&n| fit(&d, &Probit, &FitOptions { normalization: n, ..Default::default() }).unwrap())
            .collect();
        for r in &fits[1..] {
            assert!((r.beta()[0] - fits[0].beta()[0]).abs() < 1e-8);
            assert!((r.pi_grid() - fits[0].pi_grid()).amax() < 1e-8);
            assert!((r.loglik - fits[0].loglik).abs() < 1e-8);
        }
        let pen = &fits[1].state;
        assert!(pen.effects_imbalance().abs() < 1e-8);
        assert_eq!(fits[3].state.alpha[0], 0.0);
        assert_eq!(fits[4].state.gamma[0], 0.0);
    }

    /// Rows of `d` reordered so that new unit `i` is old unit `perm[i]`.
    fn permute_units(d: &PanelDataset, perm: &[usize]) -> PanelDataset {
        let t = d.n_periods();
        let y = perm.iter().flat_map(|&i| (0..t).map(move |s| d.y(i, s))).collect();
        let x = perm.iter().flat_map(|&i| (0..t).flat_map(move |s| d.x(i, s).to_vec())).collect();
        PanelDataset::balanced(perm.len(), t, d.regressor_names().to_vec(), y, x).unwrap()
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        #[test]
        fn slope_ignores_normalization(seed in 0u64..5_000, n in 6usize..14, t in 5usize..10, b in 0.1f64..5.0) {
            let Ok((d, _, _)) = prune_separated(&probit_panel(n, t, seed), &Probit) else { return Ok(()) };
            let fits: Vec<FitResult> = [Normalization::DropFirstGamma, Normalization::DropFirstAlpha, Normalization::Penalty { b }]
                .iter()
                .map(|&m| fit(&d, &Probit, &FitOptions { normalization: m, ..Default::default() }))
                .collect::<Result<_>>()
                .unwrap_or_default();
            proptest::prop_assume!(fits.len() == 3);
            for r in &fits[1..] {
                proptest::prop_assert!((r.beta()[0] - fits[0].beta()[0]).abs() < 1e-8);
                proptest::prop_assert!((r.pi_grid() - fits[0].pi_grid()).amax() < 1e-7);
            }
        }

        #[test]
        fn slope_ignores_unit_order(seed in 0u64..5_000, n in 6usize..14, t in 5usize..10, shift in 1usize..13) {
            let Ok((d, _, _)) = prune_separated(&probit_panel(n, t, seed), &Probit) else { return Ok(()) };
            let m = d.n_units();
            let perm: Vec<usize> = (0..m).map(|i| (i * 5 + shift) % m).collect();
            proptest::prop_assume!({ let mut p = perm.clone(); p.sort(); p.dedup(); p.len() == m });
            let (Ok(a), Ok(b)) = (fit(&d, &Probit, &FitOptions::default()), fit(&permute_units(&d, &perm), &Probit, &FitOptions::default())) else {
                return Ok(());
            };
            proptest::prop_assert!((a.beta()[0] - b.beta()[0]).abs() < 1e-8);
            proptest::prop_assert!((a.loglik - b.loglik).abs() < 1e-8 * (1.0 + a.loglik.abs()));
        }
    }

    #[test]
    fn all_one_unit_is_separation() {
        let d = probit_panel(6, 6, 4);
        let mut y: Vec<f64> = (0..36).map(|c| d.y(c / 6, c % 6)).collect();
        for s in 0..6 {
            y[s] = 1.0;
        }
        let x: Vec<f64> = (0..36).map(|c| d.x(c / 6, c % 6)[0]).collect();
        let d = PanelDataset::balanced(6, 6, vec!["x1".into()], y, x).unwrap();
        assert!(matches!(fit(&d, &Probit, &FitOptions::default()), Err(PanelError::Separation(_))));
    }

    #[test]
    fn poisson_negative_outcome_rejected() {
        let mut d = noiseless_gaussian(3, 3);
        d = PanelDataset::balanced(3, 3, vec!["x1".into()], (0..9).map(|c| c as f64 - 1.0).collect(), (0..9).map(|c| d.x(c / 3, c % 3)[0]).collect()).unwrap();
        assert!(matches!(fit(&d, &Poisson, &FitOptions::default()), Err(PanelError::InvalidData(_))));
    }

    #[test]
    fn iteration_limit_reported() {
        let (d, _, _) = prune_separated(&probit_panel(10, 10, 5), &Logit).unwrap();
        let r = fit(&d, &Logit, &FitOptions { max_iter: 1, ..Default::default() });
        assert!(matches!(r, Err(PanelError::NotConverged { iterations: 1, .. })));
    }

    #[test]
    fn fixed_beta_fit_matches_at_optimum() {
        let (d, _, _) = prune_separated(&probit_panel(10, 7, 6), &Probit).unwrap();
        let r = fit(&d, &Probit, &FitOptions::default()).unwrap();
        let g = fit_given_beta(&d, &Probit, &FitOptions::default(), r.beta(), None).unwrap();
        assert!((g.pi_grid() - r.pi_grid()).amax() < 1e-7);
    }

    #[test]
    fn constant_regressor_is_singular() {
        let d = PanelDataset::balanced(3, 3, vec!["c".into()], (0..9).map(|c| c as f64).collect(), vec![1.0; 9]).unwrap();
        assert!(matches!(fit(&d, &Gaussian, &FitOptions::default()), Err(PanelError::SingularInformation(_))));
    }

    #[test]
    fn pruning_is_iterative() {
        // removing unit 0 (all ones) leaves period 0 all zeros, whose
        // removal leaves unit 3 all ones
        let y = vec![
            1.0, 1.0, 1.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0, //
            0.0, 1.0, 1.0,
        ];
        let x: Vec<f64> = (0..12).map(|c| c as f64 * 0.1).collect();
        let d = PanelDataset::balanced(4, 3, vec!["x".into()], y, x).unwrap();
        let (p, units, times) = prune_separated(&d, &Probit).unwrap_or_else(|e| panic!("{e}"));
        assert_eq!(units, vec![1, 2]);
        assert_eq!(times, vec![1, 2]);
        assert_eq!(p.n_units(), 2);
    }
}
