//! Split-panel jackknife corrections and the subpanel homogeneity test.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::ape::compute_ape;
use crate::correction::{estimate_w, rows};
use crate::error::{PanelError, Result};
use crate::family::{LikelihoodFamily, PartialEffectSpec};
use crate::panel::{halves, subpanel, PanelDataset, SubpanelSpec};
use crate::plugin::PlugIns;
use crate::solver::{fit, fit_from, prune_separated, FitOptions, FitResult};

/// How the cross-section is split in two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum UnitPartition {
    /// First and second half of the units in data order.
    #[default]
    ObservationOrder,
    /// Average over `draws` random half-splits.
    Random { draws: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct JackknifeOptions {
    pub partition: UnitPartition,
    pub seed: u64,
    /// Drop units and periods that are separated within a subpanel before
    /// fitting it, instead of failing.
    pub prune_subpanels: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct JackknifeResult {
    pub corrected: Vec<f64>,
    pub full: Vec<f64>,
    #[serde(skip)]
    pub full_fit: FitResult,
    pub half_time_estimates: [Vec<f64>; 2],
    /// One entry per unit half, two per partition draw.
    pub half_unit_estimates: Vec<Vec<f64>>,
    pub partitions_used: Vec<[Vec<usize>; 2]>,
    pub rng_seed: Option<u64>,
}

/// `3·full − mean(time halves) − mean(unit halves)`, coordinate-wise.
pub fn combine(full: &[f64], time: &[Vec<f64>; 2], units: &[Vec<f64>]) -> Vec<f64> {
    (0..full.len())
        .map(|k| {
            let t = (time[0][k] + time[1][k]) / 2.0;
            let u = units.iter().map(|v| v[k]).sum::<f64>() / units.len() as f64;
            3.0 * full[k] - t - u
        })
        .collect()
}

impl JackknifeResult {
    /// Recomputes the corrected vector from the stored subestimates.
    pub fn recombined(&self) -> Vec<f64> {
        combine(&self.full, &self.half_time_estimates, &self.half_unit_estimates)
    }
}

fn describe(s: &SubpanelSpec, d: &PanelDataset) -> String {
    let ids = d.unit_ids();
    let times = d.time_ids();
    let units = if s.units.len() <= 6 {
        s.units.iter().map(|&i| ids[i].as_str()).collect::<Vec<_>>().join(",")
    } else {
        format!("{} units from `{}`", s.units.len(), ids[s.units[0]])
    };
    format!("units [{units}] × periods [{}..={}]", times[s.times.start], times[s.times.end - 1])
}

/// Unit halves for every draw, in the order they are fitted.
fn unit_partitions(n: usize, opts: &JackknifeOptions) -> Result<Vec<[Vec<usize>; 2]>> {
    let split = |order: &[usize]| {
        let (a, b) = halves(order.len());
        let mut first = order[a].to_vec();
        let mut second = order[b].to_vec();
        first.sort_unstable();
        second.sort_unstable();
        [first, second]
    };
    let order: Vec<usize> = (0..n).collect();
    match opts.partition {
        UnitPartition::ObservationOrder => Ok(vec![split(&order)]),
        UnitPartition::Random { draws: 0 } => Err(PanelError::Config("random unit partition needs at least one draw".into())),
        UnitPartition::Random { draws } => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            Ok((0..draws)
                .map(|_| {
                    let mut perm = order.clone();
                    perm.shuffle(&mut rng);
                    split(&perm)
                })
                .collect())
        }
    }
}

struct SubFit {
    data: PanelDataset,
    fit: FitResult,
}

fn fit_subpanel(
    d: &PanelDataset,
    f: &dyn LikelihoodFamily,
    fit_opts: &FitOptions,
    full: &FitResult,
    spec: &SubpanelSpec,
    prune: bool,
) -> Result<SubFit> {
    let wrap = |e: PanelError| PanelError::JackknifeSubfit { subpanel: describe(spec, d), source: Box::new(e) };
    let sub = subpanel(d, spec).map_err(wrap)?;
    let start = full.state.restrict(&spec.units, spec.times.clone());
    if prune {
        let (pruned, units, times) = prune_separated(&sub, f).map_err(wrap)?;
        let mut st = start.clone();
        st.alpha = units.iter().map(|&i| start.alpha[i]).collect();
        st.gamma = times.iter().map(|&t| start.gamma[t]).collect();
        let fit = fit_from(&pruned, f, fit_opts, &st).map_err(wrap)?;
        Ok(SubFit { data: pruned, fit })
    } else {
        let fit = fit_from(&sub, f, fit_opts, &start).map_err(wrap)?;
        Ok(SubFit { data: sub, fit })
    }
}

struct Splits {
    full_data: PanelDataset,
    full: FitResult,
    time: [SubFit; 2],
    units: Vec<SubFit>,
    partitions: Vec<[Vec<usize>; 2]>,
}

fn split_fits(d: &PanelDataset, f: &dyn LikelihoodFamily, fit_opts: &FitOptions, opts: &JackknifeOptions) -> Result<Splits> {
    let (n, t) = (d.n_units(), d.n_periods());
    if n < 4 || t < 4 {
        return Err(PanelError::DegeneratePanel(format!(
            "split-panel jackknife needs at least 4 units and 4 periods, got N={n}, T={t}"
        )));
    }
    let full = fit(d, f, fit_opts)?;
    let partitions = unit_partitions(n, opts)?;
    let (t1, t2) = halves(t);
    let all: Vec<usize> = (0..n).collect();
    let mut specs = vec![SubpanelSpec { units: all.clone(), times: t1 }, SubpanelSpec { units: all, times: t2 }];
    for p in &partitions {
        for half in p {
            specs.push(SubpanelSpec { units: half.clone(), times: 0..t });
        }
    }
    let fits: Vec<SubFit> = specs
        .par_iter()
        .map(|s| fit_subpanel(d, f, fit_opts, &full, s, opts.prune_subpanels))
        .collect::<Result<_>>()?;
    let mut it = fits.into_iter();
    let time = [it.next().unwrap(), it.next().unwrap()];
    Ok(Splits { full_data: d.clone(), full, time, units: it.collect(), partitions })
}

impl Splits {
    fn result(&self, value: impl Fn(&PanelDataset, &FitResult) -> Result<Vec<f64>>, seed: Option<u64>) -> Result<JackknifeResult> {
        let full = value(&self.full_data, &self.full)?;
        let half_time_estimates = [value(&self.time[0].data, &self.time[0].fit)?, value(&self.time[1].data, &self.time[1].fit)?];
        let half_unit_estimates = self.units.iter().map(|s| value(&s.data, &s.fit)).collect::<Result<Vec<_>>>()?;
        Ok(JackknifeResult {
            corrected: combine(&full, &half_time_estimates, &half_unit_estimates),
            full,
            full_fit: self.full.clone(),
            half_time_estimates,
            half_unit_estimates,
            partitions_used: self.partitions.clone(),
            rng_seed: seed,
        })
    }
}

fn seed_used(opts: &JackknifeOptions) -> Option<u64> {
    matches!(opts.partition, UnitPartition::Random { .. }).then_some(opts.seed)
}

/// Jackknife-corrected slope estimates.
pub fn spj_beta(d: &PanelDataset, f: &dyn LikelihoodFamily, fit_opts: &FitOptions, opts: &JackknifeOptions) -> Result<JackknifeResult> {
    split_fits(d, f, fit_opts, opts)?.result(|_, r| Ok(r.beta().to_vec()), seed_used(opts))
}

/// Jackknife-corrected average partial effects, one per spec. Each
/// subpanel's effect is averaged over that subpanel with its own fit.
pub fn spj_ape(
    d: &PanelDataset,
    f: &dyn LikelihoodFamily,
    specs: &[PartialEffectSpec],
    fit_opts: &FitOptions,
    opts: &JackknifeOptions,
) -> Result<JackknifeResult> {
    for s in specs {
        s.check(d.n_regressors())?;
    }
    split_fits(d, f, fit_opts, opts)?.result(|data, r| Ok(compute_ape(data, f, r, specs)?.delta), seed_used(opts))
}

/// Slopes and jackknife-corrected APEs from one set of subfits.
pub fn spj_both(
    d: &PanelDataset,
    f: &dyn LikelihoodFamily,
    specs: &[PartialEffectSpec],
    fit_opts: &FitOptions,
    opts: &JackknifeOptions,
) -> Result<(JackknifeResult, JackknifeResult)> {
    for s in specs {
        s.check(d.n_regressors())?;
    }
    let splits = split_fits(d, f, fit_opts, opts)?;
    let beta = splits.result(|_, r| Ok(r.beta().to_vec()), seed_used(opts))?;
    let ape = splits.result(|data, r| Ok(compute_ape(data, f, r, specs)?.delta), seed_used(opts))?;
    Ok((beta, ape))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitAxis {
    Time,
    CrossSection,
}

impl std::str::FromStr for SplitAxis {
    type Err = PanelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(SplitAxis::Time),
            "cross-section" => Ok(SplitAxis::CrossSection),
            other => Err(PanelError::Config(format!("unknown axis `{other}` (expected time|cross-section)"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WaldTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// `(a−b)'V⁻¹(a−b)` against a chi-square with `len(a)` degrees of freedom.
pub fn wald(a: &[f64], b: &[f64], v: &DMatrix<f64>) -> Result<WaldTest> {
    let diff = DVector::from_iterator(a.len(), a.iter().zip(b).map(|(x, y)| x - y));
    let chol = v
        .clone()
        .cholesky()
        .ok_or_else(|| PanelError::SingularInformation("combined subpanel variance is not positive definite".into()))?;
    let statistic = diff.dot(&chol.solve(&diff)).max(0.0);
    let dof = a.len();
    let p_value = ChiSquared::new(dof as f64).map(|c| c.sf(statistic)).unwrap_or(f64::NAN);
    Ok(WaldTest { statistic, dof, p_value })
}

#[derive(Debug, Clone, Serialize)]
pub struct HomogeneityResult {
    pub axis: SplitAxis,
    pub estimates: [Vec<f64>; 2],
    #[serde(serialize_with = "rows")]
    pub combined_variance: DMatrix<f64>,
    #[serde(flatten)]
    pub test: WaldTest,
}

/// Plug-in covariance `Ŵ⁻¹/n` of a subpanel fit.
fn plug_in_vcov(d: &PanelDataset, f: &dyn LikelihoodFamily, r: &FitResult) -> Result<DMatrix<f64>> {
    let p = PlugIns::at_fit(d, f, r)?;
    let w = estimate_w(&p)?;
    let inv = w
        .cholesky()
        .ok_or_else(|| PanelError::SingularInformation("subpanel information is not positive definite".into()))?
        .inverse();
    Ok(inv / p.n_observed() as f64)
}

/// Tests whether the two halves along `axis` share the same slope limit.
/// The halves are treated as independent; with an odd number of periods
/// they share the middle one. With `prune`, units and periods separated
/// within a half are dropped from that half.
pub fn homogeneity_test(
    d: &PanelDataset,
    f: &dyn LikelihoodFamily,
    axis: SplitAxis,
    fit_opts: &FitOptions,
    prune: bool,
) -> Result<HomogeneityResult> {
    let (n, t) = (d.n_units(), d.n_periods());
    let specs = match axis {
        SplitAxis::Time => {
            let (a, b) = halves(t);
            let all: Vec<usize> = (0..n).collect();
            [SubpanelSpec { units: all.clone(), times: a }, SubpanelSpec { units: all, times: b }]
        }
        SplitAxis::CrossSection => {
            let (a, b) = halves(n);
            [SubpanelSpec { units: a.collect(), times: 0..t }, SubpanelSpec { units: b.collect(), times: 0..t }]
        }
    };
    homogeneity_between(d, f, &specs, axis, fit_opts, prune)
}

/// Wald comparison of the slope fits on two given subpanels.
pub fn homogeneity_between(
    d: &PanelDataset,
    f: &dyn LikelihoodFamily,
    specs: &[SubpanelSpec; 2],
    axis: SplitAxis,
    fit_opts: &FitOptions,
    prune: bool,
) -> Result<HomogeneityResult> {
    let parts = specs
        .par_iter()
        .map(|s| {
            let wrap = |e: PanelError| PanelError::JackknifeSubfit { subpanel: describe(s, d), source: Box::new(e) };
            let mut sub = subpanel(d, s).map_err(wrap)?;
            if prune {
                sub = prune_separated(&sub, f).map_err(wrap)?.0;
            }
            let r = fit(&sub, f, fit_opts).map_err(wrap)?;
            let v = plug_in_vcov(&sub, f, &r)?;
            Ok((r.beta().to_vec(), v))
        })
        .collect::<Result<Vec<_>>>()?;
    let combined_variance = &parts[0].1 + &parts[1].1;
    let test = wald(&parts[0].0, &parts[1].0, &combined_variance)?;
    Ok(HomogeneityResult {
        axis,
        estimates: [parts[0].0.clone(), parts[1].0.clone()],
        combined_variance,
        test,
    })
}
