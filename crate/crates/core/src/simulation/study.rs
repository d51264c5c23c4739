//! Replication runner and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ape::compute_ape_at;
use crate::correction::{ape_bias, correct_from, CorrectionOptions, VarianceMode};
use crate::error::{PanelError, Result};
use crate::family::{LikelihoodFamily, PartialEffectSpec};
use crate::jackknife::{spj_both, JackknifeOptions};
use crate::plugin::PlugIns;
use crate::solver::{fit, fit_given_beta, prune_separated, FitOptions, ParameterState};

use super::dgp::{Dgp, DgpKind, DgpSpec};
use super::neyman_scott;
use super::summary::{mean_and_mc_se, summarize, Summary};

fn default_replications() -> usize {
    500
}

fn default_trims() -> Vec<usize> {
    vec![1]
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub dgp: DgpSpec,
    #[serde(default = "default_replications")]
    pub replications: usize,
    /// Trimming parameters, one analytical estimator each.
    #[serde(default = "default_trims")]
    pub trims: Vec<usize>,
    #[serde(default = "yes")]
    pub jackknife: bool,
    #[serde(default)]
    pub no_bartlett: bool,
    #[serde(default)]
    pub variance_mode: VarianceMode,
    /// Partial effects to report; defaults per design.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effects: Option<Vec<PartialEffectSpec>>,
}

impl StudyConfig {
    pub fn new(dgp: DgpSpec, replications: usize) -> Self {
        Self {
            dgp,
            replications,
            trims: default_trims(),
            jackknife: true,
            no_bartlett: false,
            variance_mode: VarianceMode::default(),
            effects: None,
        }
    }

    fn effects(&self) -> Vec<PartialEffectSpec> {
        self.effects.clone().unwrap_or_else(|| self.dgp.kind.default_effects())
    }

    fn estimators(&self) -> Vec<String> {
        let mut v = vec!["FE".to_string()];
        if self.dgp.kind == DgpKind::NeymanScott {
            v.push("Analytical".into());
        } else {
            v.extend(self.trims.iter().map(|l| format!("Analytical (L={l})")));
        }
        if self.jackknife {
            v.push("Jackknife".into());
        }
        v
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub quantity: String,
    pub estimator: String,
    #[serde(flatten)]
    pub summary: Summary,
}

/// Simulated mean of a plug-in bias term.
#[derive(Debug, Clone, Serialize)]
pub struct BiasTermSummary {
    /// `B` (unit-effect term) or `D` (period-effect term).
    pub term: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trim: Option<usize>,
    pub regressor: String,
    pub mean: f64,
    pub mc_se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub config: StudyConfig,
    pub seed: u64,
    pub replications: usize,
    pub completed: usize,
    pub failures: usize,
    pub failure_kinds: BTreeMap<String, usize>,
    pub rows: Vec<SummaryRow>,
    pub bias_terms: Vec<BiasTermSummary>,
}

impl SimulationReport {
    pub fn row(&self, quantity: &str, estimator: &str) -> Option<&Summary> {
        self.rows.iter().find(|r| r.quantity == quantity && r.estimator == estimator).map(|r| &r.summary)
    }

    /// Fails when more than 5% of replications were dropped.
    pub fn check_reliable(&self) -> Result<()> {
        if self.failures * 20 > self.replications {
            return Err(PanelError::StudyUnreliable { failures: self.failures, replications: self.replications });
        }
        Ok(())
    }

    /// Aligned text table, estimators as rows, one block per quantity.
    pub fn to_text(&self) -> String {
        let d = &self.config.dgp;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{}  N={} T={}  R={} (completed {}, failed {})  seed {}",
            d.kind, d.n, d.t, self.replications, self.completed, self.failures, self.seed
        );
        let _ = writeln!(s, "{:<24}{:<20}{:>10}{:>10}{:>10}{:>8}{:>8}", "quantity", "estimator", "Bias", "SD", "RMSE", "SE/SD", "p;.95");
        for r in &self.rows {
            let m = &r.summary;
            let unit = if m.relative { "" } else { " (abs)" };
            let _ = writeln!(
                s,
                "{:<24}{:<20}{:>10.2}{:>10.2}{:>10.2}{:>8.2}{:>8.2}{unit}",
                r.quantity, r.estimator, m.bias, m.sd, m.rmse, m.se_sd, m.coverage
            );
        }
        if !self.bias_terms.is_empty() {
            let _ = writeln!(s, "\nplug-in bias terms (mean ± MC SE)");
            for b in &self.bias_terms {
                let trim = b.trim.map(|l| format!(" L={l}")).unwrap_or_default();
                let _ = writeln!(s, "  {}{trim} [{}]: {:.5} ± {:.5}", b.term, b.regressor, b.mean, b.mc_se);
            }
        }
        if !self.failure_kinds.is_empty() {
            let kinds: Vec<String> = self.failure_kinds.iter().map(|(k, v)| format!("{k}: {v}")).collect();
            let _ = writeln!(s, "\nfailures by kind: {}", kinds.join(", "));
        }
        s
    }
}

/// One replication: `values[q][e] = (estimate, se, truth)`, plus bias terms.
#[derive(Debug, Clone)]
struct Outcome {
    values: Vec<Vec<(f64, f64, f64)>>,
    b_terms: Vec<Vec<f64>>,
    d_terms: Vec<f64>,
}

fn quantity_names(cfg: &StudyConfig) -> Vec<String> {
    if cfg.dgp.kind == DgpKind::NeymanScott {
        return vec!["variance".into()];
    }
    let names = cfg.dgp.kind.regressor_names();
    let mut q: Vec<String> = names.iter().map(|n| format!("beta[{n}]")).collect();
    q.extend(cfg.effects().iter().map(|s| format!("ape[{}]", s.label(&names))));
    q
}

fn neyman_scott_rep(dgp: &Dgp, rep: usize) -> Outcome {
    let y = dgp.neyman_scott_grid(rep);
    let (n, t) = y.shape();
    let e = neyman_scott::estimate(&y);
    let h = (2.0 / (n * t) as f64).sqrt();
    let truth = dgp.beta()[0];
    let cell = |v: f64| (v, v.abs() * h, truth);
    Outcome {
        values: vec![vec![cell(e.fixed_effects), cell(e.analytical), cell(e.jackknife)]],
        b_terms: vec![],
        d_terms: vec![],
    }
}

fn model_rep(cfg: &StudyConfig, dgp: &Dgp, f: &dyn LikelihoodFamily, rep: usize) -> Result<Outcome> {
    let specs = cfg.effects();
    let fit_opts = FitOptions::default();
    let draw = dgp.generate(rep)?;
    let (data, units, times) = prune_separated(&draw.data, f)?;
    let truth_state = ParameterState {
        alpha: units.iter().map(|&i| draw.truth.alpha[i]).collect(),
        gamma: times.iter().map(|&s| draw.truth.gamma[s]).collect(),
        ..draw.truth.clone()
    };
    let truth_ape = compute_ape_at(&data, f, &truth_state, &specs)?.delta;
    let r = fit(&data, f, &fit_opts)?;
    let p = PlugIns::at_fit(&data, f, &r)?;
    let k = data.n_regressors();
    let n_est = 1 + cfg.trims.len() + cfg.jackknife as usize;
    let mut values = vec![Vec::with_capacity(n_est); k + specs.len()];
    let mut b_terms = Vec::new();
    let mut d_terms = Vec::new();

    let corrections = cfg
        .trims
        .iter()
        .map(|&trim| correct_from(&p, &r, &CorrectionOptions { trim, no_bartlett: cfg.no_bartlett }))
        .collect::<Result<Vec<_>>>()?;
    let base = corrections.first();
    let se_beta: Vec<f64> = match base {
        Some(c) => c.se.clone(),
        None => correct_from(&p, &r, &CorrectionOptions { trim: 0, no_bartlett: cfg.no_bartlett })?.se,
    };
    for a in 0..k {
        values[a].push((r.beta()[a], se_beta[a], draw.truth.beta[a]));
        for c in &corrections {
            values[a].push((c.beta_tilde_A[a], se_beta[a], draw.truth.beta[a]));
        }
    }
    for c in &corrections {
        b_terms.push(c.B_hat.clone());
    }
    if let Some(c) = base {
        d_terms = c.D_hat.clone();
    }

    // effect pieces at the uncorrected fit; the first trim fixes the SE
    let first_trim = cfg.trims.first().copied().unwrap_or(0);
    for (j, spec) in specs.iter().enumerate() {
        let parts = ape_bias(&data, f, &r, &p, spec, first_trim, cfg.variance_mode)?;
        values[k + j].push((parts.delta_hat, parts.variance.sqrt(), truth_ape[j]));
    }
    for (ti, c) in corrections.iter().enumerate() {
        let refit = fit_given_beta(&data, f, &fit_opts, &c.beta_tilde_A, Some(&r.state))?;
        let rebuilt = compute_ape_at(&data, f, &refit.state, &specs)?.delta;
        for (j, spec) in specs.iter().enumerate() {
            let parts = ape_bias(&data, f, &r, &p, spec, cfg.trims[ti], cfg.variance_mode)?;
            let se = values[k + j][0].1;
            let corrected = rebuilt[j] - parts.b / c.periods_effective - parts.d / c.units_effective;
            values[k + j].push((corrected, se, truth_ape[j]));
        }
    }
    if cfg.jackknife {
        let jk_opts = JackknifeOptions { prune_subpanels: true, ..JackknifeOptions::default() };
        let (jb, ja) = spj_both(&data, f, &specs, &fit_opts, &jk_opts)?;
        for a in 0..k {
            values[a].push((jb.corrected[a], se_beta[a], draw.truth.beta[a]));
        }
        for j in 0..specs.len() {
            let se = values[k + j][0].1;
            values[k + j].push((ja.corrected[j], se, truth_ape[j]));
        }
    }
    Ok(Outcome { values, b_terms, d_terms })
}

fn validate(cfg: &StudyConfig) -> Result<()> {
    if cfg.replications < 2 {
        return Err(PanelError::Config("a study needs at least 2 replications".into()));
    }
    if cfg.dgp.kind == DgpKind::NeymanScott {
        return Ok(());
    }
    let k = cfg.dgp.kind.regressor_names().len();
    for s in cfg.effects() {
        s.check(k)?;
    }
    let t = cfg.dgp.t;
    if cfg.dgp.kind != DgpKind::CalibratedPoisson {
        if let Some(&trim) = cfg.trims.iter().find(|&&l| l + 1 >= t) {
            return Err(PanelError::InvalidTrim { trim, periods: t });
        }
    }
    Ok(())
}

/// Runs every replication and summarizes; does not apply the failure-rate
/// check.
pub fn run_study_report(cfg: &StudyConfig) -> Result<SimulationReport> {
    validate(cfg)?;
    let dgp = Dgp::new(cfg.dgp.clone())?;
    let family = cfg.dgp.kind.family().map(|k| k.build());
    let outcomes: Vec<Result<Outcome>> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| match &family {
            None => Ok(neyman_scott_rep(&dgp, rep)),
            Some(f) => model_rep(cfg, &dgp, f.as_ref(), rep),
        })
        .collect();

    let mut failure_kinds = BTreeMap::new();
    let mut ok = Vec::new();
    for o in outcomes {
        match o {
            Ok(v) => ok.push(v),
            Err(e) => *failure_kinds.entry(e.kind().to_string()).or_insert(0) += 1,
        }
    }
    let quantities = quantity_names(cfg);
    let estimators = cfg.estimators();
    let mut rows = Vec::new();
    if ok.len() >= 2 {
        for (q, qname) in quantities.iter().enumerate() {
            for (e, ename) in estimators.iter().enumerate() {
                let est: Vec<f64> = ok.iter().map(|o| o.values[q][e].0).collect();
                let se: Vec<f64> = ok.iter().map(|o| o.values[q][e].1).collect();
                let truth: Vec<f64> = ok.iter().map(|o| o.values[q][e].2).collect();
                rows.push(SummaryRow { quantity: qname.clone(), estimator: ename.clone(), summary: summarize(&est, &truth, &se)? });
            }
        }
    }
    let mut bias_terms = Vec::new();
    if ok.len() >= 2 && cfg.dgp.kind != DgpKind::NeymanScott && !cfg.trims.is_empty() {
        let names = cfg.dgp.kind.regressor_names();
        for (ti, &trim) in cfg.trims.iter().enumerate() {
            for (a, name) in names.iter().enumerate() {
                let v: Vec<f64> = ok.iter().map(|o| o.b_terms[ti][a]).collect();
                let (mean, mc_se) = mean_and_mc_se(&v);
                bias_terms.push(BiasTermSummary { term: "B".into(), trim: Some(trim), regressor: name.clone(), mean, mc_se });
            }
        }
        for (a, name) in names.iter().enumerate() {
            let v: Vec<f64> = ok.iter().map(|o| o.d_terms[a]).collect();
            let (mean, mc_se) = mean_and_mc_se(&v);
            bias_terms.push(BiasTermSummary { term: "D".into(), trim: None, regressor: name.clone(), mean, mc_se });
        }
    }
    let completed = ok.len();
    Ok(SimulationReport {
        config: cfg.clone(),
        seed: cfg.dgp.seed,
        replications: cfg.replications,
        completed,
        failures: cfg.replications - completed,
        failure_kinds,
        rows,
        bias_terms,
    })
}

/// As [`run_study_report`], failing with `StudyUnreliable` when more than
/// 5% of replications fail.
pub fn run_study(cfg: &StudyConfig) -> Result<SimulationReport> {
    let report = run_study_report(cfg)?;
    report.check_reliable()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neyman_scott_fe_mean_matches_closed_form() {
        let cfg = StudyConfig::new(DgpSpec::new(DgpKind::NeymanScott, 10, 10, 3), 4000);
        let r = run_study(&cfg).unwrap();
        let fe = r.row("variance", "FE").unwrap();
        let expect = 100.0 * (neyman_scott::expected_ratio(10, 10) - 1.0);
        let mc = fe.sd / (4000f64).sqrt();
        assert!((fe.bias - expect).abs() < 3.0 * mc, "{} vs {expect}", fe.bias);
    }

    #[test]
    fn report_is_deterministic_and_thread_independent() {
        let mut cfg = StudyConfig::new(DgpSpec::new(DgpKind::StaticProbitAr, 12, 8, 9), 6);
        cfg.trims = vec![1];
        let a = run_study_report(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_study_report(&cfg).unwrap());
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn rows_cover_every_estimator_and_quantity() {
        let mut cfg = StudyConfig::new(DgpSpec::new(DgpKind::DynamicProbitAr, 20, 12, 2), 4);
        cfg.trims = vec![1, 2];
        let r = run_study_report(&cfg).unwrap();
        let quantities = ["beta[y_lag]", "beta[z]", "ape[y_lag:binary]", "ape[z:continuous]"];
        for q in quantities {
            for e in ["FE", "Analytical (L=1)", "Analytical (L=2)", "Jackknife"] {
                assert!(r.row(q, e).is_some(), "{q} {e}");
            }
        }
        assert_eq!(r.bias_terms.len(), 2 * 2 + 2);
    }

    #[test]
    fn trim_is_validated_up_front() {
        let mut cfg = StudyConfig::new(DgpSpec::new(DgpKind::LinearAr, 5, 3, 1), 3);
        cfg.trims = vec![2];
        assert!(matches!(run_study(&cfg), Err(PanelError::InvalidTrim { .. })));
    }

    #[test]
    fn unreliable_when_too_many_fail() {
        // two periods leave every binary unit separated or unidentified
        let cfg = StudyConfig { trims: vec![0], jackknife: false, ..StudyConfig::new(DgpSpec::new(DgpKind::StaticProbitAr, 3, 2, 1), 10) };
        match run_study(&cfg) {
            Err(PanelError::StudyUnreliable { failures, replications: 10 }) => assert!(failures > 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_json_defaults() {
        let cfg: StudyConfig = serde_json::from_str(r#"{"dgp": {"kind": "static-probit-ar", "N": 52, "T": 14, "seed": 7}}"#).unwrap();
        assert_eq!(cfg.replications, 500);
        assert_eq!(cfg.trims, vec![1]);
        assert!(cfg.jackknife);
        assert_eq!(cfg.dgp.effect_sd, 0.25);
    }
}
