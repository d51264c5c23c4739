use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::correction::{ape_bias, ape_correction, correct_from, rows, CorrectionOptions, VarianceMode};
use crate::error::{PanelError, Result};
use crate::family::{FamilyKind, PartialEffectSpec};
use crate::jackknife::{homogeneity_test, spj_both, HomogeneityResult, JackknifeOptions, SplitAxis, UnitPartition};
use crate::panel::{load_csv, write_csv, PanelDataset};
use crate::plugin::PlugIns;
use crate::simulation::neyman_scott::{oracle, oracle_with_jackknife, OracleRow, TABLE_SIZES};
use crate::simulation::{Dgp, DgpSpec, StudyConfig};
use crate::simulation::study::run_study_report;
use crate::solver::{fit, prune_separated, FitOptions};

use super::config::{from_layers, parse_effect, thread_count, Correction, EstimateConfig};
use super::json;
use super::{DataArgs, EstimateArgs, GenerateArgs, OracleArgs, SimulateArgs, TestArgs};

fn set<T: Serialize>(m: &mut Map<String, Value>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        m.insert(key.into(), serde_json::to_value(v).expect("plain values serialize"));
    }
}

fn flag(m: &mut Map<String, Value>, key: &str, on: bool) {
    if on {
        m.insert(key.into(), Value::Bool(true));
    }
}

fn data_flags(a: &DataArgs) -> Map<String, Value> {
    let mut m = Map::new();
    set(&mut m, "input", a.input.as_ref());
    set(&mut m, "family", a.family.as_ref());
    set(&mut m, "normalization", a.normalization.as_ref());
    set(&mut m, "threads", a.threads);
    set(&mut m, "out", a.out.as_ref());
    flag(&mut m, "drop_separated", a.drop_separated);
    let mut schema = Map::new();
    set(&mut schema, "id", a.id.as_ref());
    set(&mut schema, "time", a.time.as_ref());
    set(&mut schema, "y", a.y.as_ref());
    set(&mut schema, "x", a.x.as_ref());
    if !schema.is_empty() {
        m.insert("schema".into(), Value::Object(schema));
    }
    m
}

/// Runs `body` on a pool of `threads` workers, or on the global pool.
fn with_threads<T: Send>(threads: Option<usize>, body: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match thread_count(threads)? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| PanelError::Config(format!("cannot start {n} worker threads: {e}")))?
            .install(body),
        None => body(),
    }
}

/// Loaded data after optional pruning, with the labels of what was dropped.
struct Prepared {
    data: PanelDataset,
    dropped_units: Vec<String>,
    dropped_periods: Vec<String>,
}

fn prepare(cfg: &EstimateConfig, family: FamilyKind) -> Result<Prepared> {
    let data = load_csv(cfg.input()?, &(&cfg.schema).into())?;
    if !cfg.drop_separated {
        return Ok(Prepared { data, dropped_units: vec![], dropped_periods: vec![] });
    }
    let (kept, units, times) = prune_separated(&data, family.build().as_ref())?;
    let missing = |ids: &[String], keep: &[usize]| -> Vec<String> {
        ids.iter().enumerate().filter(|(i, _)| !keep.contains(i)).map(|(_, s)| s.clone()).collect()
    };
    Ok(Prepared {
        dropped_units: missing(data.unit_ids(), &units),
        dropped_periods: missing(data.time_ids(), &times),
        data: kept,
    })
}

#[derive(Debug, Serialize)]
#[allow(non_snake_case)]
struct ApeReport {
    effect: String,
    spec: PartialEffectSpec,
    delta_hat: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta_tilde_A: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta_tilde_J: Option<f64>,
    se: f64,
    B_delta: f64,
    D_delta: f64,
}

#[derive(Debug, Serialize)]
struct JackknifeReport {
    half_time_estimates: [Vec<f64>; 2],
    half_unit_estimates: Vec<Vec<f64>>,
    unit_partitions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Serialize)]
#[allow(non_snake_case)]
struct Diagnostics {
    converged: bool,
    iterations: usize,
    gradient_norm: f64,
    loglik: f64,
    L: usize,
    normalization: String,
    variance_mode: VarianceMode,
    no_bartlett: bool,
    periods_effective: f64,
    units_effective: f64,
    dropped_units: Vec<String>,
    dropped_periods: Vec<String>,
}

#[derive(Debug, Serialize)]
#[allow(non_snake_case)]
struct EstimateReport {
    family: FamilyKind,
    correction: Correction,
    regressors: Vec<String>,
    N: usize,
    T: usize,
    observations: usize,
    beta_hat: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta_tilde_A: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta_tilde_J: Option<Vec<f64>>,
    se: Vec<f64>,
    #[serde(serialize_with = "rows")]
    vcov: nalgebra::DMatrix<f64>,
    B_hat: Vec<f64>,
    D_hat: Vec<f64>,
    #[serde(serialize_with = "rows")]
    W_hat: nalgebra::DMatrix<f64>,
    apes: Vec<ApeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    jackknife: Option<JackknifeReport>,
    diagnostics: Diagnostics,
}

pub fn estimate(a: &EstimateArgs) -> Result<i32> {
    let mut flags = data_flags(&a.data);
    set(&mut flags, "correction", a.correction.as_ref());
    set(&mut flags, "trim", a.trim);
    set(&mut flags, "variance_mode", a.variance_mode.as_ref());
    set(&mut flags, "jackknife_draws", a.jackknife_draws);
    set(&mut flags, "seed", a.seed);
    flag(&mut flags, "no_bartlett", a.no_bartlett);
    if !a.effect.is_empty() {
        set(&mut flags, "effects", Some(&a.effect));
    }
    let cfg: EstimateConfig = from_layers(a.data.config.as_deref(), flags)?;
    let family = cfg.family()?;
    let normalization = cfg.normalization()?;
    if cfg.jackknife_draws == Some(0) {
        return Err(PanelError::Config("--jackknife-draws must be positive".into()));
    }
    with_threads(cfg.threads, || {
        let prepared = prepare(&cfg, family)?;
        let report = estimate_on(&cfg, family, normalization, prepared)?;
        json::emit(&json::to_string(&report)?, cfg.out.as_deref())?;
        Ok(0)
    })
}

fn estimate_on(
    cfg: &EstimateConfig,
    kind: FamilyKind,
    normalization: crate::hessian::Normalization,
    prepared: Prepared,
) -> Result<EstimateReport> {
    let d = &prepared.data;
    let f = kind.build();
    let f = f.as_ref();
    let specs = cfg.effects.iter().map(|s| parse_effect(s, d.regressor_names())).collect::<Result<Vec<_>>>()?;
    let fit_opts = FitOptions { normalization, ..FitOptions::default() };
    let r = fit(d, f, &fit_opts)?;
    let p = PlugIns::at_fit(d, f, &r)?;
    let corr = correct_from(&p, &r, &CorrectionOptions { trim: cfg.trim, no_bartlett: cfg.no_bartlett })?;
    let jack = if cfg.correction.jackknife() {
        let partition = match cfg.jackknife_draws {
            Some(draws) => UnitPartition::Random { draws },
            None => UnitPartition::ObservationOrder,
        };
        let opts = JackknifeOptions { partition, seed: cfg.seed, prune_subpanels: cfg.drop_separated };
        Some(spj_both(d, f, &specs, &fit_opts, &opts)?)
    } else {
        None
    };
    let mut apes = Vec::with_capacity(specs.len());
    for (j, spec) in specs.iter().enumerate() {
        let jackknifed = jack.as_ref().map(|(_, e)| e.corrected[j]);
        let effect = spec.label(d.regressor_names());
        let report = if cfg.correction.analytical() {
            let c = ape_correction(d, f, &r, &corr, spec, cfg.variance_mode, &fit_opts)?;
            ApeReport {
                effect,
                spec: *spec,
                delta_hat: c.delta_hat,
                delta_tilde_A: Some(c.delta_tilde_A),
                delta_tilde_J: jackknifed,
                se: c.se,
                B_delta: c.B_delta,
                D_delta: c.D_delta,
            }
        } else {
            let b = ape_bias(d, f, &r, &p, spec, cfg.trim, cfg.variance_mode)?;
            ApeReport {
                effect,
                spec: *spec,
                delta_hat: b.delta_hat,
                delta_tilde_A: None,
                delta_tilde_J: jackknifed,
                se: b.variance.sqrt(),
                B_delta: b.b,
                D_delta: b.d,
            }
        };
        apes.push(report);
    }
    let jackknife = jack.as_ref().map(|(b, _)| JackknifeReport {
        half_time_estimates: b.half_time_estimates.clone(),
        half_unit_estimates: b.half_unit_estimates.clone(),
        unit_partitions: b.partitions_used.len(),
        seed: b.rng_seed,
    });
    Ok(EstimateReport {
        family: kind,
        correction: cfg.correction,
        regressors: d.regressor_names().to_vec(),
        N: d.n_units(),
        T: d.n_periods(),
        observations: d.n_observed(),
        beta_hat: corr.beta_hat.clone(),
        beta_tilde_A: cfg.correction.analytical().then(|| corr.beta_tilde_A.clone()),
        beta_tilde_J: jack.as_ref().map(|(b, _)| b.corrected.clone()),
        se: corr.se.clone(),
        vcov: corr.vcov.clone(),
        B_hat: corr.B_hat.clone(),
        D_hat: corr.D_hat.clone(),
        W_hat: corr.W_hat.clone(),
        apes,
        jackknife,
        diagnostics: Diagnostics {
            converged: r.converged,
            iterations: r.iterations,
            gradient_norm: r.gradient_norm,
            loglik: r.loglik,
            L: cfg.trim,
            normalization: normalization.label(),
            variance_mode: cfg.variance_mode,
            no_bartlett: cfg.no_bartlett,
            periods_effective: corr.periods_effective,
            units_effective: corr.units_effective,
            dropped_units: prepared.dropped_units,
            dropped_periods: prepared.dropped_periods,
        },
    })
}

#[derive(Debug, Serialize)]
#[allow(non_snake_case)]
struct TestReport {
    family: FamilyKind,
    regressors: Vec<String>,
    N: usize,
    T: usize,
    #[serde(flatten)]
    result: HomogeneityResult,
    dropped_units: Vec<String>,
    dropped_periods: Vec<String>,
}

pub fn test(a: &TestArgs) -> Result<i32> {
    let axis: SplitAxis = a.axis.parse()?;
    let cfg: EstimateConfig = from_layers(a.data.config.as_deref(), data_flags(&a.data))?;
    let family = cfg.family()?;
    let normalization = cfg.normalization()?;
    with_threads(cfg.threads, || {
        let prepared = prepare(&cfg, family)?;
        let d = &prepared.data;
        let fit_opts = FitOptions { normalization, ..FitOptions::default() };
        let result = homogeneity_test(d, family.build().as_ref(), axis, &fit_opts, cfg.drop_separated)?;
        let report = TestReport {
            family,
            regressors: d.regressor_names().to_vec(),
            N: d.n_units(),
            T: d.n_periods(),
            result,
            dropped_units: prepared.dropped_units,
            dropped_periods: prepared.dropped_periods,
        };
        json::emit(&json::to_string(&report)?, cfg.out.as_deref())?;
        Ok(0)
    })
}

fn dgp_flags(dgp: Option<&String>, n: Option<usize>, t: Option<usize>, seed: Option<u64>, beta: Option<&Vec<f64>>) -> Map<String, Value> {
    let mut m = Map::new();
    set(&mut m, "kind", dgp);
    set(&mut m, "N", n);
    set(&mut m, "T", t);
    set(&mut m, "seed", seed);
    set(&mut m, "beta", beta);
    m
}

pub fn simulate(a: &SimulateArgs) -> Result<i32> {
    let mut dgp = dgp_flags(a.dgp.as_ref(), a.n, a.t, a.seed, a.beta.as_ref());
    set(&mut dgp, "effect_sd", a.effect_sd);
    set(&mut dgp, "calibration", a.calibration.as_ref());
    set(&mut dgp, "copies", a.copies);
    let mut flags = Map::new();
    if !dgp.is_empty() {
        flags.insert("dgp".into(), Value::Object(dgp));
    }
    set(&mut flags, "replications", a.reps);
    if !a.trim.is_empty() {
        set(&mut flags, "trims", Some(&a.trim));
    }
    if a.no_jackknife {
        flags.insert("jackknife".into(), Value::Bool(false));
    }
    flag(&mut flags, "no_bartlett", a.no_bartlett);
    set(&mut flags, "variance_mode", a.variance_mode.as_ref());
    let mut cfg: StudyConfig = from_layers(a.config.as_deref(), flags)?;
    if !a.effect.is_empty() {
        let names: Vec<String> = cfg.dgp.kind.regressor_names().iter().map(|s| s.to_string()).collect();
        cfg.effects = Some(a.effect.iter().map(|s| parse_effect(s, &names)).collect::<Result<_>>()?);
    }
    let report = with_threads(a.threads, || run_study_report(&cfg))?;
    let text = report.to_text();
    if let Some(out) = &a.out {
        json::emit(&json::to_string(&report)?, Some(out))?;
        json::emit(&text, Some(&out.with_extension("txt")))?;
    }
    print!("{text}");
    report.check_reliable()?;
    Ok(0)
}

/// Estimators as rows, panel sizes as columns.
pub(super) fn oracle_table(rows: &[OracleRow]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<26}", "");
    for r in rows {
        let _ = write!(s, "{:>12}", format!("N={},T={}", r.N, r.T));
    }
    s.push('\n');
    let simulated = rows.iter().all(|r| r.jackknife.is_some());
    let mut line = |label: &str, f: &dyn Fn(&OracleRow) -> f64| {
        let _ = write!(s, "{label:<26}");
        for r in rows {
            let _ = write!(s, "{:>12.2}", f(r));
        }
        s.push('\n');
    };
    line("Bias/true  FE", &|r| r.bias_fe);
    line("           Analytical", &|r| r.bias_analytical);
    line("           Jackknife", &|r| r.bias_jackknife);
    if simulated {
        line("           Jackknife (MC)", &|r| r.jackknife.as_ref().map_or(f64::NAN, |j| j.mean - 1.0));
    }
    line("SD/true    FE", &|r| r.sd_fe);
    line("           Analytical", &|r| r.sd_analytical);
    if simulated {
        line("           Jackknife (MC)", &|r| r.jackknife.as_ref().map_or(f64::NAN, |j| j.sd));
    }
    line("p;.95      FE", &|r| r.coverage_fe);
    line("           Analytical", &|r| r.coverage_analytical);
    if simulated {
        line("           Jackknife (MC)", &|r| r.jackknife.as_ref().map_or(f64::NAN, |j| j.coverage));
    }
    s
}

pub fn oracle_cmd(a: &OracleArgs) -> Result<i32> {
    let sizes: Vec<(usize, usize)> = match (a.n, a.t) {
        (Some(n), Some(t)) => vec![(n, t)],
        (None, None) => TABLE_SIZES.to_vec(),
        _ => return Err(PanelError::Config("--N and --T must be given together".into())),
    };
    if a.jackknife_reps.is_some_and(|r| r < 2) {
        return Err(PanelError::Config("--jackknife-reps needs at least 2 replications".into()));
    }
    let rows = with_threads(a.threads, || {
        sizes
            .iter()
            .map(|&(n, t)| match a.jackknife_reps {
                Some(reps) => oracle_with_jackknife(n, t, reps, a.seed),
                None => oracle(n, t),
            })
            .collect::<Result<Vec<_>>>()
    })?;
    print!("{}", oracle_table(&rows));
    if let Some(out) = &a.out {
        json::emit(&json::to_string(&json!({ "rows": rows }))?, Some(out))?;
    }
    Ok(0)
}

pub fn generate(a: &GenerateArgs) -> Result<i32> {
    let mut dgp = dgp_flags(a.dgp.as_ref(), a.n, a.t, a.seed, a.beta.as_ref());
    set(&mut dgp, "effect_sd", a.effect_sd);
    set(&mut dgp, "calibration", a.calibration.as_ref());
    set(&mut dgp, "copies", a.copies);
    let spec: DgpSpec = from_layers(a.config.as_deref(), dgp)?;
    let draw = Dgp::new(spec)?.generate(a.rep)?;
    write_csv(&draw.data, &a.out)?;
    if let Some(path) = &a.truth {
        json::emit(&json::to_string(&draw.truth)?, Some(Path::new(path)))?;
    }
    Ok(0)
}
