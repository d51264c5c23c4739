//! Data generating processes for the Monte Carlo designs.

use std::collections::BTreeMap;
use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson as PoissonDist, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PanelError, Result};
use crate::family::{FamilyKind, PartialEffectSpec, Transform};
use crate::hessian::Normalization;
use crate::panel::PanelDataset;
use crate::solver::ParameterState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DgpKind {
    /// Gaussian outcome with two-way mean effects and unknown variance.
    NeymanScott,
    StaticProbitAr,
    StaticProbitTrend,
    DynamicProbitAr,
    DynamicProbitTrend,
    /// Gaussian outcome with the autoregressive regressor.
    LinearAr,
    /// Poisson counts with the autoregressive regressor.
    StaticPoissonAr,
    /// Poisson counts on a user-supplied regressor and effect file.
    CalibratedPoisson,
}

impl DgpKind {
    pub const ALL: [DgpKind; 8] = [
        DgpKind::NeymanScott,
        DgpKind::StaticProbitAr,
        DgpKind::StaticProbitTrend,
        DgpKind::DynamicProbitAr,
        DgpKind::DynamicProbitTrend,
        DgpKind::LinearAr,
        DgpKind::StaticPoissonAr,
        DgpKind::CalibratedPoisson,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DgpKind::NeymanScott => "neyman-scott",
            DgpKind::StaticProbitAr => "static-probit-ar",
            DgpKind::StaticProbitTrend => "static-probit-trend",
            DgpKind::DynamicProbitAr => "dynamic-probit-ar",
            DgpKind::DynamicProbitTrend => "dynamic-probit-trend",
            DgpKind::LinearAr => "linear-ar",
            DgpKind::StaticPoissonAr => "static-poisson-ar",
            DgpKind::CalibratedPoisson => "calibrated-poisson",
        }
    }

    /// Likelihood the design is estimated with; `None` for the closed-form
    /// variance model.
    pub fn family(self) -> Option<FamilyKind> {
        match self {
            DgpKind::NeymanScott => None,
            DgpKind::StaticProbitAr | DgpKind::StaticProbitTrend | DgpKind::DynamicProbitAr | DgpKind::DynamicProbitTrend => {
                Some(FamilyKind::Probit)
            }
            DgpKind::LinearAr => Some(FamilyKind::Gaussian),
            DgpKind::StaticPoissonAr | DgpKind::CalibratedPoisson => Some(FamilyKind::Poisson),
        }
    }

    pub fn default_beta(self) -> Option<Vec<f64>> {
        match self {
            DgpKind::DynamicProbitAr | DgpKind::DynamicProbitTrend => Some(vec![0.5, 1.0]),
            DgpKind::CalibratedPoisson => None,
            _ => Some(vec![1.0]),
        }
    }

    pub fn regressor_names(self) -> Vec<String> {
        match self {
            DgpKind::DynamicProbitAr | DgpKind::DynamicProbitTrend => vec!["y_lag".into(), "z".into()],
            DgpKind::CalibratedPoisson => vec!["z".into(), "z_sq".into()],
            _ => vec!["x".into()],
        }
    }

    /// Partial effects reported by default in studies.
    pub fn default_effects(self) -> Vec<PartialEffectSpec> {
        match self {
            DgpKind::NeymanScott => vec![],
            DgpKind::StaticProbitAr | DgpKind::StaticProbitTrend | DgpKind::LinearAr => vec![PartialEffectSpec::continuous(0)],
            DgpKind::DynamicProbitAr | DgpKind::DynamicProbitTrend => {
                vec![PartialEffectSpec::binary(0), PartialEffectSpec::continuous(1)]
            }
            DgpKind::StaticPoissonAr => vec![PartialEffectSpec::poisson(0, None)],
            DgpKind::CalibratedPoisson => vec![PartialEffectSpec::poisson(0, Some((1, Transform::Square)))],
        }
    }
}

impl std::fmt::Display for DgpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DgpKind {
    type Err = PanelError;

    fn from_str(s: &str) -> Result<Self> {
        DgpKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = DgpKind::ALL.iter().map(|k| k.name()).collect();
            PanelError::Config(format!("unknown DGP `{s}` (expected one of {})", names.join("|")))
        })
    }
}

fn default_effect_sd() -> f64 {
    0.25
}

fn default_copies() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub kind: DgpKind,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    /// Slope truth; the variance for the Neyman–Scott design. Defaults per kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<Vec<f64>>,
    /// Standard deviation of the drawn unit and period effects.
    #[serde(default = "default_effect_sd")]
    pub effect_sd: f64,
    #[serde(default)]
    pub seed: u64,
    /// CSV with columns `id,time,z,alpha,gamma` for the calibrated design.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<PathBuf>,
    /// Number of independent realizations of the calibrated cross-section
    /// stacked into one panel.
    #[serde(default = "default_copies")]
    pub copies: usize,
}

impl DgpSpec {
    pub fn new(kind: DgpKind, n: usize, t: usize, seed: u64) -> Self {
        Self { kind, n, t, beta: None, effect_sd: default_effect_sd(), seed, calibration: None, copies: 1 }
    }

    pub fn truth(&self) -> Result<Vec<f64>> {
        self.beta
            .clone()
            .or_else(|| self.kind.default_beta())
            .ok_or_else(|| PanelError::Config(format!("DGP `{}` needs explicit `beta`", self.kind)))
    }
}

/// Per-replication generator; `rep` selects an independent stream of the seed.
pub fn replication_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

/// One generated panel with the parameters that produced it.
#[derive(Debug, Clone)]
pub struct Draw {
    pub data: PanelDataset,
    pub truth: ParameterState,
}

#[derive(Debug, Clone)]
struct CalibrationRow {
    time: usize,
    z: f64,
}

#[derive(Debug, Clone)]
struct Calibration {
    units: Vec<String>,
    times: Vec<String>,
    alpha: Vec<f64>,
    gamma: Vec<f64>,
    rows: Vec<Vec<CalibrationRow>>,
}

/// Generator built from a spec; holds the calibration file once loaded.
#[derive(Debug, Clone)]
pub struct Dgp {
    pub spec: DgpSpec,
    beta: Vec<f64>,
    calibration: Option<Calibration>,
}

impl Dgp {
    pub fn new(spec: DgpSpec) -> Result<Self> {
        let beta = spec.truth()?;
        let want = match spec.kind {
            DgpKind::NeymanScott => 1,
            k => k.regressor_names().len(),
        };
        if beta.len() != want {
            return Err(PanelError::Config(format!("DGP `{}` takes {want} true parameter(s), got {}", spec.kind, beta.len())));
        }
        if spec.kind == DgpKind::NeymanScott && !(beta[0] > 0.0) {
            return Err(PanelError::Config("Neyman–Scott variance must be positive".into()));
        }
        if !(spec.effect_sd >= 0.0) {
            return Err(PanelError::Config("effect_sd must be non-negative".into()));
        }
        let calibration = if spec.kind == DgpKind::CalibratedPoisson {
            if spec.copies == 0 {
                return Err(PanelError::Config("copies must be at least 1".into()));
            }
            let path = spec
                .calibration
                .as_ref()
                .ok_or_else(|| PanelError::Config("calibrated-poisson needs a `calibration` file".into()))?;
            Some(load_calibration(path)?)
        } else {
            if spec.n < 2 || spec.t < 2 {
                return Err(PanelError::Config(format!("DGP needs N ≥ 2 and T ≥ 2, got N={}, T={}", spec.n, spec.t)));
            }
            None
        };
        Ok(Self { spec, beta, calibration })
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// Neyman–Scott outcomes as an `N×T` grid.
    pub fn neyman_scott_grid(&self, rep: usize) -> DMatrix<f64> {
        let (n, t) = (self.spec.n, self.spec.t);
        let mut rng = replication_rng(self.spec.seed, rep);
        let eff = Normal::new(0.0, self.spec.effect_sd).unwrap();
        let alpha: Vec<f64> = (0..n).map(|_| rng.sample(eff)).collect();
        let gamma: Vec<f64> = (0..t).map(|_| rng.sample(eff)).collect();
        let sd = self.beta[0].sqrt();
        DMatrix::from_fn(n, t, |i, s| alpha[i] + gamma[s] + sd * rng.sample::<f64, _>(StandardNormal))
    }

    pub fn generate(&self, rep: usize) -> Result<Draw> {
        let mut rng = replication_rng(self.spec.seed, rep);
        match self.spec.kind {
            DgpKind::NeymanScott => Err(PanelError::Config(
                "the Neyman–Scott design has no regressors; use its closed-form estimator".into(),
            )),
            DgpKind::CalibratedPoisson => self.calibrated(&mut rng),
            kind => self.simulated(kind, &mut rng),
        }
    }

    fn simulated(&self, kind: DgpKind, rng: &mut ChaCha8Rng) -> Result<Draw> {
        let (n, t) = (self.spec.n, self.spec.t);
        let eff = Normal::new(0.0, self.spec.effect_sd).unwrap();
        let dynamic = matches!(kind, DgpKind::DynamicProbitAr | DgpKind::DynamicProbitTrend);
        let alpha: Vec<f64> = (0..n).map(|_| rng.sample(eff)).collect();
        // period 0 only feeds the initial condition of dynamic designs
        let gamma0: f64 = if dynamic { rng.sample(eff) } else { 0.0 };
        let gamma: Vec<f64> = (0..t).map(|_| rng.sample(eff)).collect();
        let ar_noise = Normal::new(0.0, 0.5f64.sqrt()).unwrap();
        let trend_noise = Normal::new(0.0, 0.75f64.sqrt()).unwrap();
        let trend_slope = if dynamic { 1.5 } else { 2.0 };
        let trend = matches!(kind, DgpKind::StaticProbitTrend | DgpKind::DynamicProbitTrend);
        let k = self.beta.len();
        let mut y = Vec::with_capacity(n * t);
        let mut x = Vec::with_capacity(n * t * k);
        for i in 0..n {
            let mut z: f64 = rng.sample(StandardNormal);
            let mut y_prev = 0.0;
            if dynamic {
                let e: f64 = rng.sample(StandardNormal);
                y_prev = indicator(z * self.beta[1] + alpha[i] + gamma0 > e);
            }
            for s in 0..t {
                let period = (s + 1) as f64;
                z = if trend {
                    trend_slope * period / t as f64 + alpha[i] + gamma[s] + rng.sample::<f64, _>(trend_noise)
                } else {
                    z / 2.0 + alpha[i] + gamma[s] + rng.sample::<f64, _>(ar_noise)
                };
                let pi = alpha[i] + gamma[s];
                let draw = match kind {
                    DgpKind::StaticProbitAr | DgpKind::StaticProbitTrend => {
                        x.push(z);
                        let e: f64 = rng.sample(StandardNormal);
                        indicator(z * self.beta[0] + pi > e)
                    }
                    DgpKind::DynamicProbitAr | DgpKind::DynamicProbitTrend => {
                        x.extend_from_slice(&[y_prev, z]);
                        let e: f64 = rng.sample(StandardNormal);
                        let out = indicator(y_prev * self.beta[0] + z * self.beta[1] + pi > e);
                        y_prev = out;
                        out
                    }
                    DgpKind::LinearAr => {
                        x.push(z);
                        z * self.beta[0] + pi + rng.sample::<f64, _>(StandardNormal)
                    }
                    DgpKind::StaticPoissonAr => {
                        x.push(z);
                        poisson_draw(rng, (z * self.beta[0] + pi).exp())?
                    }
                    DgpKind::NeymanScott | DgpKind::CalibratedPoisson => unreachable!(),
                };
                y.push(draw);
            }
        }
        let data = PanelDataset::balanced(n, t, kind.regressor_names(), y, x)?;
        let truth = ParameterState { beta: self.beta.clone(), alpha, gamma, normalization: Normalization::DropFirstGamma };
        Ok(Draw { data, truth })
    }

    fn calibrated(&self, rng: &mut ChaCha8Rng) -> Result<Draw> {
        let c = self.calibration.as_ref().expect("loaded in new");
        let copies = self.spec.copies;
        let t = c.times.len();
        let n = c.units.len() * copies;
        let mut y = vec![0.0; n * t];
        let mut x = vec![0.0; n * t * 2];
        let mut mask = vec![false; n * t];
        let mut units = Vec::with_capacity(n);
        let mut alpha = Vec::with_capacity(n);
        for copy in 0..copies {
            for (u, rows) in c.rows.iter().enumerate() {
                let i = copy * c.units.len() + u;
                units.push(if copies == 1 { c.units[u].clone() } else { format!("{}#{}", c.units[u], copy + 1) });
                alpha.push(c.alpha[u]);
                for r in rows {
                    let cell = i * t + r.time;
                    let index = r.z * self.beta[0] + r.z * r.z * self.beta[1] + c.alpha[u] + c.gamma[r.time];
                    y[cell] = poisson_draw(rng, index.exp())?;
                    x[cell * 2] = r.z;
                    x[cell * 2 + 1] = r.z * r.z;
                    mask[cell] = true;
                }
            }
        }
        let data = PanelDataset::new(units, c.times.clone(), self.spec.kind.regressor_names(), y, x, mask)?;
        let truth = ParameterState { beta: self.beta.clone(), alpha, gamma: c.gamma.clone(), normalization: Normalization::DropFirstGamma };
        Ok(Draw { data, truth })
    }
}

/// Dataset for replication `rep` of `spec`.
pub fn generate(spec: &DgpSpec, rep: usize) -> Result<PanelDataset> {
    Ok(Dgp::new(spec.clone())?.generate(rep)?.data)
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn poisson_draw(rng: &mut ChaCha8Rng, mean: f64) -> Result<f64> {
    if mean == 0.0 {
        return Ok(0.0);
    }
    let d = PoissonDist::new(mean).map_err(|_| PanelError::NumericOverflow { family: "poisson", eta: mean.ln() })?;
    Ok(rng.sample(d))
}

#[derive(Debug, Deserialize)]
struct CalibrationRecord {
    id: String,
    time: String,
    z: f64,
    alpha: f64,
    gamma: f64,
}

fn load_calibration(path: &PathBuf) -> Result<Calibration> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => PanelError::Io(io),
        other => PanelError::Parse(format!("{}: {other:?}", path.display())),
    })?;
    let mut unit_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut units = Vec::new();
    let mut alpha = Vec::new();
    let mut by_time: BTreeMap<String, f64> = BTreeMap::new();
    let mut cells: Vec<(usize, String, f64)> = Vec::new();
    for (line, rec) in rdr.deserialize::<CalibrationRecord>().enumerate() {
        let rec = rec.map_err(|e| PanelError::Parse(format!("{} row {}: {e}", path.display(), line + 2)))?;
        let u = *unit_index.entry(rec.id.clone()).or_insert_with(|| {
            units.push(rec.id.clone());
            alpha.push(rec.alpha);
            units.len() - 1
        });
        if (alpha[u] - rec.alpha).abs() > 0.0 {
            return Err(PanelError::InvalidData(format!("unit `{}` has more than one alpha", rec.id)));
        }
        if let Some(g) = by_time.insert(rec.time.clone(), rec.gamma) {
            if g != rec.gamma {
                return Err(PanelError::InvalidData(format!("period `{}` has more than one gamma", rec.time)));
            }
        }
        cells.push((u, rec.time, rec.z));
    }
    if units.is_empty() {
        return Err(PanelError::DegeneratePanel(format!("{} has no rows", path.display())));
    }
    let mut times: Vec<String> = by_time.keys().cloned().collect();
    if times.iter().all(|s| s.parse::<f64>().is_ok()) {
        times.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    let time_index: BTreeMap<&str, usize> = times.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let gamma = times.iter().map(|s| by_time[s]).collect();
    let mut rows: Vec<Vec<CalibrationRow>> = vec![Vec::new(); units.len()];
    for (u, time, z) in cells {
        let ti = time_index[time.as_str()];
        if rows[u].iter().any(|r| r.time == ti) {
            return Err(PanelError::DuplicateCell { unit: units[u].clone(), time });
        }
        rows[u].push(CalibrationRow { time: ti, z });
    }
    Ok(Calibration { units, times, alpha, gamma, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_rep_is_bit_identical() {
        for kind in [DgpKind::StaticProbitAr, DgpKind::DynamicProbitTrend, DgpKind::StaticPoissonAr, DgpKind::LinearAr] {
            let dgp = Dgp::new(DgpSpec::new(kind, 6, 5, 11)).unwrap();
            let a = dgp.generate(3).unwrap().data;
            let b = dgp.generate(3).unwrap().data;
            assert_eq!(a.outcome_grid(), b.outcome_grid());
            assert_eq!(a.regressor_grid(0), b.regressor_grid(0));
            let c = dgp.generate(4).unwrap().data;
            assert_ne!(a.regressor_grid(0), c.regressor_grid(0));
        }
    }

    #[test]
    fn dynamic_lag_column_is_previous_outcome() {
        let d = Dgp::new(DgpSpec::new(DgpKind::DynamicProbitAr, 5, 8, 2)).unwrap().generate(0).unwrap().data;
        let y = d.outcome_grid();
        let lag = d.regressor_grid(0);
        for i in 0..5 {
            for s in 1..8 {
                assert_eq!(lag[(i, s)], y[(i, s - 1)]);
            }
            assert!(lag[(i, 0)] == 0.0 || lag[(i, 0)] == 1.0);
        }
    }

    #[test]
    fn dynamic_truth_defaults() {
        let d = Dgp::new(DgpSpec::new(DgpKind::DynamicProbitTrend, 4, 4, 0)).unwrap();
        assert_eq!(d.beta(), &[0.5, 1.0]);
    }

    #[test]
    fn ar_regressor_moments() {
        // stationary variance of X around its effects: (1/2)/(1 − 1/4) = 2/3
        let spec = DgpSpec { effect_sd: 0.0, ..DgpSpec::new(DgpKind::LinearAr, 400, 60, 5) };
        let d = Dgp::new(spec).unwrap().generate(0).unwrap().data;
        let x = d.regressor_grid(0);
        let tail: Vec<f64> = (0..400).flat_map(|i| (20..60).map(move |s| (i, s))).map(|(i, s)| x[(i, s)]).collect();
        let m = tail.iter().sum::<f64>() / tail.len() as f64;
        let v = tail.iter().map(|v| (v - m).powi(2)).sum::<f64>() / tail.len() as f64;
        assert!(m.abs() < 0.02, "{m}");
        assert!((v - 2.0 / 3.0).abs() < 0.02, "{v}");
    }

    #[test]
    fn trend_regressor_mean_follows_slope() {
        let spec = DgpSpec { effect_sd: 0.0, ..DgpSpec::new(DgpKind::StaticProbitTrend, 2000, 4, 5) };
        let x = Dgp::new(spec).unwrap().generate(0).unwrap().data.regressor_grid(0);
        for s in 0..4 {
            let m = x.column(s).mean();
            assert!((m - 2.0 * (s + 1) as f64 / 4.0).abs() < 0.06, "period {s}: {m}");
        }
    }

    #[test]
    fn calibrated_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cal.csv");
        std::fs::write(&path, "id,time,z,alpha,gamma\na,2001,0.5,0.1,0.2\na,2000,0.4,0.1,-0.1\nb,2000,0.6,-0.3,-0.1\n").unwrap();
        let spec = DgpSpec {
            beta: Some(vec![1.0, -0.5]),
            calibration: Some(path),
            copies: 2,
            ..DgpSpec::new(DgpKind::CalibratedPoisson, 0, 0, 1)
        };
        let draw = Dgp::new(spec).unwrap().generate(0).unwrap();
        let d = draw.data;
        assert_eq!(d.n_units(), 4);
        assert_eq!(d.time_ids(), &["2000".to_string(), "2001".to_string()]);
        assert!(!d.observed(1, 1) && d.observed(0, 1));
        assert_eq!(d.x(0, 1), &[0.5, 0.25]);
        assert_eq!(draw.truth.gamma, vec![-0.1, 0.2]);
        assert_eq!(d.unit_ids()[3], "b#2");
    }

    #[test]
    fn calibrated_requires_beta() {
        let spec = DgpSpec { calibration: Some("x.csv".into()), ..DgpSpec::new(DgpKind::CalibratedPoisson, 0, 0, 1) };
        assert!(matches!(Dgp::new(spec), Err(PanelError::Config(_))));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in DgpKind::ALL {
            assert_eq!(k.name().parse::<DgpKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
    }
}
