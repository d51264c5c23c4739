//! Panel data container, CSV ingestion and subpanel extraction.
//!
//! A [`PanelDataset`] is a rectangular N×T grid. Cells that are absent from
//! the input are masked: their values are never read by any estimator, and
//! all per-unit and per-period sums run over observed cells only.

use std::collections::{HashMap, HashSet};
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{PanelError, Result};
use crate::projection;

/// Rectangular, possibly masked, N×T panel with K regressors.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    unit_ids: Vec<String>,
    time_ids: Vec<String>,
    regressor_names: Vec<String>,
    y: Vec<f64>,
    x: Vec<f64>,
    mask: Vec<bool>,
}

impl PanelDataset {
    /// Builds a dataset from dense row-major arrays.
    ///
    /// `y` and `mask` hold one entry per cell `i * T + t`; `x` holds K
    /// entries per cell. Values at masked cells are ignored.
    pub fn new(
        unit_ids: Vec<String>,
        time_ids: Vec<String>,
        regressor_names: Vec<String>,
        y: Vec<f64>,
        x: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let n = unit_ids.len();
        let t = time_ids.len();
        let k = regressor_names.len();
        if n < 2 || t < 2 {
            return Err(PanelError::DegeneratePanel(format!(
                "need at least 2 units and 2 periods, got N={n}, T={t}"
            )));
        }
        if k == 0 {
            return Err(PanelError::DegeneratePanel("no regressors".into()));
        }
        if y.len() != n * t || mask.len() != n * t || x.len() != n * t * k {
            return Err(PanelError::InvalidData(format!(
                "array sizes do not match N={n}, T={t}, K={k}"
            )));
        }
        let d = Self { unit_ids, time_ids, regressor_names, y, x, mask };
        for i in 0..n {
            if !(0..t).any(|s| d.observed(i, s)) {
                return Err(PanelError::DegeneratePanel(format!(
                    "unit `{}` has no observed cells",
                    d.unit_ids[i]
                )));
            }
        }
        for s in 0..t {
            if !(0..n).any(|i| d.observed(i, s)) {
                return Err(PanelError::DegeneratePanel(format!(
                    "period `{}` has no observed cells",
                    d.time_ids[s]
                )));
            }
        }
        for i in 0..n {
            for s in 0..t {
                if d.observed(i, s) {
                    let c = i * t + s;
                    if !d.y[c].is_finite() || d.x[c * k..(c + 1) * k].iter().any(|v| !v.is_finite()) {
                        return Err(PanelError::InvalidData(format!(
                            "non-finite value at unit `{}`, time `{}`",
                            d.unit_ids[i], d.time_ids[s]
                        )));
                    }
                }
            }
        }
        Ok(d)
    }

    /// Fully observed panel from closures, mostly for simulation.
    pub fn balanced(
        n: usize,
        t: usize,
        regressor_names: Vec<String>,
        y: Vec<f64>,
        x: Vec<f64>,
    ) -> Result<Self> {
        Self::new(
            (1..=n).map(|i| i.to_string()).collect(),
            (1..=t).map(|s| s.to_string()).collect(),
            regressor_names,
            y,
            x,
            vec![true; n * t],
        )
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_periods(&self) -> usize {
        self.time_ids.len()
    }

    pub fn n_regressors(&self) -> usize {
        self.regressor_names.len()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_balanced(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn time_ids(&self) -> &[String] {
        &self.time_ids
    }

    pub fn regressor_names(&self) -> &[String] {
        &self.regressor_names
    }

    #[inline]
    pub fn observed(&self, i: usize, t: usize) -> bool {
        self.mask[i * self.n_periods() + t]
    }

    #[inline]
    pub fn y(&self, i: usize, t: usize) -> f64 {
        self.y[i * self.n_periods() + t]
    }

    /// Regressor vector of cell (i, t).
    #[inline]
    pub fn x(&self, i: usize, t: usize) -> &[f64] {
        let k = self.n_regressors();
        let c = i * self.n_periods() + t;
        &self.x[c * k..(c + 1) * k]
    }

    /// Iterator over observed `(i, t)` pairs in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let t = self.n_periods();
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(c, _)| (c / t, c % t))
    }

    /// N×T mask as 0/1 weights.
    pub fn mask_weights(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_units(), self.n_periods(), |i, t| {
            if self.observed(i, t) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Regressor `k` as an N×T array (zero at masked cells).
    pub fn regressor_grid(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_units(), self.n_periods(), |i, t| {
            if self.observed(i, t) {
                self.x(i, t)[k]
            } else {
                0.0
            }
        })
    }

    /// Outcome as an N×T array (zero at masked cells).
    pub fn outcome_grid(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_units(), self.n_periods(), |i, t| {
            if self.observed(i, t) {
                self.y(i, t)
            } else {
                0.0
            }
        })
    }

    /// Observed cell count of unit `i`.
    pub fn unit_count(&self, i: usize) -> usize {
        (0..self.n_periods()).filter(|&t| self.observed(i, t)).count()
    }

    /// Observed cell count of period `t`.
    pub fn period_count(&self, t: usize) -> usize {
        (0..self.n_units()).filter(|&i| self.observed(i, t)).count()
    }

    /// Keeps only the listed units and periods, in the given order.
    pub(crate) fn restrict(&self, units: &[usize], times: &[usize]) -> Result<Self> {
        let k = self.n_regressors();
        let mut y = Vec::with_capacity(units.len() * times.len());
        let mut x = Vec::with_capacity(units.len() * times.len() * k);
        let mut mask = Vec::with_capacity(units.len() * times.len());
        for &i in units {
            for &t in times {
                y.push(self.y(i, t));
                x.extend_from_slice(self.x(i, t));
                mask.push(self.observed(i, t));
            }
        }
        Self::new(
            units.iter().map(|&i| self.unit_ids[i].clone()).collect(),
            times.iter().map(|&t| self.time_ids[t].clone()).collect(),
            self.regressor_names.clone(),
            y,
            x,
            mask,
        )
    }
}

/// Unit subset plus contiguous time interval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubpanelSpec {
    pub units: Vec<usize>,
    pub times: Range<usize>,
}

impl SubpanelSpec {
    pub fn full(d: &PanelDataset) -> Self {
        Self { units: (0..d.n_units()).collect(), times: 0..d.n_periods() }
    }
}

/// Restricts `d` to the units and periods of `s`.
pub fn subpanel(d: &PanelDataset, s: &SubpanelSpec) -> Result<PanelDataset> {
    if s.units.is_empty() || s.times.is_empty() {
        return Err(PanelError::DegeneratePanel("empty subpanel".into()));
    }
    if s.times.end > d.n_periods() {
        return Err(PanelError::DegeneratePanel(format!(
            "time range {:?} exceeds T={}",
            s.times,
            d.n_periods()
        )));
    }
    let mut seen = HashSet::new();
    for &i in &s.units {
        if i >= d.n_units() || !seen.insert(i) {
            return Err(PanelError::DegeneratePanel(format!("invalid unit index {i}")));
        }
    }
    let times: Vec<usize> = s.times.clone().collect();
    d.restrict(&s.units, &times)
}

/// Index halves of a sequence of length `len`: `[0, ceil(len/2))` and
/// `[floor(len/2), len)`. The halves share the middle element when `len`
/// is odd.
pub fn halves(len: usize) -> (Range<usize>, Range<usize>) {
    (0..len.div_ceil(2), len / 2..len)
}

/// Column names used when reading a panel from CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub id: String,
    pub time: String,
    pub y: String,
    /// Regressor columns; `None` takes every other column in header order.
    pub x: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self { id: "id".into(), time: "time".into(), y: "y".into(), x: None }
    }
}

/// Reads a long-format panel CSV.
///
/// Units keep their order of first appearance. Periods are ordered by label,
/// numerically when every label parses as a number. Absent (id, time) pairs
/// become masked cells.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<PanelDataset> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => PanelError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
            other => PanelError::Parse(format!("{other:?}")),
        })?;
    let headers = rdr.headers().map_err(|e| PanelError::Parse(e.to_string()))?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PanelError::Parse(format!("missing column `{name}`")))
    };
    let id_col = col(&schema.id)?;
    let time_col = col(&schema.time)?;
    let y_col = col(&schema.y)?;
    let x_names: Vec<String> = match &schema.x {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(j, _)| ![id_col, time_col, y_col].contains(j))
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    let x_cols = x_names.iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;

    struct Row {
        unit: String,
        time: String,
        y: f64,
        x: Vec<f64>,
    }
    let parse = |s: &str, what: &str, line: u64| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| PanelError::Parse(format!("line {line}: non-numeric {what} `{s}`")))
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| PanelError::Parse(e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let get = |j: usize| rec.get(j).unwrap_or("");
        rows.push(Row {
            unit: get(id_col).to_string(),
            time: get(time_col).to_string(),
            y: parse(get(y_col), &schema.y, line)?,
            x: x_cols
                .iter()
                .zip(&x_names)
                .map(|(&j, name)| parse(get(j), name, line))
                .collect::<Result<_>>()?,
        });
    }

    let mut unit_ids: Vec<String> = Vec::new();
    let mut unit_index = HashMap::new();
    let mut time_set: Vec<String> = Vec::new();
    let mut seen_times = HashSet::new();
    for r in &rows {
        if !unit_index.contains_key(&r.unit) {
            unit_index.insert(r.unit.clone(), unit_ids.len());
            unit_ids.push(r.unit.clone());
        }
        if seen_times.insert(r.time.clone()) {
            time_set.push(r.time.clone());
        }
    }
    if unit_ids.len() < 2 || time_set.len() < 2 {
        return Err(PanelError::DegeneratePanel(format!(
            "need at least 2 units and 2 periods, got N={}, T={}",
            unit_ids.len(),
            time_set.len()
        )));
    }
    sort_labels(&mut time_set);
    let time_index: HashMap<&str, usize> =
        time_set.iter().enumerate().map(|(j, s)| (s.as_str(), j)).collect();

    let (n, t, k) = (unit_ids.len(), time_set.len(), x_names.len());
    let mut y = vec![f64::NAN; n * t];
    let mut x = vec![f64::NAN; n * t * k];
    let mut mask = vec![false; n * t];
    for r in rows {
        let c = unit_index[&r.unit] * t + time_index[r.time.as_str()];
        if mask[c] {
            return Err(PanelError::DuplicateCell { unit: r.unit, time: r.time });
        }
        mask[c] = true;
        y[c] = r.y;
        x[c * k..(c + 1) * k].copy_from_slice(&r.x);
    }
    PanelDataset::new(unit_ids, time_set, x_names, y, x, mask)
}

fn sort_labels(labels: &mut [String]) {
    let numeric: Option<Vec<f64>> = labels.iter().map(|s| s.parse::<f64>().ok()).collect();
    match numeric {
        Some(_) => labels.sort_by(|a, b| {
            let (a, b) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            a.total_cmp(&b)
        }),
        None => labels.sort(),
    }
}

/// Writes observed cells as long-format CSV (`id,time,y,<regressors>`).
///
/// Floats use the shortest representation that parses back to the same bits.
pub fn write_csv(d: &PanelDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PanelError::Parse(e.to_string()))?;
    let mut header = vec!["id".to_string(), "time".to_string(), "y".to_string()];
    header.extend(d.regressor_names.iter().cloned());
    w.write_record(&header).map_err(|e| PanelError::Parse(e.to_string()))?;
    for (i, t) in d.cells() {
        let mut rec = vec![d.unit_ids[i].clone(), d.time_ids[t].clone(), format!("{:?}", d.y(i, t))];
        rec.extend(d.x(i, t).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(|e| PanelError::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Data diagnostics produced by [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Two-way within sum of squares of each regressor, divided by the
    /// number of observed cells.
    pub within_variation: Vec<f64>,
    /// Regressors without variation outside the additive effects space.
    pub collinear: Vec<usize>,
    /// Units whose outcomes are all 0.
    pub all_zero_units: Vec<usize>,
    /// Units whose outcomes are all 1.
    pub all_one_units: Vec<usize>,
    pub all_zero_periods: Vec<usize>,
    pub all_one_periods: Vec<usize>,
    pub missing_fraction: f64,
}

impl ValidationReport {
    pub fn has_collinearity(&self) -> bool {
        !self.collinear.is_empty()
    }

    /// True if a binary-outcome likelihood would be unbounded.
    pub fn binary_separation_risk(&self) -> bool {
        !(self.all_zero_units.is_empty()
            && self.all_one_units.is_empty()
            && self.all_zero_periods.is_empty()
            && self.all_one_periods.is_empty())
    }
}

/// Reports within-variation, outcome separation patterns and missingness.
pub fn validate(d: &PanelDataset) -> ValidationReport {
    let (n, t) = (d.n_units(), d.n_periods());
    let w = d.mask_weights();
    let mut within_variation = Vec::with_capacity(d.n_regressors());
    let mut collinear = Vec::new();
    for k in 0..d.n_regressors() {
        let a = d.regressor_grid(k);
        let scale: f64 = d.cells().map(|(i, s)| d.x(i, s)[k].powi(2)).sum();
        let ss = match projection::project(&w, &a) {
            Ok(p) => p.residuals.iter().map(|r| r * r).sum::<f64>(),
            Err(_) => 0.0,
        };
        within_variation.push(ss / d.n_observed() as f64);
        if ss <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
            collinear.push(k);
        }
    }
    let constant = |vals: &mut dyn Iterator<Item = f64>, target: f64| {
        let mut any = false;
        for v in vals {
            any = true;
            if v != target {
                return false;
            }
        }
        any
    };
    let unit_vals = |i: usize| (0..t).filter(move |&s| d.observed(i, s)).map(move |s| d.y(i, s));
    let period_vals = |s: usize| (0..n).filter(move |&i| d.observed(i, s)).map(move |i| d.y(i, s));
    ValidationReport {
        within_variation,
        collinear,
        all_zero_units: (0..n).filter(|&i| constant(&mut unit_vals(i), 0.0)).collect(),
        all_one_units: (0..n).filter(|&i| constant(&mut unit_vals(i), 1.0)).collect(),
        all_zero_periods: (0..t).filter(|&s| constant(&mut period_vals(s), 0.0)).collect(),
        all_one_periods: (0..t).filter(|&s| constant(&mut period_vals(s), 1.0)).collect(),
        missing_fraction: 1.0 - d.n_observed() as f64 / (n * t) as f64,
    }
}
