//! Likelihood families and partial-effect functions.
//!
//! Every shipped family is single-index: the log-likelihood of a cell
//! depends on `(β, π)` only through `η = x'β + π`, so all mixed derivatives
//! follow from the scalar derivatives in `η` (e.g. `∂_βπ ℓ = ∂_π² ℓ · x`).
//! New families implement [`LikelihoodFamily`]; a family that is not
//! single-index overrides [`LikelihoodFamily::loglik_bundle`].

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{PanelError, Result};
use crate::normal;

/// Log-likelihood of one cell and its first three derivatives in the index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexDerivs {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

/// Full derivative bundle of `ℓ_it(β, π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLikBundle {
    pub value: f64,
    pub d_beta: Vec<f64>,
    pub d_pi: f64,
    pub d_pi2: f64,
    pub d_pi3: f64,
    pub d_beta_pi: Vec<f64>,
    pub d_beta_pi2: Vec<f64>,
    pub d_beta_beta: DMatrix<f64>,
}

pub trait LikelihoodFamily: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// `ℓ(y; η)` and `∂ℓ/∂η`, `∂²ℓ/∂η²`, `∂³ℓ/∂η³`.
    fn index_derivs(&self, y: f64, eta: f64) -> Result<IndexDerivs>;

    /// Conditional mean `m(η) = E[y | η]` and its derivatives up to fourth order.
    fn mean_derivs(&self, eta: f64) -> [f64; 5];

    /// Index value whose conditional mean is `mean` (used for start values).
    fn link(&self, mean: f64) -> f64;

    /// Rejects outcomes outside the family's support.
    fn check_outcome(&self, y: f64) -> Result<()>;

    /// True if a group with these outcomes has an unbounded effect estimate.
    fn separated(&self, ys: &[f64]) -> bool;

    fn loglik_bundle(&self, y: f64, x: &[f64], beta: &[f64], pi: f64) -> Result<LogLikBundle> {
        let eta = index(x, beta) + pi;
        let d = self.index_derivs(y, eta)?;
        let k = x.len();
        Ok(LogLikBundle {
            value: d.value,
            d_beta: x.iter().map(|v| d.d1 * v).collect(),
            d_pi: d.d1,
            d_pi2: d.d2,
            d_pi3: d.d3,
            d_beta_pi: x.iter().map(|v| d.d2 * v).collect(),
            d_beta_pi2: x.iter().map(|v| d.d3 * v).collect(),
            d_beta_beta: DMatrix::from_fn(k, k, |a, b| d.d2 * x[a] * x[b]),
        })
    }
}

#[inline]
pub fn index(x: &[f64], beta: &[f64]) -> f64 {
    x.iter().zip(beta).map(|(a, b)| a * b).sum()
}

/// Binary response with normal link.
#[derive(Debug, Clone, Copy, Default)]
pub struct Probit;

/// Binary response with logistic link.
#[derive(Debug, Clone, Copy, Default)]
pub struct Logit;

/// Count response with log link.
#[derive(Debug, Clone, Copy, Default)]
pub struct Poisson;

/// Linear model with unit error variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct Gaussian;

fn binary_outcome(name: &str, y: f64) -> Result<()> {
    if y == 0.0 || y == 1.0 {
        Ok(())
    } else {
        Err(PanelError::InvalidData(format!("{name} outcome must be 0 or 1, got {y}")))
    }
}

fn binary_separated(ys: &[f64]) -> bool {
    ys.iter().all(|&y| y == 0.0) || ys.iter().all(|&y| y == 1.0)
}

/// Derivatives of `g(s) = ln Φ(s)` up to third order.
fn log_normal_cdf_derivs(s: f64) -> [f64; 4] {
    let lam = normal::inv_mills(s);
    let g2 = -lam * (s + lam);
    let g3 = lam * (s + lam) * (s + 2.0 * lam) - lam;
    [normal::log_cdf(s), lam, g2, g3]
}

impl LikelihoodFamily for Probit {
    fn name(&self) -> &'static str {
        "probit"
    }

    fn index_derivs(&self, y: f64, eta: f64) -> Result<IndexDerivs> {
        // ℓ = y ln Φ(η) + (1 - y) ln Φ(-η)
        let mut out = IndexDerivs { value: 0.0, d1: 0.0, d2: 0.0, d3: 0.0 };
        if y != 0.0 {
            let g = log_normal_cdf_derivs(eta);
            out.value += y * g[0];
            out.d1 += y * g[1];
            out.d2 += y * g[2];
            out.d3 += y * g[3];
        }
        if y != 1.0 {
            let g = log_normal_cdf_derivs(-eta);
            let w = 1.0 - y;
            out.value += w * g[0];
            out.d1 -= w * g[1];
            out.d2 += w * g[2];
            out.d3 -= w * g[3];
        }
        Ok(out)
    }

    fn mean_derivs(&self, eta: f64) -> [f64; 5] {
        let p = normal::pdf(eta);
        let e2 = eta * eta;
        [normal::cdf(eta), p, -eta * p, (e2 - 1.0) * p, (3.0 * eta - e2 * eta) * p]
    }

    fn link(&self, mean: f64) -> f64 {
        normal::quantile(mean.clamp(0.02, 0.98))
    }

    fn check_outcome(&self, y: f64) -> Result<()> {
        binary_outcome("probit", y)
    }

    fn separated(&self, ys: &[f64]) -> bool {
        binary_separated(ys)
    }
}

impl LikelihoodFamily for Logit {
    fn name(&self) -> &'static str {
        "logit"
    }

    fn index_derivs(&self, y: f64, eta: f64) -> Result<IndexDerivs> {
        let p = logistic(eta);
        let pq = p * (1.0 - p);
        Ok(IndexDerivs {
            value: y * eta - softplus(eta),
            d1: y - p,
            d2: -pq,
            d3: -pq * (1.0 - 2.0 * p),
        })
    }

    fn mean_derivs(&self, eta: f64) -> [f64; 5] {
        let p = logistic(eta);
        let pq = p * (1.0 - p);
        let s = 1.0 - 2.0 * p;
        [p, pq, pq * s, pq * (1.0 - 6.0 * pq), pq * s * (1.0 - 12.0 * pq)]
    }

    fn link(&self, mean: f64) -> f64 {
        let p = mean.clamp(0.02, 0.98);
        (p / (1.0 - p)).ln()
    }

    fn check_outcome(&self, y: f64) -> Result<()> {
        binary_outcome("logit", y)
    }

    fn separated(&self, ys: &[f64]) -> bool {
        binary_separated(ys)
    }
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Largest index for which `exp` stays comfortably finite.
const MAX_LOG_RATE: f64 = 700.0;

impl LikelihoodFamily for Poisson {
    fn name(&self) -> &'static str {
        "poisson"
    }

    fn index_derivs(&self, y: f64, eta: f64) -> Result<IndexDerivs> {
        if eta > MAX_LOG_RATE || eta.is_nan() {
            return Err(PanelError::NumericOverflow { family: "poisson", eta });
        }
        let rate = eta.exp();
        Ok(IndexDerivs {
            value: y * eta - rate - ln_gamma(y + 1.0),
            d1: y - rate,
            d2: -rate,
            d3: -rate,
        })
    }

    fn mean_derivs(&self, eta: f64) -> [f64; 5] {
        [eta.exp(); 5]
    }

    fn link(&self, mean: f64) -> f64 {
        mean.max(0.1).ln()
    }

    fn check_outcome(&self, y: f64) -> Result<()> {
        if y >= 0.0 && y.is_finite() {
            Ok(())
        } else {
            Err(PanelError::InvalidData(format!("poisson outcome must be non-negative, got {y}")))
        }
    }

    fn separated(&self, ys: &[f64]) -> bool {
        ys.iter().all(|&y| y == 0.0)
    }
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

impl LikelihoodFamily for Gaussian {
    fn name(&self) -> &'static str {
        "gaussian"
    }

    fn index_derivs(&self, y: f64, eta: f64) -> Result<IndexDerivs> {
        let e = y - eta;
        Ok(IndexDerivs { value: -0.5 * e * e - LN_SQRT_2PI, d1: e, d2: -1.0, d3: 0.0 })
    }

    fn mean_derivs(&self, eta: f64) -> [f64; 5] {
        [eta, 1.0, 0.0, 0.0, 0.0]
    }

    fn link(&self, mean: f64) -> f64 {
        mean
    }

    fn check_outcome(&self, y: f64) -> Result<()> {
        if y.is_finite() {
            Ok(())
        } else {
            Err(PanelError::InvalidData(format!("non-finite outcome {y}")))
        }
    }

    fn separated(&self, _ys: &[f64]) -> bool {
        false
    }
}

/// Shipped family names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Probit,
    Logit,
    Poisson,
    Gaussian,
}

impl FamilyKind {
    pub fn build(self) -> Arc<dyn LikelihoodFamily> {
        match self {
            FamilyKind::Probit => Arc::new(Probit),
            FamilyKind::Logit => Arc::new(Logit),
            FamilyKind::Poisson => Arc::new(Poisson),
            FamilyKind::Gaussian => Arc::new(Gaussian),
        }
    }
}

impl FromStr for FamilyKind {
    type Err = PanelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probit" => Ok(FamilyKind::Probit),
            "logit" => Ok(FamilyKind::Logit),
            "poisson" => Ok(FamilyKind::Poisson),
            "gaussian" => Ok(FamilyKind::Gaussian),
            other => Err(PanelError::Config(format!(
                "unknown family `{other}` (expected probit|logit|poisson|gaussian)"
            ))),
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.build().name())
    }
}

/// Known transformation `h(z)` entering the index next to `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    /// `h(z) = z²`
    Square,
    /// `h(z) = ln(1 + z)`
    Log1p,
}

impl Transform {
    fn derivative(self, z: f64) -> f64 {
        match self {
            Transform::Square => 2.0 * z,
            Transform::Log1p => 1.0 / (1.0 + z),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum EffectKind {
    /// `m(β_k + x'_{-k}β_{-k} + π) - m(x'_{-k}β_{-k} + π)`
    BinaryDifference,
    /// `β_k m'(x'β + π)`
    ContinuousDerivative,
    /// `[β_k + β_j h'(z)] m'(x'β + π)` with `z = x_k`; for the Poisson
    /// family `m' = exp`.
    PoissonTransform { transform: Option<(usize, Transform)> },
}

/// Partial effect of regressor `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartialEffectSpec {
    pub k: usize,
    #[serde(flatten)]
    pub kind: EffectKind,
}

impl PartialEffectSpec {
    pub fn binary(k: usize) -> Self {
        Self { k, kind: EffectKind::BinaryDifference }
    }

    pub fn continuous(k: usize) -> Self {
        Self { k, kind: EffectKind::ContinuousDerivative }
    }

    pub fn poisson(k: usize, transform: Option<(usize, Transform)>) -> Self {
        Self { k, kind: EffectKind::PoissonTransform { transform } }
    }

    pub fn check(&self, n_regressors: usize) -> Result<()> {
        if self.k >= n_regressors {
            return Err(PanelError::InvalidSpec(format!(
                "regressor index {} out of range for K={n_regressors}",
                self.k
            )));
        }
        if let EffectKind::PoissonTransform { transform: Some((j, _)) } = self.kind {
            if j >= n_regressors || j == self.k {
                return Err(PanelError::InvalidSpec(format!(
                    "transform coefficient index {j} invalid for K={n_regressors}"
                )));
            }
        }
        Ok(())
    }

    /// Short label such as `x2:continuous`.
    pub fn label(&self, names: &[String]) -> String {
        let name = names.get(self.k).cloned().unwrap_or_else(|| format!("x{}", self.k));
        let kind = match self.kind {
            EffectKind::BinaryDifference => "binary",
            EffectKind::ContinuousDerivative => "continuous",
            EffectKind::PoissonTransform { .. } => "poisson",
        };
        format!("{name}:{kind}")
    }
}

/// Partial effect `Δ_it(β, π)` and its derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectBundle {
    pub value: f64,
    pub d_beta: Vec<f64>,
    pub d_pi: f64,
    pub d_pi2: f64,
    pub d_pi3: f64,
}

pub fn partial_effect_bundle(
    f: &dyn LikelihoodFamily,
    spec: &PartialEffectSpec,
    x: &[f64],
    beta: &[f64],
    pi: f64,
) -> Result<EffectBundle> {
    spec.check(x.len())?;
    let k = spec.k;
    let out = match spec.kind {
        EffectKind::BinaryDifference => {
            let base = index(x, beta) - x[k] * beta[k] + pi;
            let m1 = f.mean_derivs(base + beta[k]);
            let m0 = f.mean_derivs(base);
            let diff = |q: usize| m1[q] - m0[q];
            let d_beta = (0..x.len())
                .map(|l| if l == k { m1[1] } else { diff(1) * x[l] })
                .collect();
            EffectBundle { value: diff(0), d_beta, d_pi: diff(1), d_pi2: diff(2), d_pi3: diff(3) }
        }
        EffectKind::ContinuousDerivative => {
            let m = f.mean_derivs(index(x, beta) + pi);
            let bk = beta[k];
            let d_beta = (0..x.len())
                .map(|l| bk * m[2] * x[l] + if l == k { m[1] } else { 0.0 })
                .collect();
            EffectBundle { value: bk * m[1], d_beta, d_pi: bk * m[2], d_pi2: bk * m[3], d_pi3: bk * m[4] }
        }
        EffectKind::PoissonTransform { transform } => {
            let m = f.mean_derivs(index(x, beta) + pi);
            let (g, j, dh) = match transform {
                Some((j, h)) => {
                    let dh = h.derivative(x[k]);
                    (beta[k] + beta[j] * dh, Some(j), dh)
                }
                None => (beta[k], None, 0.0),
            };
            let d_beta = (0..x.len())
                .map(|l| {
                    let mut v = g * m[2] * x[l];
                    if l == k {
                        v += m[1];
                    }
                    if Some(l) == j {
                        v += dh * m[1];
                    }
                    v
                })
                .collect();
            EffectBundle { value: g * m[1], d_beta, d_pi: g * m[2], d_pi2: g * m[3], d_pi3: g * m[4] }
        }
    };
    if !out.value.is_finite() {
        return Err(PanelError::NumericOverflow { family: f.name(), eta: index(x, beta) + pi });
    }
    Ok(out)
}
