//! Structured inverse of the effects block of the Hessian.
//!
//! For weights `w_it ≥ 0` the effects block is
//! `H = s·([[diag(Σ_t w), W], [W', diag(Σ_i w)]] + b·vv')` with
//! `v = (1_N, -1_T)` and scale `s`. The weighted part annihilates `v`, so a
//! solve splits into the penalty direction (eigenvalue `s·b·(N+T)`) and a
//! consistent singular system on `v⊥`, which is reduced to a dense Schur
//! system on the smaller of the two effect dimensions.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{PanelError, Result};

/// How the one-dimensional indeterminacy of `α_i + γ_t` is removed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Normalization {
    /// Quadratic penalty `b/2·(Σα - Σγ)²` on the objective.
    Penalty { b: f64 },
    DropFirstAlpha,
    #[default]
    DropFirstGamma,
}

impl Normalization {
    pub fn penalty() -> Self {
        Normalization::Penalty { b: 1.0 }
    }

    pub fn label(&self) -> String {
        match self {
            Normalization::Penalty { b } => format!("penalty(b={b})"),
            Normalization::DropFirstAlpha => "drop-first-alpha".into(),
            Normalization::DropFirstGamma => "drop-first-gamma".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StructuredHessian {
    /// `N×T` cell weights; zero marks an unobserved cell.
    pub weights: DMatrix<f64>,
    pub normalization: Normalization,
    pub scale: f64,
}

impl StructuredHessian {
    pub fn new(weights: DMatrix<f64>, normalization: Normalization, scale: f64) -> Self {
        Self { weights, normalization, scale }
    }

    /// The expected-Hessian form with scale `1/√(NT)`.
    pub fn scaled(weights: DMatrix<f64>, b: f64) -> Self {
        let s = 1.0 / ((weights.nrows() * weights.ncols()) as f64).sqrt();
        Self::new(weights, Normalization::Penalty { b }, s)
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows() + self.weights.ncols()
    }

    pub fn factor(&self) -> Result<StructuredFactor> {
        StructuredFactor::new(self)
    }

    /// Dense matrix, for diagnostics and oracles. Under a drop
    /// normalization the dropped row and column are replaced by the identity.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let (n, t) = self.weights.shape();
        let mut m = DMatrix::zeros(n + t, n + t);
        for i in 0..n {
            for s in 0..t {
                let w = self.weights[(i, s)];
                m[(i, i)] += w;
                m[(n + s, n + s)] += w;
                m[(i, n + s)] = w;
                m[(n + s, i)] = w;
            }
        }
        match self.normalization {
            Normalization::Penalty { b } => {
                for a in 0..n + t {
                    for c in 0..n + t {
                        let sign = if (a < n) == (c < n) { 1.0 } else { -1.0 };
                        m[(a, c)] += b * sign;
                    }
                }
            }
            Normalization::DropFirstAlpha => isolate(&mut m, 0),
            Normalization::DropFirstGamma => isolate(&mut m, n),
        }
        m * self.scale
    }
}

fn isolate(m: &mut DMatrix<f64>, k: usize) {
    m.row_mut(k).fill(0.0);
    m.column_mut(k).fill(0.0);
    m[(k, k)] = 1.0;
}

/// Factorization reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct StructuredFactor {
    weights: DMatrix<f64>,
    row_sums: DVector<f64>,
    col_sums: DVector<f64>,
    /// True when units are eliminated and the Schur system lives on periods.
    eliminate_units: bool,
    schur: Cholesky<f64, Dyn>,
    normalization: Normalization,
    scale: f64,
}

impl StructuredFactor {
    fn new(h: &StructuredHessian) -> Result<Self> {
        let w = &h.weights;
        let (n, t) = w.shape();
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(PanelError::NumericalBreakdown("negative or non-finite Hessian weight".into()));
        }
        let row_sums = DVector::from_iterator(n, w.row_iter().map(|r| r.sum()));
        let col_sums = DVector::from_iterator(t, w.column_iter().map(|c| c.sum()));
        if let Some(i) = row_sums.iter().position(|v| *v <= 0.0) {
            return Err(PanelError::NumericalBreakdown(format!("unit {i} has no positive weight")));
        }
        if let Some(s) = col_sums.iter().position(|v| *v <= 0.0) {
            return Err(PanelError::NumericalBreakdown(format!("period {s} has no positive weight")));
        }
        if let Normalization::Penalty { b } = h.normalization {
            if !(b > 0.0) {
                return Err(PanelError::NumericalBreakdown(format!("penalty constant {b} must be positive")));
            }
        }
        let eliminate_units = n >= t;
        let (outer, inner_diag, cross) = if eliminate_units {
            (&row_sums, &col_sums, w.clone())
        } else {
            (&col_sums, &row_sums, w.transpose())
        };
        // Schur complement on the kept side, plus 11' to pin its null vector.
        let m = inner_diag.len();
        let mut s = DMatrix::from_element(m, m, 1.0);
        for a in 0..m {
            s[(a, a)] += inner_diag[a];
        }
        for (r, &d) in outer.iter().enumerate() {
            let row = cross.row(r);
            for a in 0..m {
                let f = row[a] / d;
                if f == 0.0 {
                    continue;
                }
                for c in 0..m {
                    s[(a, c)] -= f * row[c];
                }
            }
        }
        let schur = Cholesky::new(s)
            .ok_or_else(|| PanelError::NumericalBreakdown("effects Schur complement not positive definite (disconnected panel?)".into()))?;
        Ok(Self {
            weights: w.clone(),
            row_sums,
            col_sums,
            eliminate_units,
            schur,
            normalization: h.normalization,
            scale: h.scale,
        })
    }

    fn n(&self) -> usize {
        self.row_sums.len()
    }

    fn t(&self) -> usize {
        self.col_sums.len()
    }

    /// A solution of the weighted (penalty-free) system for `rhs ⟂ v`,
    /// orthogonal to `v`.
    fn solve_singular(&self, rhs: &[f64]) -> Vec<f64> {
        let (n, t) = (self.n(), self.t());
        let (ra, rg) = rhs.split_at(n);
        let w = &self.weights;
        let mut out = vec![0.0; n + t];
        if self.eliminate_units {
            // γ: (Dg - W'Da⁻¹W) γ = rg - W'Da⁻¹ra
            let mut b = DVector::from_column_slice(rg);
            for i in 0..n {
                let f = ra[i] / self.row_sums[i];
                for s in 0..t {
                    b[s] -= w[(i, s)] * f;
                }
            }
            let g = self.schur.solve(&b);
            for i in 0..n {
                let cross: f64 = (0..t).map(|s| w[(i, s)] * g[s]).sum();
                out[i] = (ra[i] - cross) / self.row_sums[i];
            }
            out[n..].copy_from_slice(g.as_slice());
        } else {
            let mut b = DVector::from_column_slice(ra);
            for s in 0..t {
                let f = rg[s] / self.col_sums[s];
                for i in 0..n {
                    b[i] -= w[(i, s)] * f;
                }
            }
            let a = self.schur.solve(&b);
            for s in 0..t {
                let cross: f64 = (0..n).map(|i| w[(i, s)] * a[i]).sum();
                out[n + s] = (rg[s] - cross) / self.col_sums[s];
            }
            out[..n].copy_from_slice(a.as_slice());
        }
        let shift = v_dot(&out, n) / (n + t) as f64;
        add_v(&mut out, n, -shift);
        out
    }

    /// `H⁻¹·rhs`. Under a drop normalization the dropped entry of `rhs` is
    /// ignored and the dropped entry of the result is zero.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let (n, t) = (self.n(), self.t());
        assert_eq!(rhs.len(), n + t, "right-hand side has wrong length");
        let mut out = match self.normalization {
            Normalization::Penalty { b } => {
                let along = v_dot(rhs, n) / (n + t) as f64;
                let mut r = rhs.to_vec();
                add_v(&mut r, n, -along);
                let mut z = self.solve_singular(&r);
                add_v(&mut z, n, along / (b * (n + t) as f64));
                z
            }
            Normalization::DropFirstAlpha | Normalization::DropFirstGamma => {
                let k = if self.normalization == Normalization::DropFirstAlpha { 0 } else { n };
                let mut r = rhs.to_vec();
                r[k] = 0.0;
                // make the system consistent through the free dropped equation
                let gap = v_dot(&r, n);
                r[k] = if k < n { -gap } else { gap };
                let mut z = self.solve_singular(&r);
                let sign = if k < n { 1.0 } else { -1.0 };
                let shift = z[k] * sign;
                add_v(&mut z, n, -shift);
                z[k] = 0.0;
                z
            }
        };
        for v in &mut out {
            *v /= self.scale;
        }
        out
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(rhs.nrows(), rhs.ncols());
        for c in 0..rhs.ncols() {
            let col: Vec<f64> = rhs.column(c).iter().copied().collect();
            out.set_column(c, &DVector::from_vec(self.solve(&col)));
        }
        out
    }

    /// Dense inverse, `O((N+T)²)` memory.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve_matrix(&DMatrix::identity(self.n() + self.t(), self.n() + self.t()))
    }
}

fn v_dot(z: &[f64], n: usize) -> f64 {
    z[..n].iter().sum::<f64>() - z[n..].iter().sum::<f64>()
}

fn add_v(z: &mut [f64], n: usize, c: f64) {
    for (k, v) in z.iter_mut().enumerate() {
        if k < n {
            *v += c;
        } else {
            *v -= c;
        }
    }
}

/// `h⁻¹·rhs` through the structured factorization.
pub fn solve_structured(h: &StructuredHessian, rhs: &[f64]) -> Result<Vec<f64>> {
    Ok(h.factor()?.solve(rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_weights(rng: &mut ChaCha8Rng, n: usize, t: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, t, |_, _| rng.random_range(0.1..2.0))
    }

    fn dense_solve(h: &StructuredHessian, rhs: &[f64]) -> Vec<f64> {
        let m = h.to_dense();
        let x = m.lu().solve(&DVector::from_column_slice(rhs)).unwrap();
        x.iter().copied().collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * scale, "{x} vs {y}");
        }
    }

    #[test]
    fn penalty_direction_is_an_eigenvector() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, t) = (5, 4);
        let b = 1.7;
        let h = StructuredHessian::scaled(random_weights(&mut rng, n, t), b);
        let v: Vec<f64> = (0..n + t).map(|k| if k < n { 1.0 } else { -1.0 }).collect();
        let z = solve_structured(&h, &v).unwrap();
        let c = ((n * t) as f64).sqrt() / (b * (n + t) as f64);
        let expect: Vec<f64> = v.iter().map(|x| x * c).collect();
        assert_close(&z, &expect, 1e-12);
    }

    #[test]
    fn matches_dense_oracle_for_every_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (n, t) in [(5, 4), (3, 7), (6, 6)] {
            let w = random_weights(&mut rng, n, t);
            let rhs: Vec<f64> = (0..n + t).map(|_| rng.random_range(-1.0..1.0)).collect();
            for norm in [Normalization::Penalty { b: 0.5 }, Normalization::DropFirstAlpha, Normalization::DropFirstGamma] {
                let h = StructuredHessian::new(w.clone(), norm, 0.3);
                let mut r = rhs.clone();
                match norm {
                    Normalization::DropFirstAlpha => r[0] = 0.0,
                    Normalization::DropFirstGamma => r[n] = 0.0,
                    _ => {}
                }
                assert_close(&solve_structured(&h, &rhs).unwrap(), &dense_solve(&h, &r), 1e-10);
            }
        }
    }

    #[test]
    fn masked_cells_are_supported() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = random_weights(&mut rng, 4, 5);
        w[(0, 0)] = 0.0;
        w[(3, 2)] = 0.0;
        let h = StructuredHessian::new(w, Normalization::penalty(), 1.0);
        let rhs: Vec<f64> = (0..9).map(|k| k as f64 - 4.0).collect();
        assert_close(&solve_structured(&h, &rhs).unwrap(), &dense_solve(&h, &rhs), 1e-10);
    }

    #[test]
    fn empty_unit_is_rejected() {
        let mut w = DMatrix::from_element(3, 3, 1.0);
        w.row_mut(1).fill(0.0);
        let h = StructuredHessian::new(w, Normalization::penalty(), 1.0);
        assert!(matches!(h.factor(), Err(PanelError::NumericalBreakdown(_))));
    }

    proptest! {
        #[test]
        fn inverse_is_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = StructuredHessian::scaled(random_weights(&mut rng, 4, 3), 1.0);
            let inv = h.factor().unwrap().inverse();
            prop_assert!((&inv - inv.transpose()).amax() <= 1e-10 * inv.amax());
        }
    }
}
