//! Average partial effects.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::Result;
use crate::family::{LikelihoodFamily, PartialEffectSpec};
use crate::panel::PanelDataset;
use crate::plugin::EffectGrid;
use crate::solver::{FitResult, ParameterState};

#[derive(Debug, Clone, Serialize)]
pub struct ApeValue {
    /// One average per requested spec.
    pub delta: Vec<f64>,
    /// Per-cell effects, zero on unobserved cells.
    #[serde(skip)]
    pub cell_effects: Vec<DMatrix<f64>>,
    /// Slope parameters the effects were evaluated at.
    pub beta: Vec<f64>,
}

/// Observed-cell averages of `Δ_it(β, α_i + γ_t)` at the given parameters.
pub fn compute_ape_at(
    d: &PanelDataset,
    f: &dyn LikelihoodFamily,
    state: &ParameterState,
    specs: &[PartialEffectSpec],
) -> Result<ApeValue> {
    let n_obs = d.n_observed() as f64;
    let mut delta = Vec::with_capacity(specs.len());
    let mut cell_effects = Vec::with_capacity(specs.len());
    for spec in specs {
        let g = EffectGrid::new(d, f, spec, state)?;
        delta.push(g.value.sum() / n_obs);
        cell_effects.push(g.value);
    }
    Ok(ApeValue { delta, cell_effects, beta: state.beta.clone() })
}

pub fn compute_ape(d: &PanelDataset, f: &dyn LikelihoodFamily, fit: &FitResult, specs: &[PartialEffectSpec]) -> Result<ApeValue> {
    compute_ape_at(d, f, &fit.state, specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::PanelError;
    use crate::family::{Probit, Poisson};
    use crate::hessian::Normalization;

    fn state(n: usize, t: usize, beta: Vec<f64>) -> ParameterState {
        ParameterState {
            beta,
            alpha: (0..n).map(|i| 0.1 * i as f64).collect(),
            gamma: (0..t).map(|s| -0.2 * s as f64).collect(),
            normalization: Normalization::penalty(),
        }
    }

    fn panel(n: usize, t: usize, x: f64) -> PanelDataset {
        let y = (0..n * t).map(|c| (c % 3 == 0) as u8 as f64).collect();
        PanelDataset::balanced(n, t, vec!["x1".into()], y, vec![x; n * t]).unwrap()
    }

    #[test]
    fn continuous_probit_at_zero_index() {
        let d = panel(3, 3, 0.0);
        let s = ParameterState { beta: vec![1.0], alpha: vec![0.0; 3], gamma: vec![0.0; 3], normalization: Normalization::penalty() };
        let a = compute_ape_at(&d, &Probit, &s, &[PartialEffectSpec::continuous(0)]).unwrap();
        assert!((a.delta[0] - 0.398_942_280_401_432_7).abs() < 1e-15);
    }

    #[test]
    fn invariant_to_effect_shift() {
        let d = panel(4, 5, 0.7);
        let s = state(4, 5, vec![0.8]);
        let mut shifted = s.clone();
        shifted.alpha.iter_mut().for_each(|a| *a += 5.0);
        shifted.gamma.iter_mut().for_each(|g| *g -= 5.0);
        let specs = [PartialEffectSpec::continuous(0), PartialEffectSpec::binary(0)];
        let a = compute_ape_at(&d, &Probit, &s, &specs).unwrap();
        let b = compute_ape_at(&d, &Probit, &shifted, &specs).unwrap();
        for (x, y) in a.delta.iter().zip(&b.delta) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_slope_binary_effect_vanishes() {
        let d = panel(3, 4, 1.0);
        let a = compute_ape_at(&d, &Probit, &state(3, 4, vec![0.0]), &[PartialEffectSpec::binary(0)]).unwrap();
        assert_eq!(a.delta[0], 0.0);
    }

    #[test]
    fn invalid_regressor_index() {
        let d = panel(3, 3, 0.0);
        let r = compute_ape_at(&d, &Poisson, &state(3, 3, vec![0.5]), &[PartialEffectSpec::poisson(2, None)]);
        assert!(matches!(r, Err(PanelError::InvalidSpec(_))));
    }
}
