//! Monte Carlo summary statistics.

use serde::Serialize;

use crate::error::{PanelError, Result};

use super::neyman_scott::Z_95;

/// Bias, dispersion and interval accuracy of one estimator of one quantity.
///
/// With `relative` set, bias, SD and RMSE are in percent of the mean
/// absolute truth; otherwise in the quantity's own units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub replications: usize,
    pub truth: f64,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    /// Mean standard error over the simulation SD.
    pub se_sd: f64,
    /// Share of replications with `|estimate − truth| ≤ 1.96·se`.
    pub coverage: f64,
    pub relative: bool,
}

pub fn summarize(estimates: &[f64], truths: &[f64], ses: &[f64]) -> Result<Summary> {
    let r = estimates.len();
    if truths.len() != r || ses.len() != r {
        return Err(PanelError::Config(format!(
            "summary arrays differ in length ({r}, {}, {})",
            truths.len(),
            ses.len()
        )));
    }
    if r < 2 {
        return Err(PanelError::Config("summary needs at least 2 replications".into()));
    }
    let rf = r as f64;
    let mean = estimates.iter().sum::<f64>() / rf;
    let bias = estimates.iter().zip(truths).map(|(e, t)| e - t).sum::<f64>() / rf;
    let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (rf - 1.0)).sqrt();
    let mean_se = ses.iter().sum::<f64>() / rf;
    let hits = estimates.iter().zip(truths).zip(ses).filter(|((e, t), s)| (*e - *t).abs() <= Z_95 * **s).count();
    let truth = truths.iter().sum::<f64>() / rf;
    let scale = truths.iter().map(|t| t.abs()).sum::<f64>() / rf;
    let relative = scale > 0.0;
    let unit = if relative { 100.0 / scale } else { 1.0 };
    let (bias, sd) = (bias * unit, sd * unit);
    Ok(Summary {
        replications: r,
        truth,
        bias,
        sd,
        rmse: bias.hypot(sd),
        se_sd: mean_se * unit / sd,
        coverage: hits as f64 / rf,
        relative,
    })
}

/// Mean and Monte Carlo standard error.
pub fn mean_and_mc_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (m, sd / n.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn exact_estimates() {
        let s = summarize(&[2.0; 5], &[2.0; 5], &[0.1; 5]).unwrap();
        assert_eq!((s.bias, s.sd, s.coverage), (0.0, 0.0, 1.0));
        assert!(s.relative);
    }

    #[test]
    fn zero_truth_is_absolute() {
        let s = summarize(&[0.1, -0.1], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(!s.relative);
        assert!((s.sd - 0.02f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn normal_draws_cover_at_nominal_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = 20_000;
        let se = 0.3;
        let est: Vec<f64> = (0..r).map(|_| 1.0 + se * rng.sample::<f64, _>(StandardNormal)).collect();
        let s = summarize(&est, &vec![1.0; r], &vec![se; r]).unwrap();
        let p = 0.95;
        assert!((s.coverage - p).abs() < 4.0 * (p * (1.0 - p) / r as f64).sqrt(), "{}", s.coverage);
        assert!((s.se_sd - 1.0).abs() < 0.03);
    }

    #[test]
    fn mismatched_lengths() {
        assert!(summarize(&[1.0, 2.0], &[1.0], &[1.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn rmse_identity(est in proptest::collection::vec(-5.0f64..5.0, 2..40), truth in 0.5f64..3.0) {
            let n = est.len();
            let s = summarize(&est, &vec![truth; n], &vec![1.0; n]).unwrap();
            prop_assert!((s.rmse * s.rmse - s.bias * s.bias - s.sd * s.sd).abs() <= 1e-9 * (1.0 + s.rmse * s.rmse));
            let mean = est.iter().sum::<f64>() / n as f64;
            prop_assert!((s.bias - 100.0 * (mean - truth) / truth).abs() < 1e-9);
        }
    }
}
