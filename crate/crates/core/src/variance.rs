//! Nonparametric bootstrap standard errors and confidence intervals.
//!
//! Setting 1 resamples all N units; Settings 2 and 3 resample the n sampled
//! units and keep N and any external summary fixed. Working models are refit
//! on every resample.

use crate::data::{ExternalSummary, SurveyDataset};
use crate::estimand::Estimand;
use crate::estimators::{estimate, ElOptions, EstimatorSpec, ModelCatalog, SummarySpec};
use crate::error::{Error, Result};
use crate::rng::substream;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Minimum share of converged resamples.
pub const MIN_CONVERGED_SHARE: f64 = 0.8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalKind {
    /// `theta_hat +/- 1.96 se`
    #[default]
    Normal,
    /// 2.5% and 97.5% replicate quantiles.
    Percentile,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    pub theta_hat: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub interval: IntervalKind,
    pub b_used: usize,
    pub b_requested: usize,
    /// One row per converged resample, in resample order.
    pub replicate_estimates: Vec<Vec<f64>>,
}

impl BootstrapResult {
    /// Whether every component of `theta` lies inside the interval.
    pub fn covers(&self, theta: &[f64]) -> bool {
        theta
            .iter()
            .zip(self.ci_lower.iter().zip(&self.ci_upper))
            .all(|(t, (lo, hi))| lo <= t && t <= hi)
    }
}

/// Type-7 quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Bootstraps an arbitrary estimator. `theta_hat` is the estimate on the
/// original data; resample `b` uses the substream `("bootstrap", b)`.
pub fn bootstrap_with<F>(
    data: &SurveyDataset,
    estimator: F,
    theta_hat: &[f64],
    b: usize,
    seed: u64,
    interval: IntervalKind,
) -> Result<BootstrapResult>
where
    F: Fn(&SurveyDataset) -> Result<Vec<f64>> + Sync,
{
    if b < 2 {
        return Err(Error::Config(format!("bootstrap needs at least 2 resamples, got {b}")));
    }
    let pool = if data.setting().stores_unsampled() {
        data.units().len()
    } else {
        data.n_sampled()
    };
    let reps: Vec<Option<Vec<f64>>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, "bootstrap", i as u64);
            let idx: Vec<usize> = (0..pool).map(|_| rng.random_range(0..pool)).collect();
            estimator(&data.resample(&idx)).ok().filter(|t| t.iter().all(|v| v.is_finite()))
        })
        .collect();
    let replicate_estimates: Vec<Vec<f64>> = reps.into_iter().flatten().collect();
    let used = replicate_estimates.len();
    if (used as f64) < MIN_CONVERGED_SHARE * b as f64 || used < 2 {
        return Err(Error::BootstrapUnstable { used, requested: b });
    }
    let q = theta_hat.len();
    let mut se = vec![0.0; q];
    let mut ci_lower = vec![0.0; q];
    let mut ci_upper = vec![0.0; q];
    for j in 0..q {
        let col: Vec<f64> = replicate_estimates.iter().map(|r| r[j]).collect();
        let mean = col.iter().sum::<f64>() / used as f64;
        se[j] = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (used - 1) as f64).sqrt();
        match interval {
            IntervalKind::Normal => {
                ci_lower[j] = theta_hat[j] - 1.96 * se[j];
                ci_upper[j] = theta_hat[j] + 1.96 * se[j];
            }
            IntervalKind::Percentile => {
                let mut s = col;
                s.sort_by(f64::total_cmp);
                ci_lower[j] = quantile(&s, 0.025);
                ci_upper[j] = quantile(&s, 0.975);
            }
        }
    }
    Ok(BootstrapResult {
        theta_hat: theta_hat.to_vec(),
        se,
        ci_lower,
        ci_upper,
        interval,
        b_used: used,
        b_requested: b,
        replicate_estimates,
    })
}

/// Bootstraps a catalog estimator, refitting its working models per resample.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap(
    data: &SurveyDataset,
    spec: &EstimatorSpec,
    catalog: &ModelCatalog,
    e: &Estimand,
    ext: Option<(&ExternalSummary, &SummarySpec)>,
    opts: &ElOptions,
    b: usize,
    seed: u64,
    interval: IntervalKind,
) -> Result<BootstrapResult> {
    let projected;
    let data = match spec.setting {
        Some(s) if s != data.setting() => {
            projected = data.project(s)?;
            &projected
        }
        _ => data,
    };
    let point = estimate(data, spec, catalog, e, ext, opts)?;
    bootstrap_with(
        data,
        |d| estimate(d, spec, catalog, e, ext, opts).map(|r| r.theta_hat),
        &point.theta_hat,
        b,
        seed,
        interval,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Setting, UnitRecord};
    use crate::estimators::estimate_ht_with;

    fn complete(ys: &[f64]) -> SurveyDataset {
        let units = ys.iter().map(|&y| UnitRecord::respondent(vec![0.0], vec![], 1.0, y)).collect();
        SurveyDataset::new(units, ys.len(), Setting::Setting1, vec!["x".into()], vec![]).unwrap()
    }

    fn ht(d: &SurveyDataset) -> Result<Vec<f64>> {
        estimate_ht_with(d, &vec![1.0; d.n_sampled()], &Estimand::mean()).map(|r| r.theta_hat)
    }

    #[test]
    fn constant_outcome_has_zero_se() {
        let d = complete(&[3.0; 20]);
        let r = bootstrap_with(&d, ht, &[3.0], 50, 1, IntervalKind::Normal).unwrap();
        assert_eq!(r.se, vec![0.0]);
        assert_eq!((r.ci_lower[0], r.ci_upper[0]), (3.0, 3.0));
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let ys: Vec<f64> = (0..30).map(|i| (i * i % 7) as f64).collect();
        let d = complete(&ys);
        let a = bootstrap_with(&d, ht, &[1.0], 40, 9, IntervalKind::Percentile).unwrap();
        let b = bootstrap_with(&d, ht, &[1.0], 40, 9, IntervalKind::Percentile).unwrap();
        assert_eq!(a, b);
        assert!(a.ci_lower[0] <= a.ci_upper[0] && a.se[0] > 0.0);
    }

    #[test]
    fn mostly_failing_resamples_are_unstable() {
        let d = complete(&[1.0, 2.0, 3.0]);
        let flaky = |d: &SurveyDataset| {
            if d.units()[0].outcome() == 1.0 {
                ht(d)
            } else {
                Err(Error::Separation)
            }
        };
        assert!(matches!(
            bootstrap_with(&d, flaky, &[2.0], 100, 3, IntervalKind::Normal),
            Err(Error::BootstrapUnstable { .. })
        ));
    }

    #[test]
    fn too_few_resamples_rejected() {
        let d = complete(&[1.0, 2.0]);
        assert!(matches!(bootstrap_with(&d, ht, &[1.5], 1, 0, IntervalKind::Normal), Err(Error::Config(_))));
    }
}
