//! Monte Carlo driver over the estimator grid.

use super::{draw_external_mean, generate_population, GeneratorParams, Truth};
use crate::data::Setting;
use crate::estimand::Estimand;
use crate::estimators::{estimate, ElOptions, EstimatorSpec, ModelCatalog, SummarySpec};
use crate::error::{Error, Result};
use crate::rng::child_seed;
use crate::variance::{bootstrap, IntervalKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub b: usize,
    #[serde(default)]
    pub interval: IntervalKind,
    /// Estimators to bootstrap; all of them when absent.
    #[serde(default)]
    pub estimators: Option<Vec<EstimatorSpec>>,
}

/// One Monte Carlo study. Estimators without a setting suffix run in
/// Setting 1; Settings 2 and 3 use projections of the same draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    pub estimators: Vec<EstimatorSpec>,
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub generator: GeneratorParams,
    /// External sample size for identifiers written with a symbolic `^(N1)`.
    #[serde(default)]
    pub n1: Option<usize>,
    #[serde(default)]
    pub catalog: ModelCatalog,
    #[serde(default)]
    pub el: ElOptions,
    #[serde(default)]
    pub bootstrap: Option<BootstrapPlan>,
}

fn default_name() -> String {
    "scenario".into()
}

impl Scenario {
    pub fn new(estimators: &[&str], replicates: usize, seed: u64) -> Result<Self> {
        Ok(Scenario {
            name: default_name(),
            estimators: estimators.iter().map(|s| EstimatorSpec::parse(s)).collect::<Result<_>>()?,
            replicates,
            seed,
            generator: GeneratorParams::default(),
            n1: None,
            catalog: ModelCatalog::default(),
            el: ElOptions::default(),
            bootstrap: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.estimators.is_empty() {
            return Err(Error::Config("scenario names no estimators".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("scenario needs at least one replicate".into()));
        }
        for s in &self.estimators {
            self.catalog.check(s)?;
            if s.setting == Some(Setting::Setting3) && s.n1.or(self.n1).is_none() {
                return Err(Error::Config(format!("estimator {s} needs an N1 value")));
            }
        }
        if let Some(bp) = &self.bootstrap {
            if bp.b < 2 {
                return Err(Error::Config("bootstrap needs at least 2 resamples".into()));
            }
            if let Some(list) = &bp.estimators {
                if let Some(s) = list.iter().find(|s| !self.estimators.contains(s)) {
                    return Err(Error::Config(format!("bootstrap estimator {s} is not in the scenario")));
                }
            }
        }
        Ok(())
    }

    fn bootstraps(&self, s: &EstimatorSpec) -> bool {
        match &self.bootstrap {
            None => false,
            Some(bp) => bp.estimators.as_ref().is_none_or(|l| l.contains(s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRow {
    pub estimator: String,
    pub replicates: usize,
    pub failures: usize,
    pub mean: f64,
    pub bias: f64,
    /// Monte Carlo standard deviation with divisor `replicates`.
    pub sd: f64,
    pub rmse: f64,
    pub coverage: Option<f64>,
    pub mean_se: Option<f64>,
    pub bootstrap_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub estimator: String,
    pub replicate: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCReport {
    pub scenario: String,
    pub theta_true: f64,
    pub replicates: usize,
    pub rows: Vec<EstimatorRow>,
    /// `estimates[k][r]`: estimator `k` on replicate `r`.
    pub estimates: Vec<Vec<Option<f64>>>,
    /// Bootstrap standard errors, laid out like `estimates`.
    pub std_errors: Vec<Vec<Option<f64>>>,
    /// `(n, m)` per replicate.
    pub sample_sizes: Vec<(usize, usize)>,
    pub failures: Vec<ReplicateFailure>,
}

impl MCReport {
    pub fn row(&self, estimator: &str) -> Option<&EstimatorRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    /// Estimates of `estimator`, one per replicate.
    pub fn column(&self, estimator: &str) -> Option<&[Option<f64>]> {
        let k = self.rows.iter().position(|r| r.estimator == estimator)?;
        Some(&self.estimates[k])
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::InvalidData(format!("writing report: {e}"));
        wr.write_record([
            "estimator",
            "replicates",
            "failures",
            "mean",
            "bias",
            "sd",
            "rmse",
            "coverage",
            "mean_se",
            "bootstrap_failures",
        ])
        .map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            wr.write_record([
                r.estimator.clone(),
                r.replicates.to_string(),
                r.failures.to_string(),
                r.mean.to_string(),
                r.bias.to_string(),
                r.sd.to_string(),
                r.rmse.to_string(),
                opt(r.coverage),
                opt(r.mean_se),
                r.bootstrap_failures.to_string(),
            ])
            .map_err(io)?;
        }
        wr.flush().map_err(|e| Error::InvalidData(format!("writing report: {e}")))?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidData(format!("serializing report: {e}")))
    }
}

struct Cell {
    estimate: std::result::Result<f64, String>,
    se: Option<f64>,
    covered: Option<bool>,
    boot_failed: bool,
}

fn run_replicate(sc: &Scenario, rep: usize, theta_true: f64) -> Result<((usize, usize), Vec<Cell>)> {
    let e = Estimand::mean();
    let params = GeneratorParams {
        seed: child_seed(sc.seed, "replicate", rep as u64),
        ..sc.generator.clone()
    };
    let data = generate_population(&params)?;
    let summary = SummarySpec::mean_of("x");
    let cells = sc
        .estimators
        .iter()
        .enumerate()
        .map(|(k, spec)| {
            let ext = match spec.setting {
                Some(Setting::Setting3) => {
                    let n1 = spec.n1.or(sc.n1).expect("validated");
                    match draw_external_mean(&sc.generator, n1, sc.seed, rep as u64) {
                        Ok(x) => Some(x),
                        Err(err) => {
                            return Cell {
                                estimate: Err(err.to_string()),
                                se: None,
                                covered: None,
                                boot_failed: false,
                            }
                        }
                    }
                }
                _ => None,
            };
            let ext_ref = ext.as_ref().map(|x| (x, &summary));
            let spec_s1;
            let spec = if spec.setting.is_none() {
                spec_s1 = spec.in_setting(Setting::Setting1);
                &spec_s1
            } else {
                spec
            };
            if sc.bootstraps(&sc.estimators[k]) {
                let bp = sc.bootstrap.as_ref().expect("checked");
                let seed = child_seed(sc.seed, &format!("bootstrap-{k}"), rep as u64);
                match bootstrap(&data, spec, &sc.catalog, &e, ext_ref, &sc.el, bp.b, seed, bp.interval) {
                    Ok(b) => Cell {
                        estimate: Ok(b.theta_hat[0]),
                        se: Some(b.se[0]),
                        covered: Some(b.covers(&[theta_true])),
                        boot_failed: false,
                    },
                    Err(Error::BootstrapUnstable { .. }) => Cell {
                        estimate: estimate(&data, spec, &sc.catalog, &e, ext_ref, &sc.el)
                            .map(|r| r.theta_hat[0])
                            .map_err(|err| err.to_string()),
                        se: None,
                        covered: None,
                        boot_failed: true,
                    },
                    Err(err) => Cell {
                        estimate: Err(err.to_string()),
                        se: None,
                        covered: None,
                        boot_failed: false,
                    },
                }
            } else {
                Cell {
                    estimate: estimate(&data, spec, &sc.catalog, &e, ext_ref, &sc.el)
                        .map(|r| r.theta_hat[0])
                        .map_err(|err| err.to_string()),
                    se: None,
                    covered: None,
                    boot_failed: false,
                }
            }
        })
        .collect();
    Ok(((data.n_sampled(), data.n_respondents()), cells))
}

/// Runs every replicate (in parallel) and reduces to a report. Estimator
/// failures are recorded, not fatal. `workers = None` uses rayon's global
/// pool.
pub fn run_monte_carlo(sc: &Scenario, workers: Option<usize>) -> Result<MCReport> {
    sc.validate()?;
    let theta_true = Truth::new(&sc.generator)?.theta;
    let work = || -> Result<Vec<((usize, usize), Vec<Cell>)>> {
        (0..sc.replicates)
            .into_par_iter()
            .map(|r| run_replicate(sc, r, theta_true))
            .collect()
    };
    let results = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let k = sc.estimators.len();
    let mut estimates = vec![vec![None; sc.replicates]; k];
    let mut std_errors = vec![vec![None; sc.replicates]; k];
    let mut covered = vec![Vec::new(); k];
    let mut boot_failures = vec![0; k];
    let mut failures = Vec::new();
    let mut sample_sizes = Vec::with_capacity(sc.replicates);
    for (r, (sizes, cells)) in results.into_iter().enumerate() {
        sample_sizes.push(sizes);
        for (j, c) in cells.into_iter().enumerate() {
            match c.estimate {
                Ok(v) => estimates[j][r] = Some(v),
                Err(message) => failures.push(ReplicateFailure {
                    estimator: sc.estimators[j].to_string(),
                    replicate: r,
                    message,
                }),
            }
            std_errors[j][r] = c.se;
            if let Some(cv) = c.covered {
                covered[j].push(cv);
            }
            boot_failures[j] += c.boot_failed as usize;
        }
    }
    let rows = (0..k)
        .map(|j| {
            let vals: Vec<f64> = estimates[j].iter().flatten().copied().collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            let bias = mean - theta_true;
            let ses: Vec<f64> = std_errors[j].iter().flatten().copied().collect();
            EstimatorRow {
                estimator: sc.estimators[j].to_string(),
                replicates: vals.len(),
                failures: sc.replicates - vals.len(),
                mean,
                bias,
                sd,
                rmse: (bias * bias + sd * sd).sqrt(),
                coverage: (!covered[j].is_empty())
                    .then(|| covered[j].iter().filter(|c| **c).count() as f64 / covered[j].len() as f64),
                mean_se: (!ses.is_empty()).then(|| ses.iter().sum::<f64>() / ses.len() as f64),
                bootstrap_failures: boot_failures[j],
            }
        })
        .collect();
    Ok(MCReport {
        scenario: sc.name.clone(),
        theta_true,
        replicates: sc.replicates,
        rows,
        estimates,
        std_errors,
        sample_sizes,
        failures,
    })
}
