//! Superpopulation generator, Monte Carlo driver and efficiency bounds.
//!
//! The default generator is linear-Gaussian:
//! `X ~ N(0, .5)`, `Z ~ N(0, .5)`, `Y | x, z ~ N(x - z, .5)`,
//! `log(W - 1) | x, y, z ~ N(2.95 - .25x - .45y - .1z, .05)`,
//! `P(delta = 1) = 1/w` and `P(R = 1 | delta = 1) = expit(-.3 + .75x - .5z + .05w)`,
//! with every second Gaussian argument a variance.

mod bound;
mod mc;

pub use bound::{estimate_efficiency_bound, BoundEstimate, BoundSetting, Truth};
pub use mc::{run_monte_carlo, BootstrapPlan, EstimatorRow, MCReport, Scenario};

use crate::data::{ExternalSummary, Setting, SurveyDataset, UnitRecord};
use crate::error::{Error, Result};
use crate::models::expit;
use crate::rng::substream;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Normal law with a mean linear in the conditioning variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussian {
    pub intercept: f64,
    /// Coefficients in the order documented on the field that uses it.
    pub coef: Vec<f64>,
    pub variance: f64,
}

impl LinearGaussian {
    fn mean(&self, vals: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(vals).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Sampling weight law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum WeightLaw {
    /// `log(W - 1) | x, y, z` Gaussian; `coef` is over `(x, y, z)`.
    LogNormalShift(LinearGaussian),
    /// Every unit has weight `value >= 1`.
    Fixed { value: f64 },
}

/// Response law among sampled units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ResponseLaw {
    /// `expit(intercept + coef . (x, z, w))`
    Logistic { intercept: f64, coef: [f64; 3] },
    Always,
}

impl ResponseLaw {
    pub fn prob(&self, x: f64, z: f64, w: f64) -> f64 {
        match self {
            ResponseLaw::Logistic { intercept, coef } => expit(intercept + coef[0] * x + coef[1] * z + coef[2] * w),
            ResponseLaw::Always => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorParams {
    pub population_size: usize,
    /// `X` law; `coef` is empty.
    pub x_law: LinearGaussian,
    /// `Z` law; `coef` is empty.
    pub z_law: LinearGaussian,
    /// `Y | x, z`; `coef` is over `(x, z)`.
    pub y_law: LinearGaussian,
    pub w_law: WeightLaw,
    pub response: ResponseLaw,
    pub seed: u64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            population_size: 10_000,
            x_law: LinearGaussian {
                intercept: 0.0,
                coef: vec![],
                variance: 0.5,
            },
            z_law: LinearGaussian {
                intercept: 0.0,
                coef: vec![],
                variance: 0.5,
            },
            y_law: LinearGaussian {
                intercept: 0.0,
                coef: vec![1.0, -1.0],
                variance: 0.5,
            },
            w_law: WeightLaw::LogNormalShift(LinearGaussian {
                intercept: 2.95,
                coef: vec![-0.25, -0.45, -0.1],
                variance: 0.05,
            }),
            response: ResponseLaw::Logistic {
                intercept: -0.3,
                coef: [0.75, -0.5, 0.05],
            },
            seed: 0,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.population_size < 2 {
            return bad("population size must be at least 2");
        }
        if !self.x_law.coef.is_empty() || !self.z_law.coef.is_empty() {
            return bad("x and z laws take no coefficients");
        }
        if self.y_law.coef.len() != 2 {
            return bad("y law needs coefficients for (x, z)");
        }
        let variances = [self.x_law.variance, self.z_law.variance, self.y_law.variance];
        if variances.iter().any(|v| !(*v >= 0.0)) {
            return bad("variances must be non-negative");
        }
        match &self.w_law {
            WeightLaw::LogNormalShift(l) => {
                if l.coef.len() != 3 || !(l.variance >= 0.0) {
                    return bad("weight law needs coefficients for (x, y, z) and a non-negative variance");
                }
            }
            WeightLaw::Fixed { value } => {
                if !(*value >= 1.0) {
                    return bad("a fixed weight must be at least 1");
                }
            }
        }
        Ok(())
    }
}

/// One fully observed superpopulation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub x: f64,
    pub z: f64,
    pub y: f64,
    pub w: f64,
    pub delta: bool,
    pub r: bool,
}

fn normal(mean: f64, variance: f64) -> Normal<f64> {
    Normal::new(mean, variance.sqrt()).expect("validated variance")
}

/// Draws one unit from the superpopulation.
pub fn draw_unit<R: Rng + ?Sized>(p: &GeneratorParams, rng: &mut R) -> Draw {
    let x = normal(p.x_law.intercept, p.x_law.variance).sample(rng);
    let z = normal(p.z_law.intercept, p.z_law.variance).sample(rng);
    let y = normal(p.y_law.mean(&[x, z]), p.y_law.variance).sample(rng);
    let w = match &p.w_law {
        WeightLaw::LogNormalShift(l) => 1.0 + normal(l.mean(&[x, y, z]), l.variance).sample(rng).exp(),
        WeightLaw::Fixed { value } => *value,
    };
    let delta = rng.random::<f64>() < 1.0 / w;
    let r = delta && rng.random::<f64>() < p.response.prob(x, z, w);
    Draw { x, z, y, w, delta, r }
}

/// Draws the whole population, including the unobservable outcomes.
pub fn draw_population(p: &GeneratorParams) -> Result<Vec<Draw>> {
    p.validate()?;
    let mut rng = substream(p.seed, "generate", 0);
    Ok((0..p.population_size).map(|_| draw_unit(p, &mut rng)).collect())
}

/// Observable Setting 1 data from population draws.
pub fn observe(draws: &[Draw]) -> Result<SurveyDataset> {
    let units = draws
        .iter()
        .map(|d| match (d.delta, d.r) {
            (true, true) => UnitRecord::respondent(vec![d.x], vec![d.z], d.w, d.y),
            (true, false) => UnitRecord::nonrespondent(vec![d.x], vec![d.z], d.w),
            _ => UnitRecord::unsampled(vec![d.x]),
        })
        .collect();
    SurveyDataset::new(units, draws.len(), Setting::Setting1, vec!["x".into()], vec!["z".into()])
}

/// A Setting 1 dataset drawn from the superpopulation.
pub fn generate_population(p: &GeneratorParams) -> Result<SurveyDataset> {
    observe(&draw_population(p)?)
}

/// External summary of `E(X)`: mean and variance of an independent sample of
/// size `n1` from the `x` law. `n1 < 2` yields the true variance and mean.
pub fn draw_external_mean(p: &GeneratorParams, n1: usize, seed: u64, index: u64) -> Result<ExternalSummary> {
    if n1 < 2 {
        return ExternalSummary::scalar(p.x_law.intercept, p.x_law.variance, n1);
    }
    let mut rng = substream(seed, &format!("external-{n1}"), index);
    let law = normal(p.x_law.intercept, p.x_law.variance);
    let xs: Vec<f64> = (0..n1).map(|_| law.sample(&mut rng)).collect();
    let mean = xs.iter().sum::<f64>() / n1 as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n1 - 1) as f64;
    ExternalSummary::scalar(mean, var, n1)
}
