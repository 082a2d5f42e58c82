//! Monte Carlo evaluation of the semiparametric efficiency bound for the
//! population mean under the linear-Gaussian generator.
//!
//! All nuisance functions are available in closed form because `(Y, log(W-1))`
//! is jointly Gaussian given `x` (or given `x, z`): exponential tilting by
//! `W - 1 = exp(log(W - 1))` shifts a Gaussian mean by the covariance with
//! `log(W - 1)`.

use super::{draw_unit, GeneratorParams, WeightLaw};
use crate::error::{Error, Result};
use crate::estimand::Estimand;
use crate::rng::substream;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Minimum number of draws accepted.
pub const MIN_BOUND_DRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "setting", rename_all = "kebab-case")]
pub enum BoundSetting {
    Setting1,
    Setting2,
    /// External estimate of `E(X)` with per-observation variance `sigma1`
    /// and size ratio `rho = N1 / N`.
    Setting3 { sigma1: f64, rho: f64 },
}

/// Closed-form truths of the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub theta: f64,
    pub mean_x: f64,
    /// `kappa(x) = kappa0 + kappa1 x`
    pub kappa: (f64, f64),
    /// Constant `C` of Setting 2 (for `U = y - theta`, plus `theta`).
    pub c_constant: f64,
    /// `E{(W - 1)(X - tau)} / E(W - 1)` at the true `tau`.
    pub c_star_tau: f64,
    p: GeneratorParams,
}

impl Truth {
    pub fn new(p: &GeneratorParams) -> Result<Self> {
        p.validate()?;
        let (mx, vx) = (p.x_law.intercept, p.x_law.variance);
        let (mz, vz) = (p.z_law.intercept, p.z_law.variance);
        let (b0, bx, bz, vy) = (p.y_law.intercept, p.y_law.coef[0], p.y_law.coef[1], p.y_law.variance);
        let theta = b0 + bx * mx + bz * mz;
        let var_y_x = bz * bz * vz + vy;
        let var_y = bx * bx * vx + var_y_x;
        let (cov_yl_x, cov_yl, cov_xl) = match &p.w_law {
            WeightLaw::LogNormalShift(l) => {
                let (ax, ay, az) = (l.coef[0], l.coef[1], l.coef[2]);
                (
                    ay * var_y_x + az * bz * vz,
                    ax * bx * vx + ay * var_y + az * bz * vz,
                    ax * vx + ay * bx * vx,
                )
            }
            WeightLaw::Fixed { .. } => (0.0, 0.0, 0.0),
        };
        Ok(Truth {
            theta,
            mean_x: mx,
            kappa: (b0 + bz * mz + cov_yl_x, bx),
            c_constant: theta + cov_yl,
            c_star_tau: cov_xl,
            p: p.clone(),
        })
    }

    /// `E(Y | x, z, w)`
    pub fn outcome_mean(&self, x: f64, z: f64, w: f64) -> f64 {
        let y = &self.p.y_law;
        let prior = y.intercept + y.coef[0] * x + y.coef[1] * z;
        match &self.p.w_law {
            WeightLaw::LogNormalShift(l) => {
                let ay = l.coef[1];
                let denom = ay * ay * y.variance + l.variance;
                if denom == 0.0 {
                    return prior;
                }
                let gain = ay * y.variance / denom;
                let resid = (w - 1.0).ln() - l.intercept - l.coef[0] * x - l.coef[2] * z - ay * prior;
                prior + gain * resid
            }
            WeightLaw::Fixed { .. } => prior,
        }
    }

    pub fn kappa_at(&self, x: f64) -> f64 {
        self.kappa.0 + self.kappa.1 * x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundEstimate {
    /// Bound on `N Var(theta_hat)`.
    pub bound: DMatrix<f64>,
    /// Delta-method Monte Carlo standard error of `bound`.
    pub std_error: f64,
    pub draws: usize,
}

/// Efficiency bound for `E(Y)` by Monte Carlo over `m` superpopulation draws.
pub fn estimate_efficiency_bound(
    p: &GeneratorParams,
    e: &Estimand,
    setting: BoundSetting,
    m: usize,
    seed: u64,
) -> Result<BoundEstimate> {
    if !e.is_mean() {
        return Err(Error::Config("efficiency bounds are implemented for the population mean only".into()));
    }
    if m < MIN_BOUND_DRAWS {
        return Err(Error::Config(format!(
            "efficiency bound needs at least {MIN_BOUND_DRAWS} draws, got {m}"
        )));
    }
    if let BoundSetting::Setting3 { sigma1, rho } = setting {
        if !(sigma1 > 0.0 && rho >= 0.0) {
            return Err(Error::Config("Setting 3 bound needs sigma1 > 0 and rho >= 0".into()));
        }
    }
    let t = Truth::new(p)?;
    let mut rng = substream(seed, "bound", 0);
    let mut terms = Vec::with_capacity(m);
    for _ in 0..m {
        let d = draw_unit(p, &mut rng);
        let c = match setting {
            BoundSetting::Setting1 => t.kappa_at(d.x) - t.theta,
            _ => t.c_constant - t.theta,
        };
        let dw = if d.delta { d.w } else { 0.0 };
        let s = if d.delta {
            let pi = p.response.prob(d.x, d.z, d.w);
            let g = t.outcome_mean(d.x, d.z, d.w) - t.theta;
            let r = if d.r { 1.0 } else { 0.0 };
            dw * (r * (d.y - t.theta) / pi + (1.0 - r / pi) * g) + (1.0 - dw) * c
        } else {
            c
        };
        let eta = if d.delta { dw * (d.x - t.mean_x) + (1.0 - dw) * t.c_star_tau } else { t.c_star_tau };
        terms.push((s * s, s * eta, eta * eta));
    }
    let mf = m as f64;
    let (a, b, dd) = terms
        .iter()
        .fold((0.0, 0.0, 0.0), |acc, v| (acc.0 + v.0 / mf, acc.1 + v.1 / mf, acc.2 + v.2 / mf));
    let (bound, grad) = match setting {
        BoundSetting::Setting3 { sigma1, rho } if rho > 0.0 => {
            let den = sigma1 / rho + dd;
            (a - b * b / den, (1.0, -2.0 * b / den, b * b / (den * den)))
        }
        _ => (a, (1.0, 0.0, 0.0)),
    };
    let h: Vec<f64> = terms.iter().map(|v| grad.0 * v.0 + grad.1 * v.1 + grad.2 * v.2).collect();
    let hm = h.iter().sum::<f64>() / mf;
    let sd = (h.iter().map(|v| (v - hm).powi(2)).sum::<f64>() / (mf - 1.0)).sqrt();
    Ok(BoundEstimate {
        bound: DMatrix::from_element(1, 1, bound),
        std_error: sd / mf.sqrt(),
        draws: m,
    })
}
