//! External summary types and the internal score rows `D*_tau` they induce.

use crate::data::SurveyDataset;
use crate::error::{Error, Result};
use crate::models::Var;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// What the external source reports about `(x, z)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum SummarySpec {
    /// Means of the listed variables: `D*_tau = v - tau`.
    Mean { vars: Vec<String> },
    /// Least-squares coefficients of `response` on an intercept and
    /// `covariates`: `D*_tau = a (r - a' tau)` with `a = (1, covariates)`.
    Regression {
        response: String,
        covariates: Vec<String>,
    },
    /// Gaussian linear model for `response` given `covariates`; `tau` is the
    /// coefficient vector followed by the residual variance.
    GaussianConditional {
        response: String,
        covariates: Vec<String>,
    },
}

impl SummarySpec {
    pub fn mean_of(var: &str) -> Self {
        SummarySpec::Mean {
            vars: vec![var.to_string()],
        }
    }

    /// Dimension of `tau`.
    pub fn dim(&self) -> usize {
        match self {
            SummarySpec::Mean { vars } => vars.len(),
            SummarySpec::Regression { covariates, .. } => covariates.len() + 1,
            SummarySpec::GaussianConditional { covariates, .. } => covariates.len() + 2,
        }
    }

    /// Evaluates the summary variables on the sampled units of `data`.
    pub fn bind(&self, data: &SurveyDataset) -> Result<BoundSummary> {
        let vals = |names: &[String]| -> Result<DMatrix<f64>> {
            let vars = names
                .iter()
                .map(|n| Var::resolve(n, data))
                .collect::<Result<Vec<_>>>()?;
            let s = data.sampled();
            let mut out = DMatrix::zeros(s.len(), vars.len());
            for (i, u) in s.iter().enumerate() {
                for (j, v) in vars.iter().enumerate() {
                    out[(i, j)] = v.value(u, i + 1)?;
                }
            }
            Ok(out)
        };
        let (kind, response, design) = match self {
            SummarySpec::Mean { vars } => {
                if vars.is_empty() {
                    return Err(Error::Config("mean summary needs at least one variable".into()));
                }
                (Kind::Mean, vals(vars)?, DMatrix::zeros(0, 0))
            }
            SummarySpec::Regression { response, covariates }
            | SummarySpec::GaussianConditional { response, covariates } => {
                let r = vals(std::slice::from_ref(response))?;
                let c = vals(covariates)?;
                let n = r.nrows();
                let a = DMatrix::from_fn(n, c.ncols() + 1, |i, j| if j == 0 { 1.0 } else { c[(i, j - 1)] });
                let kind = if matches!(self, SummarySpec::Regression { .. }) {
                    Kind::Regression
                } else {
                    Kind::Gaussian
                };
                (kind, r, a)
            }
        };
        Ok(BoundSummary {
            kind,
            response,
            design,
            weights: data.sampled().iter().map(|u| u.weight()).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Mean,
    Regression,
    Gaussian,
}

/// A [`SummarySpec`] evaluated on one dataset.
#[derive(Debug, Clone)]
pub struct BoundSummary {
    kind: Kind,
    /// n × vars for means, n × 1 otherwise.
    response: DMatrix<f64>,
    /// n × (1 + covariates); empty for means.
    design: DMatrix<f64>,
    weights: Vec<f64>,
}

impl BoundSummary {
    /// `D*_tau` evaluated on every sampled unit (n × dim).
    pub fn rows(&self, tau: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.response.nrows();
        match self.kind {
            Kind::Mean => {
                let k = self.response.ncols();
                check_dim(tau, k)?;
                Ok(DMatrix::from_fn(n, k, |i, j| self.response[(i, j)] - tau[j]))
            }
            Kind::Regression | Kind::Gaussian => {
                let p = self.design.ncols();
                let gaussian = self.kind == Kind::Gaussian;
                check_dim(tau, p + gaussian as usize)?;
                let beta = DVector::from_column_slice(&tau[..p]);
                let fitted = &self.design * beta;
                Ok(DMatrix::from_fn(n, p + gaussian as usize, |i, j| {
                    let e = self.response[(i, 0)] - fitted[i];
                    if j < p {
                        self.design[(i, j)] * e
                    } else {
                        e * e - tau[p]
                    }
                }))
            }
        }
    }

    /// Design-weighted estimate used to start the profile search.
    pub fn tau_init(&self) -> Result<Vec<f64>> {
        let w = &self.weights;
        let sw: f64 = w.iter().sum();
        match self.kind {
            Kind::Mean => Ok((0..self.response.ncols())
                .map(|j| self.response.column(j).iter().zip(w).map(|(v, w)| v * w).sum::<f64>() / sw)
                .collect()),
            Kind::Regression | Kind::Gaussian => {
                let p = self.design.ncols();
                let mut xtx = DMatrix::zeros(p, p);
                let mut xty = DVector::zeros(p);
                for i in 0..self.design.nrows() {
                    let a = self.design.row(i).transpose();
                    xtx += w[i] * &a * a.transpose();
                    xty += w[i] * self.response[(i, 0)] * &a;
                }
                let beta = xtx
                    .cholesky()
                    .ok_or(Error::RankDeficient {
                        column: "external summary covariates".into(),
                    })?
                    .solve(&xty);
                let mut tau: Vec<f64> = beta.iter().copied().collect();
                if self.kind == Kind::Gaussian {
                    let fitted = &self.design * &beta;
                    let s2 = (0..fitted.len())
                        .map(|i| w[i] * (self.response[(i, 0)] - fitted[i]).powi(2))
                        .sum::<f64>()
                        / sw;
                    tau.push(s2);
                }
                Ok(tau)
            }
        }
    }
}

fn check_dim(tau: &[f64], expected: usize) -> Result<()> {
    if tau.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: tau.len(),
            context: "external summary parameter".into(),
        });
    }
    Ok(())
}
