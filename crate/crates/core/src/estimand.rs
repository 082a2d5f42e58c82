//! Target parameters defined through an estimating function `U_theta(x, y)`.
//!
//! The parameter is the root of `E{U_theta(X, Y)} = 0`. Every estimator in
//! [`crate::estimators`] reduces to a weighted sum of `U_theta` terms, solved
//! by [`solve_weighted_estimating_equation`].

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::fmt;
use std::sync::Arc;

/// Inverse link of a regression mean function `mu(x; theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Logistic,
}

type UFn = dyn Fn(&[f64], &[f64], f64) -> Vec<f64> + Send + Sync;
type JacFn = dyn Fn(&[f64], &[f64], f64) -> DMatrix<f64> + Send + Sync;

#[derive(Clone)]
pub enum EstimandKind {
    /// `U = y - theta`
    PopulationMean,
    /// `U = A(x) {y - mu(x; theta)}` with `A(x) = (1, x)`, the gradient basis
    /// of the linear predictor.
    Regression { link: Link },
    Custom { u: Arc<UFn>, du: Arc<JacFn> },
}

impl fmt::Debug for EstimandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimandKind::PopulationMean => write!(f, "PopulationMean"),
            EstimandKind::Regression { link } => write!(f, "Regression({link:?})"),
            EstimandKind::Custom { .. } => write!(f, "Custom"),
        }
    }
}

/// Estimating function, its dimension and its theta-Jacobian.
///
/// Built-in estimands are affine in `y`, so conditional expectations such as
/// `E{U_theta(x, Y) | x, z, w}` are obtained by plugging in a predicted
/// outcome. Custom estimands are assumed to share this property when used
/// with the outcome-regression and C-function working models.
#[derive(Clone, Debug)]
pub struct Estimand {
    kind: EstimandKind,
    q: usize,
}

impl Estimand {
    pub fn mean() -> Self {
        Estimand {
            kind: EstimandKind::PopulationMean,
            q: 1,
        }
    }

    /// Linear regression of `y` on `(1, x)` with `p` covariates.
    pub fn linear_regression(p: usize) -> Self {
        Estimand {
            kind: EstimandKind::Regression { link: Link::Identity },
            q: p + 1,
        }
    }

    /// Logistic regression score for a binary `y` on `(1, x)`.
    pub fn logistic_regression(p: usize) -> Self {
        Estimand {
            kind: EstimandKind::Regression { link: Link::Logistic },
            q: p + 1,
        }
    }

    pub fn custom(
        q: usize,
        u: impl Fn(&[f64], &[f64], f64) -> Vec<f64> + Send + Sync + 'static,
        du: impl Fn(&[f64], &[f64], f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Estimand {
            kind: EstimandKind::Custom {
                u: Arc::new(u),
                du: Arc::new(du),
            },
            q,
        }
    }

    /// Looks up a built-in estimand by its configuration name.
    pub fn by_name(name: &str, n_covariates: usize) -> Result<Self> {
        match name {
            "mean" => Ok(Estimand::mean()),
            "linear-regression" => Ok(Estimand::linear_regression(n_covariates)),
            "logistic-regression" => Ok(Estimand::logistic_regression(n_covariates)),
            other => Err(Error::Config(format!(
                "unknown estimand `{other}` (expected mean, linear-regression or logistic-regression)"
            ))),
        }
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn kind(&self) -> &EstimandKind {
        &self.kind
    }

    pub fn is_mean(&self) -> bool {
        matches!(self.kind, EstimandKind::PopulationMean)
    }

    fn check(&self, theta: &[f64], x: &[f64]) -> Result<()> {
        if theta.len() != self.q {
            return Err(Error::DimensionMismatch {
                expected: self.q,
                found: theta.len(),
                context: "theta".into(),
            });
        }
        if let EstimandKind::Regression { .. } = self.kind {
            if x.len() + 1 != self.q {
                return Err(Error::DimensionMismatch {
                    expected: self.q - 1,
                    found: x.len(),
                    context: "regression covariates".into(),
                });
            }
        }
        Ok(())
    }

    /// `U_theta(x, y)`
    pub fn u_value(&self, theta: &[f64], x: &[f64], y: f64) -> Result<Vec<f64>> {
        self.check(theta, x)?;
        let mut out = vec![0.0; self.q];
        self.u_into(theta, x, y, &mut out);
        Ok(out)
    }

    /// Unchecked evaluation into a caller-provided buffer of length `q`.
    pub(crate) fn u_into(&self, theta: &[f64], x: &[f64], y: f64, out: &mut [f64]) {
        match &self.kind {
            EstimandKind::PopulationMean => out[0] = y - theta[0],
            EstimandKind::Regression { link } => {
                let resid = y - mean_function(*link, theta, x);
                out[0] = resid;
                for (o, xj) in out[1..].iter_mut().zip(x) {
                    *o = xj * resid;
                }
            }
            EstimandKind::Custom { u, .. } => out.copy_from_slice(&u(theta, x, y)),
        }
    }

    /// `dU_theta(x, y) / dtheta'`, a `q x q` matrix.
    pub fn du_dtheta(&self, theta: &[f64], x: &[f64], y: f64) -> Result<DMatrix<f64>> {
        self.check(theta, x)?;
        Ok(self.jacobian_unchecked(theta, x, y))
    }

    pub(crate) fn jacobian_unchecked(&self, theta: &[f64], x: &[f64], y: f64) -> DMatrix<f64> {
        match &self.kind {
            EstimandKind::PopulationMean => DMatrix::from_element(1, 1, -1.0),
            EstimandKind::Regression { link } => {
                let slope = match link {
                    Link::Identity => 1.0,
                    Link::Logistic => {
                        let mu = mean_function(*link, theta, x);
                        mu * (1.0 - mu)
                    }
                };
                let a = design_row(x);
                -(&a * a.transpose()) * slope
            }
            EstimandKind::Custom { du, .. } => du(theta, x, y),
        }
    }
}

fn design_row(x: &[f64]) -> DVector<f64> {
    DVector::from_iterator(x.len() + 1, std::iter::once(1.0).chain(x.iter().copied()))
}

fn mean_function(link: Link, theta: &[f64], x: &[f64]) -> f64 {
    let eta = theta[0] + theta[1..].iter().zip(x).map(|(t, xj)| t * xj).sum::<f64>();
    match link {
        Link::Identity => eta,
        Link::Logistic => crate::models::expit(eta),
    }
}

/// One weighted summand `weight * U_theta(x, y)`.
#[derive(Debug, Clone, Copy)]
pub struct EqTerm<'a> {
    pub weight: f64,
    pub x: &'a [f64],
    pub y: f64,
}

impl<'a> EqTerm<'a> {
    pub fn new(weight: f64, x: &'a [f64], y: f64) -> Self {
        EqTerm { weight, x, y }
    }
}

/// Constant added to a weighted estimating equation, as a function of theta.
pub type Offset<'a> = &'a dyn Fn(&[f64]) -> Vec<f64>;

const RESIDUAL_TOL: f64 = 1e-10;
const MAX_NEWTON: usize = 200;
const MAX_HALVINGS: usize = 30;

/// Evaluates `sum_i w_i U_theta(x_i, y_i) + offset(theta)`.
pub fn equation_value(
    e: &Estimand,
    terms: &[EqTerm<'_>],
    offset: Option<Offset<'_>>,
    theta: &[f64],
) -> Vec<f64> {
    let q = e.q();
    let mut total = vec![0.0; q];
    let mut buf = vec![0.0; q];
    for t in terms {
        if t.weight == 0.0 {
            continue;
        }
        e.u_into(theta, t.x, t.y, &mut buf);
        for (acc, b) in total.iter_mut().zip(&buf) {
            *acc += t.weight * b;
        }
    }
    if let Some(off) = offset {
        for (acc, o) in total.iter_mut().zip(off(theta)) {
            *acc += o;
        }
    }
    total
}

fn residual_scale(e: &Estimand, terms: &[EqTerm<'_>], theta: &[f64]) -> f64 {
    let mut buf = vec![0.0; e.q()];
    let mut scale = 0.0;
    for t in terms {
        e.u_into(theta, t.x, t.y, &mut buf);
        let unorm = buf.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
        scale += t.weight.abs() * (1.0 + unorm);
    }
    scale.max(1.0)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |a, b| a.max(b.abs()))
}

/// Solves `sum_i w_i U_theta(x_i, y_i) + offset(theta) = 0` for theta.
///
/// The population mean without offset has the closed form
/// `sum w_i y_i / sum w_i`. Otherwise damped Newton iterations are used,
/// halving the step up to 30 times whenever the residual norm grows. The
/// offset's Jacobian is approximated by central differences. Convergence
/// requires the residual to fall below `1e-10` relative to the summed
/// magnitude of the terms.
pub fn solve_weighted_estimating_equation(
    e: &Estimand,
    terms: &[EqTerm<'_>],
    offset: Option<Offset<'_>>,
    theta_init: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let q = e.q();
    if let Some(t) = terms.iter().find(|t| {
        matches!(e.kind, EstimandKind::Regression { .. }) && t.x.len() + 1 != q
    }) {
        return Err(Error::DimensionMismatch {
            expected: q - 1,
            found: t.x.len(),
            context: "regression covariates in estimating equation".into(),
        });
    }
    if e.is_mean() && offset.is_none() {
        let (num, den) = terms
            .iter()
            .fold((0.0, 0.0), |(n, d), t| (n + t.weight * t.y, d + t.weight));
        let theta = num / den;
        if den == 0.0 || !theta.is_finite() {
            return Err(Error::NonIdentifiable(
                "weights of the estimating equation sum to zero".into(),
            ));
        }
        return Ok(vec![theta]);
    }

    let mut theta: Vec<f64> = match theta_init {
        Some(t) if t.len() == q => t.to_vec(),
        Some(t) => {
            return Err(Error::DimensionMismatch {
                expected: q,
                found: t.len(),
                context: "initial theta".into(),
            })
        }
        None => vec![0.0; q],
    };
    let mut f = equation_value(e, terms, offset, &theta);
    let mut fnorm = inf_norm(&f);
    for iter in 0..MAX_NEWTON {
        let scale = residual_scale(e, terms, &theta);
        if fnorm <= RESIDUAL_TOL * scale {
            return Ok(theta);
        }
        let jac = equation_jacobian(e, terms, offset, &theta);
        let step = jac
            .lu()
            .solve(&DVector::from_column_slice(&f))
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or_else(|| {
                Error::NonIdentifiable("singular Jacobian in estimating equation".into())
            })?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
            let fc = equation_value(e, terms, offset, &cand);
            let nc = inf_norm(&fc);
            if nc.is_finite() && nc <= fnorm {
                theta = cand;
                f = fc;
                fnorm = nc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            let scale = residual_scale(e, terms, &theta);
            if fnorm <= RESIDUAL_TOL * scale * 1e3 {
                // already at the floating point floor
                return Ok(theta);
            }
            return Err(Error::no_convergence("estimating equation", iter + 1, fnorm));
        }
    }
    let scale = residual_scale(e, terms, &theta);
    if fnorm <= RESIDUAL_TOL * scale {
        Ok(theta)
    } else {
        Err(Error::no_convergence("estimating equation", MAX_NEWTON, fnorm))
    }
}

fn equation_jacobian(
    e: &Estimand,
    terms: &[EqTerm<'_>],
    offset: Option<Offset<'_>>,
    theta: &[f64],
) -> DMatrix<f64> {
    let q = e.q();
    let mut jac = DMatrix::zeros(q, q);
    if e.is_mean() {
        let wsum: f64 = terms.iter().map(|t| t.weight).sum();
        jac[(0, 0)] = -wsum;
    } else {
        for t in terms {
            if t.weight != 0.0 {
                jac += e.jacobian_unchecked(theta, t.x, t.y) * t.weight;
            }
        }
    }
    if let Some(off) = offset {
        let mut tp = theta.to_vec();
        for j in 0..q {
            let h = 1e-6 * (1.0 + theta[j].abs());
            tp[j] = theta[j] + h;
            let fp = off(&tp);
            tp[j] = theta[j] - h;
            let fm = off(&tp);
            tp[j] = theta[j];
            for i in 0..q {
                jac[(i, j)] += (fp[i] - fm[i]) / (2.0 * h);
            }
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_u_values() {
        let e = Estimand::mean();
        assert_eq!(e.u_value(&[2.0], &[], 5.0).unwrap(), vec![3.0]);
        assert_eq!(e.u_value(&[0.0], &[], 0.0).unwrap(), vec![0.0]);
        assert!(e.u_value(&[0.0, 1.0], &[], 0.0).is_err());
    }

    #[test]
    fn regression_u_value() {
        let e = Estimand::linear_regression(1);
        assert_eq!(e.u_value(&[0.0, 1.0], &[2.0], 5.0).unwrap(), vec![3.0, 6.0]);
        assert!(e.u_value(&[0.0, 1.0], &[2.0, 3.0], 5.0).is_err());
    }

    #[test]
    fn weighted_mean_closed_form() {
        let e = Estimand::mean();
        let terms = [EqTerm::new(4.0, &[], 1.0), EqTerm::new(3.0, &[], 2.0)];
        let theta = solve_weighted_estimating_equation(&e, &terms, None, None).unwrap();
        assert!((theta[0] - 10.0 / 7.0).abs() < 1e-15);
        let resid = equation_value(&e, &terms, None, &theta);
        assert!(resid[0].abs() < 1e-12);
        let one = [EqTerm::new(1.0, &[], 7.0)];
        assert_eq!(solve_weighted_estimating_equation(&e, &one, None, None).unwrap(), vec![7.0]);
    }

    #[test]
    fn zero_total_weight_is_non_identifiable() {
        let e = Estimand::mean();
        let terms = [EqTerm::new(1.0, &[], 1.0), EqTerm::new(-1.0, &[], 2.0)];
        assert!(matches!(
            solve_weighted_estimating_equation(&e, &terms, None, None),
            Err(Error::NonIdentifiable(_))
        ));
    }

    #[test]
    fn regression_matches_normal_equations() {
        let xs = [[0.5, -1.0], [1.5, 0.3], [-0.7, 2.0], [2.2, 1.1], [0.1, -0.4], [1.0, 1.0]];
        let ys = [1.0, 2.5, -0.3, 3.1, 0.2, 1.7];
        let e = Estimand::linear_regression(2);
        let terms: Vec<EqTerm> = xs.iter().zip(ys).map(|(x, y)| EqTerm::new(1.0, x, y)).collect();
        let theta = solve_weighted_estimating_equation(&e, &terms, None, None).unwrap();
        // normal equations oracle
        let a = DMatrix::from_fn(6, 3, |i, j| if j == 0 { 1.0 } else { xs[i][j - 1] });
        let b = DVector::from_column_slice(&ys);
        let beta = (a.transpose() * &a).lu().solve(&(a.transpose() * b)).unwrap();
        for j in 0..3 {
            assert!((theta[j] - beta[j]).abs() < 1e-10, "{theta:?} vs {beta}");
        }
    }

    #[test]
    fn logistic_regression_converges() {
        let xs = [[-1.0], [-0.5], [0.0], [0.5], [1.0], [1.5], [-1.5], [0.2]];
        let ys = [0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let e = Estimand::logistic_regression(1);
        let terms: Vec<EqTerm> = xs.iter().zip(ys).map(|(x, y)| EqTerm::new(1.0, x, y)).collect();
        let theta = solve_weighted_estimating_equation(&e, &terms, None, None).unwrap();
        let r = equation_value(&e, &terms, None, &theta);
        assert!(inf_norm(&r) < 1e-9);
    }

    #[test]
    fn offset_is_honoured() {
        let e = Estimand::mean();
        let terms = [EqTerm::new(1.0, &[], 1.0), EqTerm::new(1.0, &[], 3.0)];
        let off = |t: &[f64]| vec![4.0 - 2.0 * t[0]];
        let theta = solve_weighted_estimating_equation(&e, &terms, Some(&off), None).unwrap();
        // 1 + 3 - 2t + 4 - 2t = 0
        assert!((theta[0] - 2.0).abs() < 1e-10);
    }

    fn fd_jacobian(e: &Estimand, theta: &[f64], x: &[f64], y: f64) -> DMatrix<f64> {
        let q = e.q();
        let mut jac = DMatrix::zeros(q, q);
        for j in 0..q {
            let h = 1e-6 * (1.0 + theta[j].abs());
            let mut tp = theta.to_vec();
            tp[j] += h;
            let up = e.u_value(&tp, x, y).unwrap();
            tp[j] -= 2.0 * h;
            let um = e.u_value(&tp, x, y).unwrap();
            for i in 0..q {
                jac[(i, j)] = (up[i] - um[i]) / (2.0 * h);
            }
        }
        jac
    }

    proptest! {
        #[test]
        fn jacobian_matches_central_differences(
            t0 in -2.0..2.0f64, t1 in -2.0..2.0f64, t2 in -2.0..2.0f64,
            x0 in -2.0..2.0f64, x1 in -2.0..2.0f64, y in -3.0..3.0f64,
        ) {
            for e in [Estimand::linear_regression(2), Estimand::logistic_regression(2)] {
                let theta = [t0, t1, t2];
                let x = [x0, x1];
                let an = e.du_dtheta(&theta, &x, y).unwrap();
                let fd = fd_jacobian(&e, &theta, &x, y);
                let scale = an.amax().max(1e-3);
                prop_assert!((an - fd).amax() <= 1e-6 * scale);
            }
        }

        #[test]
        fn mean_u_is_affine_with_unit_negative_slope(t in -10.0..10.0f64, d in -5.0..5.0f64, y in -10.0..10.0f64) {
            let e = Estimand::mean();
            let a = e.u_value(&[t], &[], y).unwrap()[0];
            let b = e.u_value(&[t + d], &[], y).unwrap()[0];
            prop_assert!(((b - a) + d).abs() < 1e-12);
        }

        #[test]
        fn root_invariant_to_weight_rescaling(
            ws in proptest::collection::vec(0.1..5.0f64, 3..8),
            c in 0.01..100.0f64,
        ) {
            let xs: Vec<[f64; 1]> = (0..ws.len()).map(|i| [i as f64 * 0.3 - 0.5]).collect();
            let ys: Vec<f64> = (0..ws.len()).map(|i| (i as f64).sin() + xs[i][0]).collect();
            let e = Estimand::linear_regression(1);
            let t1: Vec<EqTerm> = ws.iter().enumerate().map(|(i, &w)| EqTerm::new(w, &xs[i], ys[i])).collect();
            let t2: Vec<EqTerm> = ws.iter().enumerate().map(|(i, &w)| EqTerm::new(c * w, &xs[i], ys[i])).collect();
            let a = solve_weighted_estimating_equation(&e, &t1, None, None).unwrap();
            let b = solve_weighted_estimating_equation(&e, &t2, None, None).unwrap();
            for j in 0..2 {
                prop_assert!((a[j] - b[j]).abs() < 1e-9 * (1.0 + a[j].abs()));
            }
            let em = Estimand::mean();
            let a = solve_weighted_estimating_equation(&em, &t1, None, None).unwrap();
            let b = solve_weighted_estimating_equation(&em, &t2, None, None).unwrap();
            prop_assert!((a[0] - b[0]).abs() < 1e-12 * (1.0 + a[0].abs()));
        }
    }
}
