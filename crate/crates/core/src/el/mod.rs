//! Empirical likelihood kernel.
//!
//! [`solve_el_dual`] maximizes `sum log p_i` subject to `sum p_i = 1` and
//! `sum p_i g_i = 0` through the convex dual in the Lagrange multiplier, using
//! a quadratic continuation of the logarithm below `1/m` so that Newton's
//! method is globally defined. The profile, biased-sampling and penalized
//! problems are layered on top of it.

mod biased;
pub mod optim;

pub use biased::{solve_biased_el, solve_penalized_el, BiasedELSolution, TauConstraint};

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

const DUAL_MAX_ITER: usize = 100;
const DUAL_GRAD_TOL: f64 = 1e-12;
const DUAL_DIVERGENCE: f64 = 1e10;

fn infeasible_hull() -> Error {
    Error::Infeasible(
        "constraints infeasible: zero is not inside the convex hull of the constraint rows".into(),
    )
}

/// Maximum empirical likelihood weights for one constraint set.
#[derive(Debug, Clone, Serialize)]
pub struct ELSolution {
    pub p: Vec<f64>,
    pub lambda: Vec<f64>,
    pub log_el: f64,
    pub converged: bool,
    /// Largest `|sum_i p_i G_ij|` over constraint columns.
    pub constraint_residual: f64,
    pub iterations: usize,
    /// Dual objective after each accepted Newton step.
    #[serde(skip)]
    pub dual_trace: Vec<f64>,
}

impl ELSolution {
    pub fn uniform(m: usize, d: usize) -> Self {
        let p = vec![1.0 / m as f64; m];
        ELSolution {
            log_el: -(m as f64) * (m as f64).ln(),
            p,
            lambda: vec![0.0; d],
            converged: true,
            constraint_residual: 0.0,
            iterations: 0,
            dual_trace: Vec::new(),
        }
    }

    pub fn m(&self) -> usize {
        self.p.len()
    }
}

/// Log with quadratic continuation below `eps`; returns value and the first
/// two derivatives.
#[inline]
fn log_star(z: f64, eps: f64) -> (f64, f64, f64) {
    if z >= eps {
        (z.ln(), 1.0 / z, -1.0 / (z * z))
    } else {
        let r = z / eps;
        (eps.ln() - 1.5 + 2.0 * r - 0.5 * r * r, (2.0 - r) / eps, -1.0 / (eps * eps))
    }
}

fn dual_objective(h: &DMatrix<f64>, mu: &DVector<f64>, eps: f64) -> f64 {
    let z = h * mu;
    -z.iter().map(|&zi| log_star(1.0 + zi, eps).0).sum::<f64>()
}

/// Solves the empirical likelihood problem for constraint rows `g` (m × d).
///
/// Columns that are identically zero are vacuous. The problem is reduced to
/// the column span of `g` first, so collinear constraints are allowed.
pub fn solve_el_dual(g: &DMatrix<f64>) -> Result<ELSolution> {
    let m = g.nrows();
    let d = g.ncols();
    if m == 0 {
        return Err(Error::InvalidData("empirical likelihood over zero units".into()));
    }
    let mut active = Vec::new();
    for j in 0..d {
        let col = g.column(j);
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("constraint {j} has non-finite entries")));
        }
        if col.iter().all(|&v| v == 0.0) {
            continue;
        }
        if !(col.min() < 0.0 && col.max() > 0.0) {
            return Err(Error::Infeasible(format!(
                "constraints infeasible: constraint {j} does not straddle zero"
            )));
        }
        active.push(j);
    }
    if active.is_empty() {
        return Ok(ELSolution::uniform(m, d));
    }
    let ga = g.select_columns(&active);
    let svd = ga.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] > 1e-12 * smax)
        .collect();
    let r = keep.len();
    if r >= m {
        return Err(Error::Infeasible(format!(
            "constraints infeasible: {r} independent constraints for {m} units"
        )));
    }
    let sqrt_m = (m as f64).sqrt();
    // orthonormal coordinates scaled so that h^T h = m I
    let h = u.select_columns(&keep) * sqrt_m;
    let eps = 1.0 / m as f64;

    let mut mu = DVector::zeros(r);
    let mut obj = dual_objective(&h, &mu, eps);
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    for it in 0..DUAL_MAX_ITER {
        iterations = it;
        let z = &h * &mu;
        let mut grad = DVector::zeros(r);
        let mut hess = DMatrix::zeros(r, r);
        for i in 0..m {
            let (_, d1, d2) = log_star(1.0 + z[i], eps);
            let hi = h.row(i).transpose();
            grad.axpy(-d1, &hi, 1.0);
            hess.ger(-d2, &hi, &hi, 1.0);
        }
        grad_norm = grad.amax() / m as f64;
        if grad_norm <= DUAL_GRAD_TOL {
            converged = true;
            break;
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&(-&grad)),
            None => {
                return Err(Error::no_convergence("empirical likelihood dual", it, grad_norm));
            }
        };
        let slope = grad.dot(&step);
        if -slope <= 1e-12 * (1.0 + obj.abs()) {
            // predicted decrease is below the resolution of the objective:
            // inside the quadratic region, take the full Newton step
            mu += &step;
            obj = dual_objective(&h, &mu, eps);
            trace.push(obj);
            continue;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &mu + &step * t;
            let oc = dual_objective(&h, &cand, eps);
            if oc <= obj + 1e-4 * t * slope {
                mu = cand;
                obj = oc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::no_convergence("empirical likelihood dual", it, grad_norm));
        }
        if mu.amax() > DUAL_DIVERGENCE {
            // the dual decreases along a recession direction
            return Err(infeasible_hull());
        }
        trace.push(obj);
    }
    if !converged {
        return Err(Error::no_convergence(
            "empirical likelihood dual",
            DUAL_MAX_ITER,
            grad_norm,
        ));
    }
    let z = &h * &mu;
    let zmin = z.iter().fold(f64::INFINITY, |a, &b| a.min(1.0 + b));
    if zmin < eps * (1.0 - 1e-9) {
        return Err(infeasible_hull());
    }
    let mut p: Vec<f64> = z.iter().map(|&zi| 1.0 / (m as f64 * (1.0 + zi))).collect();
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(infeasible_hull());
    }
    p.iter_mut().for_each(|v| *v /= total);

    // lambda in the original coordinates of the active columns
    let mut lambda_active = DVector::zeros(active.len());
    for (c, &k) in keep.iter().enumerate() {
        let coef = sqrt_m * mu[c] / svd.singular_values[k];
        lambda_active.axpy(coef, &vt.row(k).transpose(), 1.0);
    }
    let mut lambda = vec![0.0; d];
    for (a, &j) in active.iter().enumerate() {
        lambda[j] = lambda_active[a];
    }
    let pv = DVector::from_column_slice(&p);
    let constraint_residual = g.tr_mul(&pv).amax();
    let log_el = p.iter().map(|v| v.ln()).sum();
    Ok(ELSolution {
        p,
        lambda,
        log_el,
        converged,
        constraint_residual,
        iterations,
        dual_trace: trace,
    })
}

/// Box constraints for a profile search.
pub type Bounds = [(f64, f64)];

/// Maximizes the inner log empirical likelihood over `theta`.
///
/// Scalar `theta` uses bracketing, golden section and a parabolic step;
/// higher dimensions use Nelder–Mead with restarts. A flat profile returns
/// `theta_init`.
pub fn profile_el<F>(
    builder: F,
    theta_init: &[f64],
    bounds: Option<&Bounds>,
) -> Result<(Vec<f64>, ELSolution)>
where
    F: Fn(&[f64]) -> Result<DMatrix<f64>>,
{
    let inner = |theta: &[f64]| -> Option<f64> {
        if let Some(b) = bounds {
            if theta.iter().zip(b).any(|(t, (lo, hi))| t < lo || t > hi) {
                return None;
            }
        }
        let g = builder(theta).ok()?;
        solve_el_dual(&g).ok().map(|s| s.log_el)
    };
    let theta_hat = match theta_init.len() {
        0 => Vec::new(),
        1 => {
            let t0 = theta_init[0];
            let step = 0.1 * (1.0 + t0.abs());
            let r = optim::maximize_scalar(
                |t| inner(&[t]),
                t0,
                step,
                bounds.map(|b| b[0]),
                1e-12,
            )?;
            vec![r.x]
        }
        _ => {
            let r = optim::nelder_mead(inner, theta_init, 0.1, 1e-13, 500, 3)?;
            r.x
        }
    };
    let g = builder(&theta_hat)?;
    let sol = solve_el_dual(&g)?;
    Ok((theta_hat, sol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn empty_constraints_give_uniform() {
        let s = solve_el_dual(&DMatrix::zeros(5, 0)).unwrap();
        assert_eq!(s.p, vec![0.2; 5]);
        assert!((s.log_el - 5.0 * 0.2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn balanced_rows_have_zero_multiplier() {
        let s = solve_el_dual(&col(&[-1.0, 1.0])).unwrap();
        assert!(s.lambda[0].abs() < 1e-14);
        assert!((s.p[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn three_point_instance() {
        let s = solve_el_dual(&col(&[-1.0, 0.0, 2.0])).unwrap();
        assert!((s.lambda[0] - 0.25).abs() < 1e-10);
        let want = [4.0 / 9.0, 1.0 / 3.0, 2.0 / 9.0];
        for i in 0..3 {
            assert!((s.p[i] - want[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn one_sided_column_is_infeasible() {
        let err = solve_el_dual(&col(&[1.0, 2.0, 0.5])).unwrap_err();
        assert!(matches!(err, Error::Infeasible(ref m) if m.contains("constraint 0")));
    }

    #[test]
    fn hull_violation_detected_after_newton() {
        // each column straddles zero but no positive weights balance both
        let g = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, -1.0, 2.0, 2.0, -1.0]);
        assert!(matches!(solve_el_dual(&g), Err(Error::Infeasible(_))));
    }

    #[test]
    fn duplicated_column_is_handled() {
        let g = DMatrix::from_row_slice(3, 2, &[-1.0, -2.0, 0.0, 0.0, 2.0, 4.0]);
        let s = solve_el_dual(&g).unwrap();
        assert!((s.p[0] - 4.0 / 9.0).abs() < 1e-10);
        assert!(s.constraint_residual < 1e-12);
    }

    #[test]
    fn profile_flat_builder_keeps_init() {
        let (t, s) = profile_el(|_| Ok(col(&[-1.0, 0.0, 2.0])), &[0.7], None).unwrap();
        assert_eq!(t, vec![0.7]);
        assert!((s.p[0] - 4.0 / 9.0).abs() < 1e-10);
    }

    #[test]
    fn profile_of_mean_constraint_is_sample_mean() {
        let y = [0.3, 1.2, -0.5, 2.2, 0.9, 1.4];
        let mean = y.iter().sum::<f64>() / 6.0;
        let (t, s) = profile_el(|th| Ok(col(&y.map(|v| v - th[0]))), &[0.0], None).unwrap();
        assert!((t[0] - mean).abs() < 1e-6, "{} vs {mean}", t[0]);
        assert!(s.lambda[0].abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn invariants_on_random_instances(
            rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), 8..30),
            shift in -0.3f64..0.3,
        ) {
            let m = rows.len();
            let mut g = DMatrix::from_fn(m, 2, |i, j| rows[i][j]);
            // centering makes the problem feasible
            for j in 0..2 {
                let c = g.column(j).mean() + shift * (j as f64);
                g.column_mut(j).add_scalar_mut(-c);
            }
            if let Ok(s) = solve_el_dual(&g) {
                prop_assert!((s.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(s.p.iter().all(|&v| v > 0.0));
                prop_assert!(s.constraint_residual < 1e-8);
                prop_assert!(s.log_el <= m as f64 * (1.0 / m as f64).ln() + 1e-12);
                for i in 0..m {
                    let z = 1.0 + s.lambda[0] * g[(i, 0)] + s.lambda[1] * g[(i, 1)];
                    prop_assert!((s.p[i] - 1.0 / (m as f64 * z)).abs() < 1e-10);
                }
                prop_assert!(s.dual_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));

                // row permutation
                let perm: Vec<usize> = (0..m).rev().collect();
                let gp = DMatrix::from_fn(m, 2, |i, j| g[(perm[i], j)]);
                let sp = solve_el_dual(&gp).unwrap();
                for i in 0..m {
                    prop_assert!((sp.p[i] - s.p[perm[i]]).abs() < 1e-10);
                }

                // right multiplication by an invertible matrix
                let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -0.5, 1.5]);
                let sa = solve_el_dual(&(&g * &a)).unwrap();
                for i in 0..m {
                    prop_assert!((sa.p[i] - s.p[i]).abs() < 1e-9);
                }
                let back = &a * DVector::from_column_slice(&sa.lambda);
                for j in 0..2 {
                    prop_assert!((back[j] - s.lambda[j]).abs() < 1e-7 * (1.0 + s.lambda[j].abs()));
                }
            }
        }
    }
}
