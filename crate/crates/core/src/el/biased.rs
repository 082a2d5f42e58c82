//! Biased-sampling empirical likelihood over the sampled units.
//!
//! Maximizes `sum log p_i + (N - n) log(1 - V)` subject to `sum p_i = 1` and
//! `sum p_i (1/w_i - V) = 0`, optionally with further constraints
//! `sum p_i d_i(tau) = 0` whose parameter `tau` is profiled out, and
//! optionally with a quadratic penalty pulling `tau` towards an external
//! estimate.

use super::optim::{brent_root, golden_section, maximize_scalar, nelder_mead};
use super::{solve_el_dual, ELSolution};
use crate::data::ExternalSummary;
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::Serialize;

/// Extra constraint rows `d_i(tau)` (n × k) and a starting value for `tau`.
pub struct TauConstraint<'a> {
    pub rows: &'a (dyn Fn(&[f64]) -> Result<DMatrix<f64>> + Sync),
    pub tau_init: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BiasedELSolution {
    pub p: Vec<f64>,
    pub v: f64,
    /// Multipliers; the first belongs to the `1/w - V` constraint.
    pub lambda: Vec<f64>,
    /// `sum log p_i + (N - n) log(1 - V)`.
    pub log_el: f64,
    /// `log_el` minus the external penalty, the quantity actually maximized.
    pub objective: f64,
    pub tau: Option<Vec<f64>>,
    pub converged: bool,
    pub constraint_residual: f64,
    /// Number of inner dual solves.
    pub evaluations: usize,
}

struct VFit {
    sol: ELSolution,
    v: f64,
    log_el: f64,
    evaluations: usize,
}

fn biased_log_el(sol: &ELSolution, v: f64, k: f64) -> f64 {
    if k == 0.0 {
        sol.log_el
    } else {
        sol.log_el + k * (1.0 - v).ln()
    }
}

fn design(inv_w: &[f64], v: f64, extra: Option<&DMatrix<f64>>, vacuous: bool) -> DMatrix<f64> {
    let n = inv_w.len();
    let k = extra.map_or(0, |e| e.ncols());
    DMatrix::from_fn(n, 1 + k, |i, j| {
        if j == 0 {
            if vacuous {
                0.0
            } else {
                inv_w[i] - v
            }
        } else {
            extra.expect("extra")[(i, j - 1)]
        }
    })
}

/// Profiles `V` out for fixed extra rows.
///
/// The profile derivative `n lambda_V - (N - n)/(1 - V)` is decreasing in
/// `V`, so its root is bracketed from `n / N` and polished with Brent.
/// Golden section over the whole range is the fallback.
fn fit_v(inv_w: &[f64], n_pop: usize, extra: Option<&DMatrix<f64>>) -> Result<VFit> {
    let n = inv_w.len();
    let k = (n_pop - n) as f64;
    let lo = inv_w.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = inv_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-14 * hi {
        // all inclusion probabilities equal: V is pinned
        let v = lo;
        if k > 0.0 && v >= 1.0 {
            return Err(Error::Infeasible(
                "all weights equal one but N > n; V would be one".into(),
            ));
        }
        let sol = solve_el_dual(&design(inv_w, v, extra, true))?;
        let log_el = biased_log_el(&sol, v, k);
        return Ok(VFit { sol, v, log_el, evaluations: 1 });
    }
    let mut evaluations = 0;
    let mut eval = |v: f64| -> Option<(ELSolution, f64)> {
        evaluations += 1;
        let sol = solve_el_dual(&design(inv_w, v, extra, false)).ok()?;
        let l = biased_log_el(&sol, v, k);
        l.is_finite().then_some((sol, l))
    };
    let deriv = |sol: &ELSolution, v: f64| n as f64 * sol.lambda[0] - k / (1.0 - v);
    let width = hi - lo;
    let v0 = (n as f64 / n_pop as f64).clamp(lo + 1e-3 * width, hi - 1e-3 * width);
    let root = (|| {
        let s0 = eval(v0)?;
        let d0 = deriv(&s0.0, v0);
        if d0 == 0.0 {
            return Some(v0);
        }
        let (dir, edge) = if d0 > 0.0 { (1.0, hi) } else { (-1.0, lo) };
        let (mut a, mut da) = (v0, d0);
        let mut step = 0.01 * width;
        for _ in 0..200 {
            let room = (edge - a).abs();
            let b = a + dir * step.min(0.5 * room);
            if b == a {
                return None;
            }
            match eval(b) {
                None => step = 0.25 * (b - a).abs(),
                Some((sb, _)) => {
                    let db = deriv(&sb, b);
                    if db.signum() != da.signum() {
                        return brent_root(
                            |v| eval(v).map(|(s, _)| deriv(&s, v)),
                            a,
                            b,
                            da,
                            db,
                            1e-15,
                            200,
                        );
                    }
                    a = b;
                    da = db;
                    step *= 2.0;
                }
            }
        }
        None
    })();
    let polished = root.and_then(|v| eval(v).map(|fit| (v, fit)));
    let (v, (sol, log_el)) = match polished {
        Some(x) => x,
        None => {
            let g = golden_section(|v| eval(v).map(|(_, l)| l), lo, hi, 1e-10, 300);
            if !g.fx.is_finite() {
                return Err(Error::Infeasible(
                    "biased empirical likelihood has no feasible V".into(),
                ));
            }
            (g.x, eval(g.x).expect("golden optimum is feasible"))
        }
    };
    Ok(VFit { sol, v, log_el, evaluations })
}

fn inverse_weights(w: &[f64], n_pop: usize) -> Result<Vec<f64>> {
    if w.len() < 2 {
        return Err(Error::InvalidData("biased empirical likelihood needs n >= 2".into()));
    }
    if n_pop < w.len() {
        return Err(Error::InvalidData(format!(
            "population size {n_pop} below sample size {}",
            w.len()
        )));
    }
    w.iter()
        .enumerate()
        .map(|(i, &wi)| {
            if wi.is_finite() && wi >= 1.0 {
                Ok(1.0 / wi)
            } else {
                Err(Error::InvalidRow {
                    row: i + 1,
                    message: format!("weight {wi} is not a finite value >= 1"),
                })
            }
        })
        .collect()
}

fn finish(fit: VFit, penalty: f64, tau: Option<Vec<f64>>, evaluations: usize) -> BiasedELSolution {
    BiasedELSolution {
        objective: fit.log_el - penalty,
        log_el: fit.log_el,
        p: fit.sol.p,
        v: fit.v,
        lambda: fit.sol.lambda,
        tau,
        converged: fit.sol.converged,
        constraint_residual: fit.sol.constraint_residual,
        evaluations,
    }
}

/// Derivative of the profiled objective in `tau`, by the envelope theorem:
/// `-n sum_i p_i lambda' d g_i / d tau` minus the penalty gradient. Row
/// derivatives are central differences.
fn tau_gradient(
    fit: &VFit,
    extra: &TauConstraint<'_>,
    ext: Option<&ExternalSummary>,
    tau: &[f64],
) -> Option<Vec<f64>> {
    let n = fit.sol.p.len() as f64;
    let pen = ext.map(|e| e.penalty_gradient(tau));
    let mut out = Vec::with_capacity(tau.len());
    for j in 0..tau.len() {
        let h = 1e-6 * (1.0 + tau[j].abs());
        let mut up = tau.to_vec();
        let mut dn = tau.to_vec();
        up[j] += h;
        dn[j] -= h;
        let ru = (extra.rows)(&up).ok()?;
        let rd = (extra.rows)(&dn).ok()?;
        let mut g = 0.0;
        for i in 0..ru.nrows() {
            let mut dot = 0.0;
            for c in 0..ru.ncols() {
                dot += fit.sol.lambda[c + 1] * (ru[(i, c)] - rd[(i, c)]) / (2.0 * h);
            }
            g += fit.sol.p[i] * dot;
        }
        out.push(-n * g - pen.as_ref().map_or(0.0, |p| p[j]));
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Root of the scalar `tau` derivative, bracketed outward from `t0`.
fn tau_root_scalar(grad: &mut dyn FnMut(f64) -> Option<f64>, t0: f64) -> Option<f64> {
    let g0 = grad(t0)?;
    if g0 == 0.0 {
        return Some(t0);
    }
    let dir = g0.signum();
    let (mut a, mut ga) = (t0, g0);
    let mut step = 0.1 * (1.0 + t0.abs());
    for _ in 0..100 {
        let b = a + dir * step;
        match grad(b) {
            None => step *= 0.25,
            Some(gb) => {
                if gb.signum() != ga.signum() {
                    let (lo, hi, glo, ghi) = if a < b { (a, b, ga, gb) } else { (b, a, gb, ga) };
                    return brent_root(grad, lo, hi, glo, ghi, 1e-14 * (1.0 + t0.abs()), 200);
                }
                a = b;
                ga = gb;
                step *= 2.0;
            }
        }
        if step < 1e-14 {
            return None;
        }
    }
    None
}

/// Newton on the vector `tau` derivative with a difference Jacobian and
/// step halving on `|grad|`.
fn tau_root_newton(grad: &mut dyn FnMut(&[f64]) -> Option<Vec<f64>>, t0: &[f64]) -> Option<Vec<f64>> {
    let q = t0.len();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut tau = t0.to_vec();
    let mut g = grad(&tau)?;
    for _ in 0..60 {
        if norm(&g) < 1e-10 {
            return Some(tau);
        }
        let mut jac = DMatrix::zeros(q, q);
        for j in 0..q {
            let h = 1e-6 * (1.0 + tau[j].abs());
            let mut t = tau.clone();
            t[j] += h;
            let gj = grad(&t)?;
            for i in 0..q {
                jac[(i, j)] = (gj[i] - g[i]) / h;
            }
        }
        let step = jac.lu().solve(&nalgebra::DVector::from_column_slice(&g))?;
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand: Vec<f64> = tau.iter().zip(step.iter()).map(|(t, s)| t - scale * s).collect();
            if let Some(gc) = grad(&cand) {
                if norm(&gc) < norm(&g) {
                    let moved = scale * step.norm();
                    tau = cand;
                    g = gc;
                    accepted = true;
                    if moved < 1e-13 * (1.0 + norm(&tau)) {
                        return Some(tau);
                    }
                    break;
                }
            }
            scale *= 0.5;
        }
        if !accepted {
            return (norm(&g) < 1e-7).then_some(tau);
        }
    }
    (norm(&g) < 1e-7).then_some(tau)
}

fn search_tau(
    inv_w: &[f64],
    n_pop: usize,
    extra: &TauConstraint<'_>,
    ext: Option<&ExternalSummary>,
) -> Result<BiasedELSolution> {
    let penalty = |tau: &[f64]| ext.map_or(0.0, |e| e.penalty(tau));
    let t0 = &extra.tau_init;
    if let Some(e) = ext {
        if e.tau_tilde().len() != t0.len() {
            return Err(Error::DimensionMismatch {
                expected: e.tau_tilde().len(),
                found: t0.len(),
                context: "external summary versus constraint parameter".into(),
            });
        }
    }
    let evals = std::cell::Cell::new(0usize);
    let fit_at = |tau: &[f64]| -> Option<VFit> {
        let rows = (extra.rows)(tau).ok()?;
        let fit = fit_v(inv_w, n_pop, Some(&rows)).ok()?;
        evals.set(evals.get() + fit.evaluations);
        Some(fit)
    };
    let mut grad = |tau: &[f64]| fit_at(tau).and_then(|f| tau_gradient(&f, extra, ext, tau));
    let objective = |tau: &[f64]| fit_at(tau).map(|f| f.log_el - penalty(tau));
    let tau = match t0.len() {
        0 => Vec::new(),
        1 => match tau_root_scalar(&mut |t| grad(&[t]).map(|g| g[0]), t0[0]) {
            Some(t) => vec![t],
            None => {
                let step = 0.1 * (1.0 + t0[0].abs());
                vec![maximize_scalar(|t| objective(&[t]), t0[0], step, None, 1e-12)?.x]
            }
        },
        _ => match tau_root_newton(&mut grad, t0) {
            Some(t) => t,
            None => nelder_mead(objective, t0, 0.1, 1e-13, 500, 3)?.x,
        },
    };
    let rows = (extra.rows)(&tau)?;
    let fit = fit_v(inv_w, n_pop, Some(&rows))?;
    evals.set(evals.get() + fit.evaluations);
    let pen = penalty(&tau);
    Ok(finish(fit, pen, Some(tau), evals.get()))
}

/// Biased-sampling empirical likelihood for sampled weights `w` and
/// population size `n_pop`, with optional profiled extra constraints.
pub fn solve_biased_el(
    w: &[f64],
    n_pop: usize,
    extra: Option<&TauConstraint<'_>>,
) -> Result<BiasedELSolution> {
    let inv_w = inverse_weights(w, n_pop)?;
    match extra {
        None => {
            let fit = fit_v(&inv_w, n_pop, None)?;
            let ev = fit.evaluations;
            Ok(finish(fit, 0.0, None, ev))
        }
        Some(x) => search_tau(&inv_w, n_pop, x, None),
    }
}

/// Biased-sampling empirical likelihood with the constraint `dstar` and the
/// external penalty `N1/2 (tau_tilde - tau)' Sigma1^-1 (tau_tilde - tau)`.
pub fn solve_penalized_el(
    w: &[f64],
    n_pop: usize,
    dstar: &TauConstraint<'_>,
    ext: &ExternalSummary,
) -> Result<BiasedELSolution> {
    let inv_w = inverse_weights(w, n_pop)?;
    search_tau(&inv_w, n_pop, dstar, Some(ext))
}
