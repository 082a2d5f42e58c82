//! Derivative-free scalar and simplex maximizers used by the profile searches.
//!
//! Objectives return `None` where the inner problem is infeasible; such points
//! are treated as minus infinity.

use crate::error::{Error, Result};

const GOLDEN: f64 = 0.618_033_988_749_894_8;

/// Counts probe outcomes so callers can enforce a failure budget.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProbeStats {
    pub probes: usize,
    pub failures: usize,
}

impl ProbeStats {
    fn record(&mut self, v: Option<f64>) -> f64 {
        self.probes += 1;
        match v {
            Some(f) if f.is_finite() => f,
            _ => {
                self.failures += 1;
                f64::NEG_INFINITY
            }
        }
    }

    pub fn check_budget(&self, what: &str) -> Result<()> {
        if self.failures * 2 > self.probes {
            return Err(Error::Infeasible(format!(
                "{what}: inner problem failed at {} of {} probe points",
                self.failures, self.probes
            )));
        }
        Ok(())
    }
}

/// Result of a scalar maximization.
#[derive(Debug, Clone, Copy)]
pub struct ScalarMax {
    pub x: f64,
    pub fx: f64,
    pub lo: f64,
    pub hi: f64,
    pub stats: ProbeStats,
}

/// Golden-section search for the maximum of `f` on `[lo, hi]`.
pub fn golden_section<F>(mut f: F, mut lo: f64, mut hi: f64, tol: f64, max_iter: usize) -> ScalarMax
where
    F: FnMut(f64) -> Option<f64>,
{
    let mut stats = ProbeStats::default();
    let mut x1 = hi - GOLDEN * (hi - lo);
    let mut x2 = lo + GOLDEN * (hi - lo);
    let mut f1 = stats.record(f(x1));
    let mut f2 = stats.record(f(x2));
    for _ in 0..max_iter {
        if hi - lo <= tol * (1.0 + x1.abs().max(x2.abs())) {
            break;
        }
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - GOLDEN * (hi - lo);
            f1 = stats.record(f(x1));
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + GOLDEN * (hi - lo);
            f2 = stats.record(f(x2));
        }
    }
    let (x, fx) = if f1 >= f2 { (x1, f1) } else { (x2, f2) };
    ScalarMax { x, fx, lo, hi, stats }
}

/// Vertex of the parabola through three points, if it opens downward.
fn parabola_vertex(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> Option<f64> {
    let num = (b.0 - a.0).powi(2) * (b.1 - c.1) - (b.0 - c.0).powi(2) * (b.1 - a.1);
    let den = (b.0 - a.0) * (b.1 - c.1) - (b.0 - c.0) * (b.1 - a.1);
    if den == 0.0 || !num.is_finite() || !den.is_finite() {
        return None;
    }
    let v = b.0 - 0.5 * num / den;
    v.is_finite().then_some(v)
}

/// Maximizes a scalar function starting from `x0`.
///
/// Brackets the maximum by expanding steps from `x0` (clipped to `bounds`),
/// narrows it by golden section and finishes with a parabolic step. If the
/// objective is flat around `x0` to within `1e-14` relative, `x0` is returned.
pub fn maximize_scalar<F>(
    mut f: F,
    x0: f64,
    step: f64,
    bounds: Option<(f64, f64)>,
    tol: f64,
) -> Result<ScalarMax>
where
    F: FnMut(f64) -> Option<f64>,
{
    let (blo, bhi) = bounds.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let clip = |x: f64| x.clamp(blo, bhi);
    let mut stats = ProbeStats::default();
    let x0 = clip(x0);
    let f0 = stats.record(f(x0));
    if !f0.is_finite() {
        return Err(Error::Infeasible(format!(
            "profile search: starting point {x0} is infeasible"
        )));
    }
    let flat = |a: f64, b: f64| (a - b).abs() <= 1e-14 * (1.0 + b.abs());

    let mut s = step;
    let (mut left, mut right);
    let mut shrinks = 0;
    loop {
        let xl = clip(x0 - s);
        let xr = clip(x0 + s);
        left = (xl, stats.record(f(xl)));
        right = (xr, stats.record(f(xr)));
        if left.1.is_finite() || right.1.is_finite() || shrinks >= 12 {
            break;
        }
        s *= 0.1;
        shrinks += 1;
    }
    if flat(left.1, f0) && flat(right.1, f0) {
        return Ok(ScalarMax {
            x: x0,
            fx: f0,
            lo: left.0,
            hi: right.0,
            stats,
        });
    }

    // bracket (a, b, c) with f(b) >= f(a), f(c)
    let (mut a, mut b, mut c) = (left, (x0, f0), right);
    if !(b.1 >= a.1 && b.1 >= c.1) {
        let dir = if right.1 > left.1 { 1.0 } else { -1.0 };
        let (mut prev, mut cur) = if dir > 0.0 { ((x0, f0), right) } else { ((x0, f0), left) };
        let mut h = s;
        let mut found = false;
        for _ in 0..80 {
            h *= 1.0 + GOLDEN;
            let xn = clip(cur.0 + dir * h);
            let next = (xn, stats.record(f(xn)));
            if next.1 < cur.1 || xn == cur.0 {
                a = prev;
                b = cur;
                c = next;
                found = true;
                break;
            }
            prev = cur;
            cur = next;
        }
        if !found {
            return Err(Error::no_convergence("profile bracket", 80, f64::NAN));
        }
        if a.0 > c.0 {
            std::mem::swap(&mut a, &mut c);
        }
    }
    stats.check_budget("profile search")?;

    let g = golden_section(&mut f, a.0, c.0, tol, 500);
    stats.probes += g.stats.probes;
    stats.failures += g.stats.failures;
    let mut best = (g.x, g.fx);
    if b.1 > best.1 {
        best = b;
    }
    // parabolic refinement around the golden-section optimum
    let h = (g.hi - g.lo).max(tol * (1.0 + best.0.abs()));
    let pl = (best.0 - h, stats.record(f(best.0 - h)));
    let pr = (best.0 + h, stats.record(f(best.0 + h)));
    if pl.1.is_finite() && pr.1.is_finite() {
        if let Some(v) = parabola_vertex(pl, best, pr) {
            if v > pl.0 && v < pr.0 && v >= blo && v <= bhi {
                let fv = stats.record(f(v));
                if fv > best.1 {
                    best = (v, fv);
                }
            }
        }
    }
    Ok(ScalarMax {
        x: best.0,
        fx: best.1,
        lo: g.lo,
        hi: g.hi,
        stats,
    })
}

/// Brent's method for a root of `f` in `[a, b]`, given values of opposite
/// sign at the ends. Returns `None` if `f` fails inside the bracket.
pub fn brent_root<F>(mut f: F, mut a: f64, mut b: f64, mut fa: f64, mut fb: f64, xtol: f64, max_iter: usize) -> Option<f64>
where
    F: FnMut(f64) -> Option<f64>,
{
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa.signum() == fb.signum() {
        return None;
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * xtol;
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return Some(b);
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q) = if a == c {
                (2.0 * m * s, 1.0 - s)
            } else {
                let q = fa / fc;
                let r = fb / fc;
                (s * (2.0 * m * q * (q - r) - (b - a) * (r - 1.0)), (q - 1.0) * (r - 1.0) * (s - 1.0))
            };
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol * m.signum() };
        fb = f(b)?;
    }
    Some(b)
}

/// Result of a Nelder–Mead search.
#[derive(Debug, Clone)]
pub struct SimplexMax {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub stats: ProbeStats,
}

/// Nelder–Mead maximization with restarts from the incumbent.
pub fn nelder_mead<F>(
    mut f: F,
    x0: &[f64],
    step: f64,
    tol: f64,
    max_iter: usize,
    restarts: usize,
) -> Result<SimplexMax>
where
    F: FnMut(&[f64]) -> Option<f64>,
{
    let d = x0.len();
    let mut stats = ProbeStats::default();
    let mut eval = |x: &[f64], stats: &mut ProbeStats| -stats.record(f(x));
    let mut best_x = x0.to_vec();
    let mut best_f = eval(x0, &mut stats);
    if !best_f.is_finite() {
        return Err(Error::Infeasible("simplex search: starting point is infeasible".into()));
    }
    let mut iterations = 0;
    for round in 0..=restarts {
        let scale = step * 0.5f64.powi(round as i32);
        let mut simplex: Vec<(Vec<f64>, f64)> = vec![(best_x.clone(), best_f)];
        for j in 0..d {
            let mut v = best_x.clone();
            v[j] += scale * (1.0 + best_x[j].abs());
            let fv = eval(&v, &mut stats);
            simplex.push((v, fv));
        }
        for _ in 0..max_iter {
            iterations += 1;
            simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
            let spread = simplex[d].1 - simplex[0].1;
            if spread.abs() <= tol * (1.0 + simplex[0].1.abs()) {
                break;
            }
            let mut centroid = vec![0.0; d];
            for (v, _) in &simplex[..d] {
                for j in 0..d {
                    centroid[j] += v[j] / d as f64;
                }
            }
            let worst = simplex[d].clone();
            let along = |t: f64| -> Vec<f64> {
                (0..d).map(|j| centroid[j] + t * (worst.0[j] - centroid[j])).collect()
            };
            let xr = along(-1.0);
            let fr = eval(&xr, &mut stats);
            if fr < simplex[0].1 {
                let xe = along(-2.0);
                let fe = eval(&xe, &mut stats);
                simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[d - 1].1 {
                simplex[d] = (xr, fr);
            } else {
                let (xc, fc) = if fr < worst.1 {
                    let xc = along(-0.5);
                    let fc = eval(&xc, &mut stats);
                    (xc, fc)
                } else {
                    let xc = along(0.5);
                    let fc = eval(&xc, &mut stats);
                    (xc, fc)
                };
                if fc < worst.1.min(fr) {
                    simplex[d] = (xc, fc);
                } else {
                    let x_best = simplex[0].0.clone();
                    for item in simplex.iter_mut().skip(1) {
                        let v: Vec<f64> = (0..d).map(|j| x_best[j] + 0.5 * (item.0[j] - x_best[j])).collect();
                        let fv = eval(&v, &mut stats);
                        *item = (v, fv);
                    }
                }
            }
        }
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let improved = simplex[0].1 < best_f - tol * (1.0 + best_f.abs());
        if simplex[0].1 <= best_f {
            best_x = simplex[0].0.clone();
            best_f = simplex[0].1;
        }
        if round > 0 && !improved {
            break;
        }
    }
    stats.check_budget("simplex search")?;
    Ok(SimplexMax {
        x: best_x,
        fx: -best_f,
        iterations,
        stats,
    })
}
