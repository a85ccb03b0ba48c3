//! Local minimizers: BFGS with a backtracking line search, and a Nelder–Mead
//! simplex used as a fallback when the line search breaks down.
//!
//! Objectives may return `+∞` to mark infeasible points; both methods treat
//! such points as rejected trial steps.

use serde::{Deserialize, Serialize};

/// Stopping rules shared by both minimizers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimOptions {
    /// Converged when the sup-norm of the gradient falls below this.
    pub grad_tol: f64,
    /// Converged when the relative decrease stays below this for two
    /// consecutive iterations.
    pub f_rel_tol: f64,
    pub max_iter: usize,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-10,
            f_rel_tol: 1e-12,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub used_fallback: bool,
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` from `x0`. `f(x, true)` must return the value and gradient;
/// `f(x, false)` may return an empty gradient.
pub fn minimize<F>(f: F, x0: &[f64], opts: &OptimOptions) -> OptimResult
where
    F: Fn(&[f64], bool) -> (f64, Vec<f64>),
{
    let d = x0.len();
    let (mut fx, mut g) = f(x0, true);
    let mut x = x0.to_vec();
    if d == 0 || !fx.is_finite() {
        return OptimResult {
            grad_norm: sup_norm(&g),
            x,
            value: fx,
            iterations: 0,
            converged: d == 0 && fx.is_finite(),
            used_fallback: false,
        };
    }
    let mut h = identity(d);
    let mut fresh = true;
    let mut small_steps = 0;
    let mut iterations = 0;
    let mut needs_fallback = false;

    while iterations < opts.max_iter {
        if sup_norm(&g) <= opts.grad_tol {
            return done(x, fx, &g, iterations, true, false);
        }
        let mut p = mat_vec(&h, &g).iter().map(|v| -v).collect::<Vec<_>>();
        let mut slope = dot(&g, &p);
        if !(slope < 0.0) {
            h = identity(d);
            fresh = true;
            p = g.iter().map(|v| -v).collect();
            slope = dot(&g, &p);
        }
        // First step from a fresh metric is capped at unit length.
        let mut alpha = if fresh { (1.0 / sup_norm(&p)).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + alpha * b).collect();
            let (ft, _) = f(&trial, false);
            if ft.is_finite() && ft <= fx + 1e-4 * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= if ft.is_finite() { 0.5 } else { 0.25 };
        }
        iterations += 1;
        let Some((x_new, _)) = accepted else {
            if fresh {
                needs_fallback = true;
                break;
            }
            h = identity(d);
            fresh = true;
            continue;
        };
        let (f_new, g_new) = f(&x_new, true);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-14 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if fresh {
                let scale = sy / dot(&y, &y);
                h = identity(d);
                h.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v *= scale));
            }
            bfgs_update(&mut h, &s, &y, sy);
            fresh = false;
        }
        let decrease = fx - f_new;
        if decrease <= opts.f_rel_tol * fx.abs().max(f64::MIN_POSITIVE) {
            small_steps += 1;
        } else {
            small_steps = 0;
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        if small_steps >= 2 {
            return done(x, fx, &g, iterations, true, false);
        }
    }
    if !needs_fallback && sup_norm(&g) <= opts.grad_tol {
        return done(x, fx, &g, iterations, true, false);
    }
    let nm = nelder_mead(|v| f(v, false).0, &x, opts);
    if nm.value <= fx {
        let (val, grad) = f(&nm.x, true);
        OptimResult {
            grad_norm: sup_norm(&grad),
            x: nm.x,
            value: val,
            iterations: iterations + nm.iterations,
            converged: nm.converged,
            used_fallback: true,
        }
    } else {
        done(x, fx, &g, iterations, nm.converged, true)
    }
}

fn done(x: Vec<f64>, value: f64, g: &[f64], iterations: usize, converged: bool, fallback: bool) -> OptimResult {
    OptimResult {
        x,
        value,
        grad_norm: sup_norm(g),
        iterations,
        converged,
        used_fallback: fallback,
    }
}

fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn mat_vec(h: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    h.iter().map(|r| dot(r, v)).collect()
}

/// Inverse-Hessian BFGS update.
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let d = s.len();
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    let rho = 1.0 / sy;
    for i in 0..d {
        for j in 0..d {
            h[i][j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
        }
    }
}

/// Derivative-free simplex search (adaptive coefficients).
pub fn nelder_mead<F>(f: F, x0: &[f64], opts: &OptimOptions) -> OptimResult
where
    F: Fn(&[f64]) -> f64,
{
    let d = x0.len();
    let nd = d as f64;
    let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / nd, 0.75 - 0.5 / nd, 1.0 - 1.0 / nd);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..d {
        let mut v = x0.to_vec();
        v[i] += if v[i].abs() > 1e-3 { 0.05 * v[i].abs().max(0.1) } else { 0.1 };
        let fv = f(&v);
        simplex.push((v, fv));
    }
    let budget = opts.max_iter.max(200) * d.max(1) * 4;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < budget {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[d].1;
        if best.is_finite() && (worst - best).abs() <= 1e-14 * best.abs().max(1e-300) + 1e-300 {
            converged = true;
            break;
        }
        iterations += 1;
        let centroid: Vec<f64> = (0..d)
            .map(|j| simplex[..d].iter().map(|p| p.0[j]).sum::<f64>() / nd)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[d].0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };
        let xr = along(alpha);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = along(alpha * gamma);
            let fe = f(&xe);
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[d].1 {
                let xc = along(alpha * rho);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = along(-rho);
                let fc = f(&xc);
                (xc, fc)
            };
            if fc < simplex[d].1.min(fr) {
                simplex[d] = (xc, fc);
            } else {
                let x_best = simplex[0].0.clone();
                for p in simplex.iter_mut().skip(1) {
                    p.0 = x_best.iter().zip(&p.0).map(|(b, v)| b + sigma * (v - b)).collect();
                    p.1 = f(&p.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    OptimResult {
        x,
        value,
        grad_norm: f64::NAN,
        iterations,
        converged,
        used_fallback: false,
    }
}
