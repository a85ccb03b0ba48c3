//! Order selection and estimation of the parametric part.
//!
//! * [`select_order`]: minimizes the penalized contrast
//!   `C_n(k, θ) = M_n(θ) + λ_n [J(k) + I_k(θ)]` over `k ≤ k_max`, then refits
//!   `M_n` over `{θ : I_k̂(θ) ≤ 2 I_k̂(θ̃)}` starting from the penalized
//!   minimizer `θ̃`.
//! * [`fit_compact`]: minimizes `M_n` over a compact box `K` for a known `k`.
//!
//! Both optimize in an unconstrained coordinate system: translation gaps are
//! softplus-positive increments from `m_1 = 0` and `Q` is a softmax over `k²`
//! logits (the last one pinned to zero), so every decoded point is already in
//! canonical form.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrast::{ContrastConfig, ContrastTarget};
use crate::ecf::{EcfGrid, Series};
use crate::error::{Error, Result};
use crate::model::{boundary_penalty, ThetaParams};
use crate::optimize::{minimize, OptimOptions, OptimResult};
use crate::rng::{derive_path, stream, StreamRng};

/// Shape of the order penalty `J(k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrderPenalty {
    /// `J(k) = k`.
    #[default]
    Linear,
    /// `J(k) = table[k − 1]`; must be increasing.
    Table(Vec<f64>),
}

impl OrderPenalty {
    pub fn at(&self, k: usize) -> f64 {
        match self {
            OrderPenalty::Linear => k as f64,
            OrderPenalty::Table(t) => t[k - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub k_max: usize,
    /// `c` in `λ_n = c · n^{−1/4}`.
    pub lambda_coeff: f64,
    #[serde(default)]
    pub order_penalty: OrderPenalty,
    pub multistart: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimOptions,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            k_max: 5,
            lambda_coeff: 0.5,
            order_penalty: OrderPenalty::Linear,
            multistart: 20,
            seed: 0,
            optimizer: OptimOptions::default(),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max == 0 {
            return Err(Error::Configuration("k_max must be at least 1".into()));
        }
        if !(self.lambda_coeff > 0.0) {
            return Err(Error::Configuration("lambda coefficient must be positive".into()));
        }
        if self.multistart == 0 {
            return Err(Error::Configuration("multistart must be at least 1".into()));
        }
        if let OrderPenalty::Table(t) = &self.order_penalty {
            if t.len() < self.k_max || t.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Configuration(
                    "order penalty table must be increasing and cover k_max".into(),
                ));
            }
        }
        Ok(())
    }

    /// `λ_n = c · n^{−1/4}`.
    pub fn lambda(&self, n: usize) -> f64 {
        self.lambda_coeff * (n as f64).powf(-0.25)
    }
}

/// Compact subset `K` of the interior parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompactSpec {
    /// `‖m‖∞ ≤ m_bound`.
    pub m_bound: f64,
    /// Minimum consecutive translation gap.
    pub gap_min: f64,
    /// `det Q ≥ det_min`.
    pub det_min: f64,
    /// Lower bound on every `Q` entry.
    pub q_floor: f64,
}

impl Default for CompactSpec {
    fn default() -> Self {
        Self {
            m_bound: 5.0,
            gap_min: 0.1,
            det_min: 0.01,
            q_floor: 0.0,
        }
    }
}

impl CompactSpec {
    /// Checks that `K` is nonempty for `k` populations. The largest achievable
    /// determinant under the entry floor is attained at the symmetric point
    /// `q_floor · 11ᵀ + c I` by concavity of `log det`.
    pub fn check_feasible(&self, k: usize) -> Result<()> {
        let kf = k as f64;
        if !(self.m_bound > 0.0 && self.gap_min > 0.0 && self.det_min > 0.0 && self.q_floor >= 0.0) {
            return Err(Error::Infeasible(format!("invalid compact set {self:?}")));
        }
        if self.gap_min * (kf - 1.0) > self.m_bound {
            return Err(Error::Infeasible(format!(
                "{} gaps of at least {} exceed the translation bound {}",
                k - 1,
                self.gap_min,
                self.m_bound
            )));
        }
        if self.q_floor * kf * kf >= 1.0 && k > 1 {
            return Err(Error::Infeasible("Q entry floor leaves no mass".into()));
        }
        if k > 1 && self.max_det(k) < self.det_min {
            return Err(Error::Infeasible(format!(
                "det Q ≥ {} is unreachable for k = {k} (max {})",
                self.det_min,
                self.max_det(k)
            )));
        }
        Ok(())
    }

    fn max_det(&self, k: usize) -> f64 {
        let kf = k as f64;
        let c = (1.0 - kf * kf * self.q_floor) / kf;
        c.powi(k as i32 - 1) * (c + kf * self.q_floor)
    }

    pub fn contains(&self, theta: &ThetaParams) -> bool {
        let m = theta.m();
        let k = theta.k();
        m.iter().all(|v| v.abs() <= self.m_bound)
            && m.windows(2).all(|w| w[1] - w[0] >= self.gap_min)
            && theta.q().iter().all(|&v| v >= self.q_floor)
            && (k == 1 || theta.det_q().abs() >= self.det_min)
    }
}

/// Result of order selection and the restricted refit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamFit {
    pub k_hat: usize,
    /// Penalized-contrast minimizer.
    pub theta_tilde: ThetaParams,
    /// Restricted contrast minimizer.
    pub theta_hat: ThetaParams,
    /// `M_n(θ̂)`.
    pub mn_value: f64,
    /// `C_n(k̂, θ̃)`.
    pub cn_value: f64,
    pub lambda: f64,
    /// Upper bound `2 I_k̂(θ̃)` of the refit's feasible set.
    pub penalty_bound: f64,
    pub per_k: Vec<OrderFit>,
    pub diagnostics: FitDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub k: usize,
    pub cn_value: Option<f64>,
    pub theta: Option<ThetaParams>,
    pub converged_restarts: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FitDiagnostics {
    pub converged_restarts: usize,
    pub total_restarts: usize,
    pub iterations: usize,
    pub used_fallback: bool,
    pub grad_norm: f64,
}

/// Which objective a fixed-`k` fit minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `M_n(θ)`.
    Contrast,
    /// `C_n(k, θ)`.
    Penalized,
}

/// Coordinates of the unconstrained search space.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Reparam {
    k: usize,
    gap_floor: f64,
    q_floor: f64,
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn softplus_inv(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp_m1().ln()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Reparam {
    pub fn new(k: usize, gap_floor: f64, q_floor: f64) -> Self {
        Self { k, gap_floor, q_floor }
    }

    pub fn dim(&self) -> usize {
        crate::model::free_dim(self.k)
    }

    fn softmax(&self, z: &[f64]) -> Vec<f64> {
        let logits = &z[self.k - 1..];
        let max = logits.iter().fold(0.0_f64, |a, &b| a.max(b));
        let mut s: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        s.push((-max).exp());
        let total: f64 = s.iter().sum();
        s.iter_mut().for_each(|v| *v /= total);
        s
    }

    fn gaps(&self, z: &[f64]) -> Vec<f64> {
        z[..self.k - 1].iter().map(|&v| self.gap_floor + softplus(v)).collect()
    }

    pub fn decode(&self, z: &[f64]) -> ThetaParams {
        let mut m = Vec::with_capacity(self.k);
        m.push(0.0);
        for g in self.gaps(z) {
            m.push(m.last().unwrap() + g);
        }
        let c = 1.0 - (self.k * self.k) as f64 * self.q_floor;
        let q = self.softmax(z).iter().map(|s| self.q_floor + c * s).collect();
        ThetaParams::from_raw(m, q)
    }

    pub fn encode(&self, theta: &ThetaParams) -> Vec<f64> {
        let k = self.k;
        let mut z = Vec::with_capacity(self.dim());
        for w in theta.m().windows(2) {
            let excess = (w[1] - w[0] - self.gap_floor).max(1e-12);
            z.push(softplus_inv(excess));
        }
        let c = 1.0 - (k * k) as f64 * self.q_floor;
        let s: Vec<f64> = theta
            .q()
            .iter()
            .map(|&v| ((v - self.q_floor) / c).max(1e-300))
            .collect();
        let last = s[k * k - 1].ln();
        z.extend(s[..k * k - 1].iter().map(|v| v.ln() - last));
        z
    }

    /// Chains full-coordinate partials (and extra partials with respect to the
    /// gaps themselves) into the unconstrained coordinates.
    pub fn chain(&self, z: &[f64], grad_m: &[f64], grad_q: &[f64], grad_gap_extra: &[f64]) -> Vec<f64> {
        let k = self.k;
        let mut out = Vec::with_capacity(self.dim());
        let mut tail = vec![0.0; k];
        for j in (0..k - 1).rev() {
            tail[j] = tail[j + 1] + grad_m[j + 1];
        }
        for i in 0..k - 1 {
            let g = tail[i] + grad_gap_extra.get(i).copied().unwrap_or(0.0);
            out.push(sigmoid(z[i]) * g);
        }
        let c = 1.0 - (k * k) as f64 * self.q_floor;
        let s = self.softmax(z);
        let mean: f64 = s.iter().zip(grad_q).map(|(a, b)| a * b).sum();
        for r in 0..k * k - 1 {
            out.push(c * s[r] * (grad_q[r] - mean));
        }
        out
    }
}

/// Partials of `I_k` with respect to the gaps and the full `Q` entries, or
/// `None` on the boundary.
fn penalty_partials(theta: &ThetaParams) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let value = boundary_penalty(theta);
    if !value.is_finite() {
        return None;
    }
    let k = theta.k();
    let m = theta.m();
    let norm = m[k - 1];
    let gap_grad = m
        .windows(2)
        .map(|w| -1.0 / (w[1] - w[0]) + 2.0 * (k as f64 - 1.0) / (1.0 + norm))
        .collect();
    let inv = DMatrix::from_row_slice(k, k, theta.q()).try_inverse()?;
    // ∂(−log det Q)/∂Q_ij = −(Q⁻¹)_ji.
    let q_grad = (0..k * k).map(|e| -inv[(e % k, e / k)]).collect();
    Some((value, gap_grad, q_grad))
}

fn det_partials(theta: &ThetaParams) -> Option<(f64, Vec<f64>)> {
    let k = theta.k();
    let det = theta.det_q();
    let inv = DMatrix::from_row_slice(k, k, theta.q()).try_inverse()?;
    Some((det, (0..k * k).map(|e| det * inv[(e % k, e / k)]).collect()))
}

/// Search-space objective: contrast plus optional terms, all differentiable.
struct SearchObjective<'a> {
    target: &'a ContrastTarget,
    reparam: Reparam,
    /// `λ` and `J(k)` when minimizing the penalized contrast.
    penalized: Option<(f64, f64)>,
    /// `(bound, weight)` for the quadratic penalty on `I_k(θ) − bound`.
    penalty_cap: Option<(f64, f64)>,
    /// `(spec, weight)` for the compact-set constraints not built into the
    /// coordinates (translation bound and determinant floor).
    compact: Option<(CompactSpec, f64)>,
}

impl SearchObjective<'_> {
    fn eval(&self, z: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let k = self.reparam.k;
        let theta = self.reparam.decode(z);
        let nothing = || (f64::INFINITY, vec![0.0; z.len()]);
        let full = self.target.eval_full(&theta, want_grad);
        let mut value = full.value;
        let mut grad_q = full.grad_q;
        let mut gap_extra = vec![0.0; k - 1];

        let needs_penalty = self.penalized.is_some() || self.penalty_cap.is_some();
        let partials = if needs_penalty {
            match penalty_partials(&theta) {
                Some(p) => Some(p),
                None => return nothing(),
            }
        } else {
            None
        };
        if let (Some((lambda, j)), Some((ik, dgap, dq))) = (self.penalized, &partials) {
            value += lambda * (j + ik);
            if want_grad {
                for (a, b) in gap_extra.iter_mut().zip(dgap) {
                    *a += lambda * b;
                }
                for (a, b) in grad_q.iter_mut().zip(dq) {
                    *a += lambda * b;
                }
            }
        }
        if let (Some((bound, weight)), Some((ik, dgap, dq))) = (self.penalty_cap, &partials) {
            let excess = ik - bound;
            if excess > 0.0 {
                value += weight * excess * excess;
                if want_grad {
                    let f = 2.0 * weight * excess;
                    gap_extra.iter_mut().zip(dgap).for_each(|(a, b)| *a += f * b);
                    grad_q.iter_mut().zip(dq).for_each(|(a, b)| *a += f * b);
                }
            }
        }
        if let Some((spec, weight)) = self.compact {
            let over = theta.m()[k - 1] - spec.m_bound;
            if over > 0.0 {
                value += weight * over * over;
                if want_grad {
                    // m_k is the sum of all gaps.
                    gap_extra.iter_mut().for_each(|a| *a += 2.0 * weight * over);
                }
            }
            if k > 1 {
                let Some((det, ddet)) = det_partials(&theta) else {
                    return nothing();
                };
                if det <= 0.0 {
                    return nothing();
                }
                let short = spec.det_min - det;
                if short > 0.0 {
                    value += weight * short * short;
                    if want_grad {
                        grad_q.iter_mut().zip(&ddet).for_each(|(a, b)| *a -= 2.0 * weight * short * b);
                    }
                }
            }
        }
        if !value.is_finite() {
            return nothing();
        }
        if !want_grad {
            return (value, Vec::new());
        }
        (value, self.reparam.chain(z, &full.grad_m, &grad_q, &gap_extra))
    }

    fn minimize(&self, z0: &[f64], opts: &OptimOptions) -> OptimResult {
        minimize(|z, g| self.eval(z, g), z0, opts)
    }
}

/// Default start: translations at data quantiles, diagonally dominant `Q`.
fn base_start(k: usize, quantiles: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let kf = k as f64;
    let gaps: Vec<f64> = quantiles.windows(2).map(|w| (w[1] - w[0]).max(0.05)).collect();
    let q = (0..k * k)
        .map(|e| if e / k == e % k { 0.8 / kf } else { 0.0 } + 0.2 / (kf * kf))
        .collect();
    (gaps, q)
}

fn data_quantiles(series: Option<&Series>, k: usize) -> Vec<f64> {
    match series {
        Some(s) => {
            let mut sorted = s.values().to_vec();
            sorted.sort_by(f64::total_cmp);
            (0..k)
                .map(|j| crate::ecf::quantile_sorted(&sorted, (j as f64 + 0.5) / k as f64))
                .collect()
        }
        None => (0..k).map(|j| j as f64).collect(),
    }
}

fn random_start(k: usize, base_gaps: &[f64], rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>) {
    let gaps = base_gaps
        .iter()
        .map(|g| {
            let z: f64 = StandardNormal.sample(rng);
            g * (0.5 * z).exp()
        })
        .collect();
    for _ in 0..100 {
        let mut q: Vec<f64> = (0..k * k)
            .map(|e| {
                let draw: f64 = Exp1.sample(rng);
                draw + if e / k == e % k { rng.random_range(0.5..3.0) } else { 0.0 }
            })
            .collect();
        let total: f64 = q.iter().sum();
        q.iter_mut().for_each(|v| *v /= total);
        if ThetaParams::from_raw(vec![0.0; k], q.clone()).det_q() > 0.0 {
            return (gaps, q);
        }
    }
    let (_, q) = base_start(k, &vec![0.0; k]);
    (gaps, q)
}

fn theta_from_gaps(gaps: &[f64], q: Vec<f64>) -> ThetaParams {
    let mut m = vec![0.0];
    for g in gaps {
        m.push(m.last().unwrap() + g);
    }
    ThetaParams::from_raw(m, q)
}

/// Outcome of one fixed-`k` multistart fit.
#[derive(Debug, Clone)]
pub struct FixedFit {
    pub theta: ThetaParams,
    pub value: f64,
    pub diagnostics: FitDiagnostics,
}

fn best_of(results: Vec<(OptimResult, Reparam)>, k: usize) -> Result<(OptimResult, Reparam, usize)> {
    let total = results.len();
    let converged = results.iter().filter(|(r, _)| r.converged && r.value.is_finite()).count();
    let best = results
        .into_iter()
        .enumerate()
        .filter(|(_, (r, _))| r.converged && r.value.is_finite())
        .min_by(|(i, a), (j, b)| a.0.value.total_cmp(&b.0.value).then(i.cmp(j)))
        .map(|(_, r)| r);
    match best {
        Some((r, rp)) => Ok((r, rp, converged)),
        None => Err(Error::OptimizationFailure {
            message: format!("none of {total} restarts converged for k = {k}"),
            diagnostics: vec![format!("k = {k}, restarts = {total}")],
        }),
    }
}

/// Best local minimizer of `M_n` or `C_n` over `multistart` restarts for a
/// fixed `k`. `series` seeds the translation starting points.
pub fn fit_fixed_k_target(
    k: usize,
    target: &ContrastTarget,
    series: Option<&Series>,
    n: usize,
    scfg: &SelectionConfig,
    objective: Objective,
) -> Result<FixedFit> {
    scfg.validate()?;
    if k == 0 || k > scfg.k_max {
        return Err(Error::Configuration(format!("k = {k} outside 1..={}", scfg.k_max)));
    }
    let lambda = scfg.lambda(n);
    let penalty_term = |theta: &ThetaParams| match objective {
        Objective::Contrast => 0.0,
        Objective::Penalized => lambda * (scfg.order_penalty.at(theta.k()) + boundary_penalty(theta)),
    };
    if k == 1 {
        let theta = ThetaParams::trivial();
        let value = target.value(&theta) + penalty_term(&theta);
        return Ok(FixedFit {
            theta,
            value,
            diagnostics: FitDiagnostics {
                converged_restarts: 1,
                total_restarts: 1,
                ..Default::default()
            },
        });
    }
    let reparam = Reparam::new(k, 0.0, 0.0);
    let obj = SearchObjective {
        target,
        reparam,
        penalized: (objective == Objective::Penalized).then(|| (lambda, scfg.order_penalty.at(k))),
        penalty_cap: None,
        compact: None,
    };
    let quantiles = data_quantiles(series, k);
    let (base_gaps, base_q) = base_start(k, &quantiles);
    let results: Vec<(OptimResult, Reparam)> = (0..scfg.multistart)
        .into_par_iter()
        .map(|r| {
            let (gaps, q) = if r == 0 {
                (base_gaps.clone(), base_q.clone())
            } else {
                random_start(k, &base_gaps, &mut stream(derive_path(scfg.seed, &[k as u64, r as u64])))
            };
            let z0 = reparam.encode(&theta_from_gaps(&gaps, q));
            (obj.minimize(&z0, &scfg.optimizer), reparam)
        })
        .collect();
    let total = results.len();
    let (best, rp, converged) = best_of(results, k)?;
    Ok(FixedFit {
        theta: rp.decode(&best.x),
        value: best.value,
        diagnostics: FitDiagnostics {
            converged_restarts: converged,
            total_restarts: total,
            iterations: best.iterations,
            used_fallback: best.used_fallback,
            grad_norm: best.grad_norm,
        },
    })
}

/// [`fit_fixed_k_target`] on an empirical grid.
pub fn fit_fixed_k(
    k: usize,
    grid: &EcfGrid,
    series: Option<&Series>,
    ccfg: &ContrastConfig,
    scfg: &SelectionConfig,
    objective: Objective,
) -> Result<FixedFit> {
    let target = ContrastTarget::empirical(grid, ccfg)?;
    fit_fixed_k_target(k, &target, series, grid.n, scfg, objective)
}

/// Weight of the quadratic penalties enforcing constraint sets.
const CONSTRAINT_WEIGHT: f64 = 1e4;

/// Minimizes `M_n` over `{θ : I_k(θ) ≤ bound}` from a feasible start.
fn restricted_refit(
    target: &ContrastTarget,
    start: &ThetaParams,
    bound: f64,
    opts: &OptimOptions,
) -> (ThetaParams, OptimResult) {
    let k = start.k();
    let reparam = Reparam::new(k, 0.0, 0.0);
    let obj = SearchObjective {
        target,
        reparam,
        penalized: None,
        penalty_cap: Some((bound, CONSTRAINT_WEIGHT)),
        compact: None,
    };
    let z0 = reparam.encode(start);
    let result = obj.minimize(&z0, opts);
    let feasible = |z: &[f64]| boundary_penalty(&reparam.decode(z)) <= bound + 1e-9;
    let z = pull_back_to_feasible(&z0, &result.x, feasible);
    (reparam.decode(&z), result)
}

/// Largest step from `inside` towards `candidate` that stays feasible.
fn pull_back_to_feasible<F: Fn(&[f64]) -> bool>(inside: &[f64], candidate: &[f64], feasible: F) -> Vec<f64> {
    if feasible(candidate) {
        return candidate.to_vec();
    }
    let point = |t: f64| -> Vec<f64> { inside.iter().zip(candidate).map(|(a, b)| a + t * (b - a)).collect() };
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if feasible(&point(mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    point(lo)
}

/// Order selection by penalized contrast followed by the restricted refit.
pub fn select_order_target(
    target: &ContrastTarget,
    series: Option<&Series>,
    n: usize,
    scfg: &SelectionConfig,
) -> Result<ParamFit> {
    scfg.validate()?;
    let lambda = scfg.lambda(n);
    let fits: Vec<(usize, Result<FixedFit>)> = (1..=scfg.k_max)
        .map(|k| (k, fit_fixed_k_target(k, target, series, n, scfg, Objective::Penalized)))
        .collect();
    let mut per_k = Vec::with_capacity(fits.len());
    let mut best: Option<(usize, FixedFit)> = None;
    for (k, fit) in fits {
        match fit {
            Ok(f) => {
                per_k.push(OrderFit {
                    k,
                    cn_value: Some(f.value),
                    theta: Some(f.theta.clone()),
                    converged_restarts: f.diagnostics.converged_restarts,
                    error: None,
                });
                if best.as_ref().is_none_or(|(_, b)| f.value < b.value) {
                    best = Some((k, f));
                }
            }
            Err(e) => per_k.push(OrderFit {
                k,
                cn_value: None,
                theta: None,
                converged_restarts: 0,
                error: Some(e.to_string()),
            }),
        }
    }
    let Some((k_hat, tilde)) = best else {
        return Err(Error::OptimizationFailure {
            message: "every candidate order failed".into(),
            diagnostics: per_k.iter().filter_map(|p| p.error.clone()).collect(),
        });
    };
    let bound = 2.0 * boundary_penalty(&tilde.theta);
    let (theta_hat, diagnostics) = if k_hat == 1 {
        (tilde.theta.clone(), tilde.diagnostics.clone())
    } else {
        let (theta, res) = restricted_refit(target, &tilde.theta, bound, &scfg.optimizer);
        (
            theta,
            FitDiagnostics {
                converged_restarts: tilde.diagnostics.converged_restarts,
                total_restarts: tilde.diagnostics.total_restarts,
                iterations: tilde.diagnostics.iterations + res.iterations,
                used_fallback: tilde.diagnostics.used_fallback || res.used_fallback,
                grad_norm: res.grad_norm,
            },
        )
    };
    Ok(ParamFit {
        k_hat,
        mn_value: target.value(&theta_hat),
        cn_value: tilde.value,
        theta_tilde: tilde.theta,
        theta_hat,
        lambda,
        penalty_bound: bound,
        per_k,
        diagnostics,
    })
}

/// [`select_order_target`] on an empirical grid.
pub fn select_order(
    grid: &EcfGrid,
    series: Option<&Series>,
    ccfg: &ContrastConfig,
    scfg: &SelectionConfig,
) -> Result<ParamFit> {
    let target = ContrastTarget::empirical(grid, ccfg)?;
    select_order_target(&target, series, grid.n, scfg)
}

/// Two-stage estimate with the order fixed at `k`: penalized fit, then the
/// restricted refit. Returns `(θ̃, θ̂)`.
pub fn two_stage_fixed_k(
    k: usize,
    target: &ContrastTarget,
    series: Option<&Series>,
    n: usize,
    scfg: &SelectionConfig,
) -> Result<(ThetaParams, ThetaParams)> {
    let tilde = fit_fixed_k_target(k, target, series, n, scfg, Objective::Penalized)?;
    if k == 1 {
        return Ok((tilde.theta.clone(), tilde.theta));
    }
    let bound = 2.0 * boundary_penalty(&tilde.theta);
    let (hat, _) = restricted_refit(target, &tilde.theta, bound, &scfg.optimizer);
    Ok((tilde.theta, hat))
}

/// Feasible starting point inside `K`, moved from the proposal as needed.
fn compact_start(spec: &CompactSpec, gaps: &[f64], q: &[f64]) -> ThetaParams {
    let k = gaps.len() + 1;
    let mut gaps: Vec<f64> = gaps.iter().map(|g| g.max(spec.gap_min * 1.05)).collect();
    let total: f64 = gaps.iter().sum();
    let cap = 0.95 * spec.m_bound;
    if total > cap {
        // Shrink the excess over the minimum gaps proportionally.
        let floor = spec.gap_min * 1.0001;
        let excess: f64 = gaps.iter().map(|g| g - floor).sum();
        let room = (cap - floor * gaps.len() as f64).max(0.0);
        gaps.iter_mut().for_each(|g| *g = floor + (*g - floor) * room / excess);
    }
    // Blend Q towards the max-determinant point until it is inside.
    let kf = k as f64;
    let c = (1.0 - kf * kf * spec.q_floor) / kf;
    let centre: Vec<f64> = (0..k * k)
        .map(|e| spec.q_floor + if e / k == e % k { c } else { 0.0 })
        .collect();
    let mut t = 0.0;
    loop {
        let qt: Vec<f64> = q.iter().zip(&centre).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        let theta = theta_from_gaps(&gaps, qt);
        let ok = theta.q().iter().all(|&v| v >= spec.q_floor * (1.0 + 1e-9) || spec.q_floor == 0.0 && v > 0.0)
            && theta.det_q() >= spec.det_min * 1.01;
        if ok || t >= 1.0 {
            return theta;
        }
        t = (t + 0.1).min(1.0);
    }
}

/// Minimizer of `M_n` over the compact set `K` (known `k`).
pub fn fit_compact_target(
    k: usize,
    spec: &CompactSpec,
    target: &ContrastTarget,
    series: Option<&Series>,
    scfg: &SelectionConfig,
) -> Result<ThetaParams> {
    spec.check_feasible(k)?;
    if k == 1 {
        return Ok(ThetaParams::trivial());
    }
    let quantiles = data_quantiles(series, k);
    let (base_gaps, base_q) = base_start(k, &quantiles);
    let starts: Vec<ThetaParams> = (0..scfg.multistart.max(1))
        .map(|r| {
            let (gaps, q) = if r == 0 {
                (base_gaps.clone(), base_q.clone())
            } else {
                random_start(k, &base_gaps, &mut stream(derive_path(scfg.seed, &[1000 + k as u64, r as u64])))
            };
            compact_start(spec, &gaps, &q)
        })
        .collect();
    fit_compact_from(k, spec, target, &starts, &scfg.optimizer)
}

/// Compact-set fit from explicit starting points (e.g. a warm start).
pub fn fit_compact_from(
    k: usize,
    spec: &CompactSpec,
    target: &ContrastTarget,
    starts: &[ThetaParams],
    opts: &OptimOptions,
) -> Result<ThetaParams> {
    spec.check_feasible(k)?;
    if k == 1 {
        return Ok(ThetaParams::trivial());
    }
    let reparam = Reparam::new(k, spec.gap_min, spec.q_floor);
    let obj = SearchObjective {
        target,
        reparam,
        penalized: None,
        penalty_cap: None,
        compact: Some((*spec, CONSTRAINT_WEIGHT)),
    };
    let results: Vec<(Vec<f64>, OptimResult)> = starts
        .par_iter()
        .map(|s| {
            let start = if spec.contains(s) {
                s.clone()
            } else {
                let gaps: Vec<f64> = s.m().windows(2).map(|w| w[1] - w[0]).collect();
                compact_start(spec, &gaps, s.q())
            };
            let z0 = reparam.encode(&start);
            let res = obj.minimize(&z0, opts);
            let z = pull_back_to_feasible(&z0, &res.x, |z| spec.contains(&reparam.decode(z)));
            (z, res)
        })
        .collect();
    let total = results.len();
    let best = results
        .into_iter()
        .filter(|(_, r)| r.converged && r.value.is_finite())
        .map(|(z, _)| {
            let theta = reparam.decode(&z);
            let v = target.value(&theta);
            (theta, v)
        })
        .enumerate()
        .min_by(|(i, a), (j, b)| a.1.total_cmp(&b.1).then(i.cmp(j)));
    match best {
        Some((_, (theta, _))) => Ok(theta),
        None => Err(Error::OptimizationFailure {
            message: format!("none of {total} compact-set restarts converged for k = {k}"),
            diagnostics: vec![format!("{spec:?}")],
        }),
    }
}

/// [`fit_compact_target`] on an empirical grid.
pub fn fit_compact(
    k: usize,
    spec: &CompactSpec,
    grid: &EcfGrid,
    series: Option<&Series>,
    ccfg: &ContrastConfig,
    scfg: &SelectionConfig,
) -> Result<ThetaParams> {
    let target = ContrastTarget::empirical(grid, ccfg)?;
    fit_compact_target(k, spec, &target, series, scfg)
}
