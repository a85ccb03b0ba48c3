//! Weighted L² characteristic-function contrast.
//!
//! For a target pair characteristic function `Ψ` with axis marginals `ψ1`,
//! `ψ2`, the contrast of a candidate `θ` is
//!
//! ```text
//! ∫ | Ψ(t1,t2) φ_{θ,1}(t1) φ_{θ,2}(t2) − Φ_θ(t1,t2) ψ1(t1) ψ2(t2) |² ρ(t1) ρ(t2) w(t1,t2) dt
//! ```
//!
//! The empirical contrast takes `Ψ = Φ̂_n` and `ρ ≡ 1`. The population contrast
//! (oracle mode, used for testing and simulation only) takes `Ψ = Φ_{θ*}` and
//! `ρ = |φ_F|²`, which is the same integral as substituting the population
//! characteristic function of the observations.
//!
//! The integral is discretized by a tensor Gauss–Legendre rule with the weight
//! density folded into the quadrature weights. Gradients are exact gradients of
//! the discretized objective.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ecf::{EcfGrid, Series};
use crate::error::{Error, Result};
use crate::model::{free_dim, marginal_cf, pair_cf, Axis, ComplexValue, ThetaParams};

/// Weight density on the square support `[−a, a]²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    #[default]
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    /// Half-width `a` of the support, in frequency units.
    pub half_width: f64,
    /// Gauss–Legendre nodes per axis.
    pub quad_order: usize,
    #[serde(default)]
    pub weight: WeightKind,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            half_width: 2.0,
            quad_order: 32,
            weight: WeightKind::Uniform,
        }
    }
}

impl ContrastConfig {
    pub fn new(half_width: f64, quad_order: usize) -> Result<Self> {
        let cfg = Self {
            half_width,
            quad_order,
            weight: WeightKind::Uniform,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.half_width > 0.0) || !self.half_width.is_finite() {
            return Err(Error::Configuration(format!(
                "weight half-width must be positive, got {}",
                self.half_width
            )));
        }
        if self.quad_order < 2 {
            return Err(Error::Configuration(format!(
                "quadrature order must be at least 2, got {}",
                self.quad_order
            )));
        }
        Ok(())
    }

    /// Data-driven half-width `2π / spread`, clamped to `[0.5, 5]`, where the
    /// translation spread is approximated by the 10%–90% quantile range of the
    /// observations.
    pub fn auto_half_width(series: &Series) -> f64 {
        let spread = series.quantile(0.9) - series.quantile(0.1);
        if spread > 0.0 {
            (2.0 * std::f64::consts::PI / spread).clamp(0.5, 5.0)
        } else {
            5.0
        }
    }
}

/// One-dimensional quadrature rule; the tensor weight of node `(a, b)` is
/// `weights[a] * weights[b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadRule {
    pub fn tensor_weight(&self, a: usize, b: usize) -> f64 {
        self.weights[a] * self.weights[b]
    }
}

/// Gauss–Legendre abscissae and weights on `[−1, 1]`, sorted ascending.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        dp = if d != 0.0 { d } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for j in 2..=n {
        let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Quadrature rule for the weight density: nodes on `[−a, a]`, weights summing
/// to one per axis (uniform density `1/(2a)` folded in).
pub fn quad_nodes(cfg: &ContrastConfig) -> Result<QuadRule> {
    cfg.validate()?;
    let (x, w) = gauss_legendre(cfg.quad_order);
    let a = cfg.half_width;
    Ok(QuadRule {
        nodes: x.iter().map(|v| v * a).collect(),
        weights: w.iter().map(|v| v * 0.5).collect(),
    })
}

/// Characteristic function of a known noise law. Oracle mode only.
#[derive(Clone)]
pub struct NoiseCf {
    name: String,
    cf: Arc<dyn Fn(f64) -> ComplexValue + Send + Sync>,
}

impl std::fmt::Debug for NoiseCf {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NoiseCf").field("name", &self.name).finish()
    }
}

impl NoiseCf {
    pub fn new<F>(name: impl Into<String>, cf: F) -> Self
    where
        F: Fn(f64) -> ComplexValue + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            cf: Arc::new(cf),
        }
    }

    pub fn gaussian(sigma: f64) -> Self {
        Self::new(format!("gaussian({sigma})"), move |t| {
            Complex64::new((-0.5 * sigma * sigma * t * t).exp(), 0.0)
        })
    }

    pub fn laplace(scale: f64) -> Self {
        Self::new(format!("laplace({scale})"), move |t| {
            Complex64::new(1.0 / (1.0 + scale * scale * t * t), 0.0)
        })
    }

    /// `w N(mean1, sd1²) + (1−w) N(mean2, sd2²)`.
    pub fn gaussian_mixture(weight: f64, mean1: f64, sd1: f64, mean2: f64, sd2: f64) -> Self {
        Self::new("gaussian_mixture", move |t| {
            let c1 = Complex64::from_polar((-0.5 * sd1 * sd1 * t * t).exp(), mean1 * t);
            let c2 = Complex64::from_polar((-0.5 * sd2 * sd2 * t * t).exp(), mean2 * t);
            c1 * weight + c2 * (1.0 - weight)
        })
    }

    pub fn eval(&self, t: f64) -> ComplexValue {
        (self.cf)(t)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// Contrast value and its partial derivatives in the full coordinates
/// (`m_1..m_k`, every `Q_ij` treated as independent).
#[derive(Debug, Clone)]
pub(crate) struct FullEval {
    pub value: f64,
    pub grad_m: Vec<f64>,
    pub grad_q: Vec<f64>,
}

impl FullEval {
    /// Projects onto the free coordinates (drops `m_1`, eliminates `Q_kk`).
    pub fn free_gradient(&self) -> Vec<f64> {
        let k = self.grad_m.len();
        let last = self.grad_q[k * k - 1];
        let mut g = Vec::with_capacity(free_dim(k));
        g.extend_from_slice(&self.grad_m[1..]);
        g.extend(self.grad_q[..k * k - 1].iter().map(|v| v - last));
        g
    }
}

/// Tabulated target of a contrast: everything the integrand needs except `θ`.
#[derive(Debug, Clone)]
pub struct ContrastTarget {
    rule: QuadRule,
    /// Row-major `Ψ(t_a, t_b)`.
    joint: Vec<ComplexValue>,
    axis1: Vec<ComplexValue>,
    axis2: Vec<ComplexValue>,
    /// Per-axis node weight including any damping factor.
    w1: Vec<f64>,
    w2: Vec<f64>,
}

impl ContrastTarget {
    /// Empirical target built from a tabulated `Φ̂_n`. The grid nodes must be
    /// the configuration's quadrature nodes.
    pub fn empirical(grid: &EcfGrid, cfg: &ContrastConfig) -> Result<Self> {
        let rule = quad_nodes(cfg)?;
        let matches = |nodes: &[f64]| {
            nodes.len() == rule.nodes.len()
                && nodes
                    .iter()
                    .zip(&rule.nodes)
                    .all(|(a, b)| (a - b).abs() <= 1e-13 * (1.0 + b.abs()))
        };
        if !matches(&grid.nodes1) || !matches(&grid.nodes2) {
            return Err(Error::Configuration(
                "ECF grid nodes do not coincide with the quadrature nodes".into(),
            ));
        }
        Ok(Self {
            w1: rule.weights.clone(),
            w2: rule.weights.clone(),
            joint: grid.values.clone(),
            axis1: grid.axis1.clone(),
            axis2: grid.axis2.clone(),
            rule,
        })
    }

    /// Population target for a known `θ*` and noise law.
    pub fn population(theta_star: &ThetaParams, noise: &NoiseCf, cfg: &ContrastConfig) -> Result<Self> {
        let rule = quad_nodes(cfg)?;
        let t = &rule.nodes;
        let damp: Vec<f64> = t.iter().map(|&v| noise.eval(v).norm_sqr()).collect();
        let mut joint = Vec::with_capacity(t.len() * t.len());
        for &t1 in t {
            for &t2 in t {
                joint.push(pair_cf(theta_star, t1, t2));
            }
        }
        Ok(Self {
            axis1: t.iter().map(|&v| marginal_cf(theta_star, v, Axis::First)).collect(),
            axis2: t.iter().map(|&v| marginal_cf(theta_star, v, Axis::Second)).collect(),
            w1: rule.weights.iter().zip(&damp).map(|(w, d)| w * d).collect(),
            w2: rule.weights.iter().zip(&damp).map(|(w, d)| w * d).collect(),
            joint,
            rule,
        })
    }

    pub fn rule(&self) -> &QuadRule {
        &self.rule
    }

    /// An ECF grid on this target's quadrature nodes.
    pub fn grid_for(&self, series: &Series) -> Result<EcfGrid> {
        crate::ecf::ecf_grid(series, &self.rule.nodes, &self.rule.nodes)
    }

    pub fn value(&self, theta: &ThetaParams) -> f64 {
        self.eval_raw(theta.m(), theta.q(), false).value
    }

    /// Gradient with respect to the free coordinates.
    pub fn gradient(&self, theta: &ThetaParams) -> Vec<f64> {
        self.eval_raw(theta.m(), theta.q(), true).free_gradient()
    }

    pub(crate) fn eval_full(&self, theta: &ThetaParams, want_grad: bool) -> FullEval {
        self.eval_raw(theta.m(), theta.q(), want_grad)
    }

    fn eval_raw(&self, m: &[f64], q: &[f64], want_grad: bool) -> FullEval {
        let k = m.len();
        let nq = self.rule.nodes.len();
        let t = &self.rule.nodes;
        let mut rows = vec![0.0; k];
        let mut cols = vec![0.0; k];
        for i in 0..k {
            for j in 0..k {
                rows[i] += q[i * k + j];
                cols[j] += q[i * k + j];
            }
        }
        // Per-node latent factors: e[a*k+j] = exp(i t_a m_j).
        let mut e = Vec::with_capacity(nq * k);
        for &ta in t {
            for &mj in m {
                e.push(Complex64::cis(ta * mj));
            }
        }
        let mut phi1 = vec![Complex64::new(0.0, 0.0); nq];
        let mut phi2 = vec![Complex64::new(0.0, 0.0); nq];
        // u[a*k+j] = Σ_l Q_lj e_al (first-axis side), w[b*k+i] = Σ_j Q_ij e_bj.
        let mut u = vec![Complex64::new(0.0, 0.0); nq * k];
        let mut w = vec![Complex64::new(0.0, 0.0); nq * k];
        for a in 0..nq {
            let ea = &e[a * k..(a + 1) * k];
            for j in 0..k {
                phi1[a] += ea[j] * rows[j];
                phi2[a] += ea[j] * cols[j];
                for l in 0..k {
                    u[a * k + j] += ea[l] * q[l * k + j];
                    w[a * k + j] += ea[l] * q[j * k + l];
                }
            }
        }

        let mut value = 0.0;
        let mut grad_m = vec![0.0; if want_grad { k } else { 0 }];
        let mut grad_q = vec![0.0; if want_grad { k * k } else { 0 }];
        let iu = Complex64::i();
        for a in 0..nq {
            let ea = &e[a * k..(a + 1) * k];
            let ua = &u[a * k..(a + 1) * k];
            let (t1, p1, s1) = (t[a], phi1[a], self.axis1[a]);
            for b in 0..nq {
                let eb = &e[b * k..(b + 1) * k];
                let wb = &w[b * k..(b + 1) * k];
                let (t2, p2, s2) = (t[b], phi2[b], self.axis2[b]);
                let psi = self.joint[a * nq + b];
                let pair: Complex64 = ea.iter().zip(wb).map(|(x, y)| x * y).sum();
                let s12 = s1 * s2;
                let g = psi * p1 * p2 - pair * s12;
                let weight = self.w1[a] * self.w2[b];
                value += weight * g.norm_sqr();
                if !want_grad {
                    continue;
                }
                let cg = g.conj() * (2.0 * weight);
                let psi_p2 = cg * psi * p2;
                let psi_p1 = cg * psi * p1;
                let cs = cg * s12;
                for j in 0..k {
                    let d_phi1 = iu * t1 * rows[j] * ea[j];
                    let d_phi2 = iu * t2 * cols[j] * eb[j];
                    let d_pair = iu * t1 * ea[j] * wb[j] + iu * t2 * eb[j] * ua[j];
                    grad_m[j] += (psi_p2 * d_phi1 + psi_p1 * d_phi2 - cs * d_pair).re;
                }
                for i in 0..k {
                    let ai = (psi_p2 * ea[i]).re;
                    let csi = cs * ea[i];
                    for j in 0..k {
                        grad_q[i * k + j] += ai + (psi_p1 * eb[j]).re - (csi * eb[j]).re;
                    }
                }
            }
        }
        FullEval {
            value,
            grad_m,
            grad_q,
        }
    }

    /// Per-node complex derivative `∂G/∂θ` (free coordinates) of the integrand
    /// `G = Ψ φ_{θ,1} φ_{θ,2} − Φ_θ ψ1 ψ2`, together with the node weight.
    fn integrand_gradients(&self, theta: &ThetaParams) -> Vec<(f64, Vec<ComplexValue>)> {
        let t = &self.rule.nodes;
        let nq = t.len();
        let mut out = Vec::with_capacity(nq * nq);
        for a in 0..nq {
            let p1 = marginal_cf(theta, t[a], Axis::First);
            for b in 0..nq {
                let p2 = marginal_cf(theta, t[b], Axis::Second);
                let grads = crate::model::cf_gradients(theta, t[a], t[b]);
                let psi = self.joint[a * nq + b];
                let s12 = self.axis1[a] * self.axis2[b];
                let h = (0..grads.pair.len())
                    .map(|c| psi * (grads.first[c] * p2 + p1 * grads.second[c]) - grads.pair[c] * s12)
                    .collect();
                out.push((self.w1[a] * self.w2[b], h));
            }
        }
        out
    }

    /// Gauss–Newton form `2 Σ w Re(H Hᴴ)`; equals the Hessian wherever the
    /// integrand vanishes identically, i.e. at the true parameter of a
    /// population target.
    pub fn gauss_newton_hessian(&self, theta: &ThetaParams) -> DMatrix<f64> {
        let d = free_dim(theta.k());
        let mut hess = DMatrix::<f64>::zeros(d, d);
        for (weight, h) in self.integrand_gradients(theta) {
            for r in 0..d {
                for c in r..d {
                    // H(−t) = conj(H(t)), so H(t) H(−t)ᵀ = H Hᴴ.
                    let v = 2.0 * weight * (h[r] * h[c].conj()).re;
                    hess[(r, c)] += v;
                }
            }
        }
        for r in 0..d {
            for c in 0..r {
                hess[(r, c)] = hess[(c, r)];
            }
        }
        hess
    }
}

/// Empirical contrast `M_n(θ)`.
pub fn empirical_contrast(theta: &ThetaParams, grid: &EcfGrid, cfg: &ContrastConfig) -> Result<f64> {
    Ok(ContrastTarget::empirical(grid, cfg)?.value(theta))
}

/// Gradient of the discretized `M_n` in free coordinates.
pub fn empirical_contrast_gradient(
    theta: &ThetaParams,
    grid: &EcfGrid,
    cfg: &ContrastConfig,
) -> Result<Vec<f64>> {
    Ok(ContrastTarget::empirical(grid, cfg)?.gradient(theta))
}

/// Population contrast `M(θ)` for a known `θ*` and noise law.
pub fn population_contrast(
    theta: &ThetaParams,
    theta_star: &ThetaParams,
    noise: &NoiseCf,
    cfg: &ContrastConfig,
) -> Result<f64> {
    Ok(ContrastTarget::population(theta_star, noise, cfg)?.value(theta))
}

/// Closed-form Hessian of the population contrast at `θ*`:
/// `2 ∫ H(t) H(−t)ᵀ |φ_F(t1) φ_F(t2)|² w(t) dt`.
pub fn population_hessian(
    theta_star: &ThetaParams,
    noise: &NoiseCf,
    cfg: &ContrastConfig,
) -> Result<DMatrix<f64>> {
    Ok(ContrastTarget::population(theta_star, noise, cfg)?.gauss_newton_hessian(theta_star))
}

/// Default step for [`empirical_hessian_fd`].
pub const HESSIAN_FD_STEP: f64 = 1e-4;

/// Hessian of `M_n` by central differences of the analytic gradient,
/// symmetrized as `(H + Hᵀ)/2`.
pub fn empirical_hessian_fd(
    theta: &ThetaParams,
    grid: &EcfGrid,
    cfg: &ContrastConfig,
    step: f64,
) -> Result<DMatrix<f64>> {
    let target = ContrastTarget::empirical(grid, cfg)?;
    Ok(hessian_by_gradient_differences(&target, theta, step))
}

pub(crate) fn hessian_by_gradient_differences(
    target: &ContrastTarget,
    theta: &ThetaParams,
    step: f64,
) -> DMatrix<f64> {
    let k = theta.k();
    let x = theta.free_coords();
    let d = x.len();
    let mut h = DMatrix::<f64>::zeros(d, d);
    for c in 0..d {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[c] += step;
        xm[c] -= step;
        let gp = target.gradient(&ThetaParams::from_free_coords(k, &xp));
        let gm = target.gradient(&ThetaParams::from_free_coords(k, &xm));
        for r in 0..d {
            h[(r, c)] = (gp[r] - gm[r]) / (2.0 * step);
        }
    }
    (&h + h.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn reference_theta() -> ThetaParams {
        ThetaParams::new(vec![0.0, 2.0], &[vec![0.45, 0.05], vec![0.05, 0.45]]).unwrap()
    }

    #[test]
    fn two_point_rule() {
        let cfg = ContrastConfig::new(1.0, 2).unwrap();
        let rule = quad_nodes(&cfg).unwrap();
        let r = 1.0 / 3.0_f64.sqrt();
        assert_abs_diff_eq!(rule.nodes[0], -r, epsilon = 1e-15);
        assert_abs_diff_eq!(rule.nodes[1], r, epsilon = 1e-15);
        assert_abs_diff_eq!(rule.weights[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(rule.weights[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn tensor_weights_integrate_polynomials() {
        let cfg = ContrastConfig::new(1.0, 32).unwrap();
        let rule = quad_nodes(&cfg).unwrap();
        let mut total = 0.0;
        let mut second = 0.0;
        for a in 0..32 {
            for b in 0..32 {
                total += rule.tensor_weight(a, b);
                second += rule.tensor_weight(a, b) * rule.nodes[a].powi(2);
            }
        }
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(second, 1.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn config_validation() {
        assert!(ContrastConfig::new(0.0, 32).is_err());
        assert!(ContrastConfig::new(1.0, 1).is_err());
    }

    #[test]
    fn single_population_constant_integrand() {
        // y = (0, 0): Φ̂ ≡ 1/2, so |1/2 − 1/4|² = 1/16 everywhere.
        let s = Series::new(vec![0.0, 0.0]).unwrap();
        let cfg = ContrastConfig::new(2.0, 8).unwrap();
        let rule = quad_nodes(&cfg).unwrap();
        let grid = crate::ecf::ecf_grid(&s, &rule.nodes, &rule.nodes).unwrap();
        let v = empirical_contrast(&ThetaParams::trivial(), &grid, &cfg).unwrap();
        assert_abs_diff_eq!(v, 1.0 / 16.0, epsilon = 1e-15);
        let g = empirical_contrast_gradient(&ThetaParams::trivial(), &grid, &cfg).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn node_mismatch_is_a_configuration_error() {
        let s = Series::new(vec![0.0, 1.0, 2.0]).unwrap();
        let grid = crate::ecf::ecf_grid(&s, &[0.1, 0.2], &[0.1, 0.2]).unwrap();
        let cfg = ContrastConfig::new(1.0, 2).unwrap();
        let err = empirical_contrast(&ThetaParams::trivial(), &grid, &cfg);
        assert!(matches!(err, Err(Error::Configuration(_))));
    }

    #[test]
    fn oracle_vanishes_at_truth_and_with_support() {
        let theta = reference_theta();
        let noise = NoiseCf::gaussian(1.0);
        let cfg = ContrastConfig::new(2.0, 32).unwrap();
        assert!(population_contrast(&theta, &theta, &noise, &cfg).unwrap() <= 1e-20);

        let other = ThetaParams::new(vec![0.0, 1.5], &theta.q_rows()).unwrap();
        let at = |a: f64| {
            population_contrast(&other, &theta, &noise, &ContrastConfig::new(a, 32).unwrap()).unwrap()
        };
        let big = at(2.0);
        assert!(big > 0.0);
        assert!(at(0.01) < 1e-6 * big);
    }

    #[test]
    fn trivial_hessian_is_empty() {
        let h = population_hessian(&ThetaParams::trivial(), &NoiseCf::gaussian(1.0), &ContrastConfig::default())
            .unwrap();
        assert_eq!(h.nrows(), 0);
    }
}
