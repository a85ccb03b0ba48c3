//! Ground-truth generator for hidden Markov translation mixtures
//! `Y_i = m_{S_i} + ε_i` with a Markov regime chain and iid noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::contrast::NoiseCf;
use crate::ecf::Series;
use crate::error::{Error, Result};
use crate::model::{canonicalize, ThetaParams};
use crate::rng::{stream, StreamRng};

/// Noise families. Every family has exponentially decaying tails, so
/// `∫ f^{1−δ} < ∞` holds for any `δ ∈ (0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseLaw {
    Gaussian { sigma: f64 },
    Laplace { scale: f64 },
    /// `weight · N(mean1, sd1²) + (1 − weight) · N(mean2, sd2²)`.
    GaussianMixture {
        weight: f64,
        mean1: f64,
        sd1: f64,
        mean2: f64,
        sd2: f64,
    },
}

fn normal_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

impl NoiseLaw {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseLaw::Gaussian { sigma } => sigma >= 0.0 && sigma.is_finite(),
            NoiseLaw::Laplace { scale } => scale > 0.0 && scale.is_finite(),
            NoiseLaw::GaussianMixture {
                weight, sd1, sd2, mean1, mean2,
            } => {
                (0.0..=1.0).contains(&weight)
                    && sd1 > 0.0
                    && sd2 > 0.0
                    && mean1.is_finite()
                    && mean2.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Configuration(format!("invalid noise law {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut StreamRng) -> f64 {
        match *self {
            NoiseLaw::Gaussian { sigma } => {
                if sigma == 0.0 {
                    0.0
                } else {
                    Normal::new(0.0, sigma).expect("validated").sample(rng)
                }
            }
            NoiseLaw::Laplace { scale } => {
                let u: f64 = rng.random::<f64>() - 0.5;
                -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            NoiseLaw::GaussianMixture {
                weight, mean1, sd1, mean2, sd2,
            } => {
                let (mean, sd) = if rng.random::<f64>() < weight {
                    (mean1, sd1)
                } else {
                    (mean2, sd2)
                };
                Normal::new(mean, sd).expect("validated").sample(rng)
            }
        }
    }

    /// Density; `None` for the degenerate zero-variance Gaussian.
    pub fn density(&self, x: f64) -> Option<f64> {
        match *self {
            NoiseLaw::Gaussian { sigma } => (sigma > 0.0).then(|| normal_pdf(x, 0.0, sigma)),
            NoiseLaw::Laplace { scale } => Some((-x.abs() / scale).exp() / (2.0 * scale)),
            NoiseLaw::GaussianMixture {
                weight, mean1, sd1, mean2, sd2,
            } => Some(weight * normal_pdf(x, mean1, sd1) + (1.0 - weight) * normal_pdf(x, mean2, sd2)),
        }
    }

    pub fn cf(&self) -> NoiseCf {
        match *self {
            NoiseLaw::Gaussian { sigma } => NoiseCf::gaussian(sigma),
            NoiseLaw::Laplace { scale } => NoiseCf::laplace(scale),
            NoiseLaw::GaussianMixture {
                weight, mean1, sd1, mean2, sd2,
            } => NoiseCf::gaussian_mixture(weight, mean1, sd1, mean2, sd2),
        }
    }
}

/// Law of the first regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitLaw {
    #[default]
    Stationary,
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmSimConfig {
    /// Row-stochastic transition matrix.
    pub transition: Vec<Vec<f64>>,
    pub translations: Vec<f64>,
    pub noise: NoiseLaw,
    #[serde(default)]
    pub init: InitLaw,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

impl HmmSimConfig {
    pub fn validate(&self) -> Result<()> {
        validate_transition(&self.transition)?;
        if self.translations.len() != self.transition.len() {
            return Err(Error::Configuration(format!(
                "{} translations for {} regimes",
                self.translations.len(),
                self.transition.len()
            )));
        }
        if self.translations.iter().any(|v| !v.is_finite()) {
            return Err(Error::Configuration("non-finite translation".into()));
        }
        if self.n < 2 {
            return Err(Error::Configuration("n must be at least 2".into()));
        }
        if let InitLaw::Custom(p) = &self.init {
            if p.len() != self.transition.len()
                || p.iter().any(|&v| !(v >= 0.0))
                || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return Err(Error::Configuration("invalid initial law".into()));
            }
        }
        self.noise.validate()
    }

    /// Canonical true parameter: translations and the stationary pair law.
    pub fn theta_star(&self) -> Result<ThetaParams> {
        canonicalize(&self.translations, &q_star(&self.transition)?)
    }
}

fn validate_transition(p: &[Vec<f64>]) -> Result<()> {
    let k = p.len();
    if k == 0 || p.iter().any(|r| r.len() != k) {
        return Err(Error::Configuration("transition matrix must be square and nonempty".into()));
    }
    for (i, row) in p.iter().enumerate() {
        if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Configuration(format!("row {i} has an invalid entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Configuration(format!("row {i} sums to {s}")));
        }
    }
    Ok(())
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = a.len();
    (0..k)
        .map(|i| (0..k).map(|j| (0..k).map(|l| a[i][l] * b[l][j]).sum()).collect())
        .collect()
}

/// Stationary law of an irreducible aperiodic chain.
///
/// Repeatedly squares `P` until every row of `P^(2^r)` agrees; a chain whose
/// powers never reach rank one (reducible or periodic) is rejected.
pub fn stationary_dist(p: &[Vec<f64>]) -> Result<Vec<f64>> {
    validate_transition(p)?;
    let k = p.len();
    let mut power = p.to_vec();
    let mut converged = false;
    for _ in 0..64 {
        power = mat_mul(&power, &power);
        let spread = (0..k)
            .map(|j| {
                let col = power.iter().map(|r| r[j]);
                let hi = col.clone().fold(f64::MIN, f64::max);
                let lo = col.fold(f64::MAX, f64::min);
                hi - lo
            })
            .fold(0.0, f64::max);
        if spread < 1e-14 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence(
            "powers of the transition matrix do not converge (reducible or periodic chain)".into(),
        ));
    }
    let mut mu: Vec<f64> = (0..k).map(|j| power.iter().map(|r| r[j]).sum::<f64>() / k as f64).collect();
    for _ in 0..4 {
        let next: Vec<f64> = (0..k).map(|j| (0..k).map(|i| mu[i] * p[i][j]).sum()).collect();
        let total: f64 = next.iter().sum();
        mu = next.iter().map(|v| v / total).collect();
    }
    let residual = (0..k)
        .map(|j| ((0..k).map(|i| mu[i] * p[i][j]).sum::<f64>() - mu[j]).abs())
        .fold(0.0, f64::max);
    if residual > 1e-12 {
        return Err(Error::NonConvergence(format!("stationary residual {residual:e}")));
    }
    Ok(mu)
}

/// Stationary pair law `Q*_ij = μ_i P_ij`.
pub fn q_star(p: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mu = stationary_dist(p)?;
    Ok(p.iter()
        .zip(&mu)
        .map(|(row, &m)| row.iter().map(|&v| m * v).collect())
        .collect())
}

fn draw_index(weights: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Draws `(Y, S)`. The state path is returned for diagnostics only.
pub fn sample(cfg: &HmmSimConfig) -> Result<(Series, Vec<usize>)> {
    sample_with(cfg, &mut stream(cfg.seed))
}

pub fn sample_with(cfg: &HmmSimConfig, rng: &mut StreamRng) -> Result<(Series, Vec<usize>)> {
    cfg.validate()?;
    let init = match &cfg.init {
        InitLaw::Stationary => stationary_dist(&cfg.transition)?,
        InitLaw::Custom(p) => p.clone(),
    };
    let mut states = Vec::with_capacity(cfg.n);
    let mut s = draw_index(&init, rng);
    states.push(s);
    for _ in 1..cfg.n {
        s = draw_index(&cfg.transition[s], rng);
        states.push(s);
    }
    let y = states
        .iter()
        .map(|&s| cfg.translations[s] + cfg.noise.sample(rng))
        .collect();
    Ok((Series::new(y)?, states))
}
