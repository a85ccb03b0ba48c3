//! Sampling covariance of the contrast estimator and confidence intervals.
//!
//! The covariance of `√n(θ̂ − θ*)` is estimated by a circular moving-block
//! bootstrap: each replicate glues together random blocks of the observed
//! series (wrapping around its end), refits the compact-set estimator, and the
//! replicate estimates' sample covariance is scaled by `n`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::contrast::{quad_nodes, ContrastConfig, ContrastTarget};
use crate::ecf::{ecf_grid, Series};
use crate::error::{Error, Result};
use crate::estimate::{fit_compact_from, CompactSpec};
use crate::model::ThetaParams;
use crate::optimize::OptimOptions;
use crate::rng::{derive_seed, stream, StreamRng};

/// Smallest number of replicates accepted by [`bootstrap_sigma`].
pub const MIN_REPLICATES: usize = 50;

/// Largest tolerated fraction of failed replicate fits.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMethod {
    Bootstrap,
    /// No covariance; only the contrast Hessian was examined.
    PluginHessianOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    /// Covariance of `√n(θ̂ − θ*)` in free coordinates, row by row.
    pub sigma: Vec<Vec<f64>>,
    pub method: CovarianceMethod,
    /// Replicates that produced an estimate.
    pub replicates: usize,
    pub failed_replicates: usize,
    pub block_len: usize,
    /// Free coordinates of each successful replicate, in replicate order.
    #[serde(skip)]
    pub draws: Vec<Vec<f64>>,
}

/// Default block length `⌈n^{1/3}⌉`.
pub fn default_block_len(n: usize) -> usize {
    let root = (n as f64).cbrt();
    // Guard against cbrt(27) = 3.0000000000000004 style rounding.
    let r = root.round();
    if (root - r).abs() < 1e-9 {
        r as usize
    } else {
        root.ceil() as usize
    }
}

/// One circular moving-block resample of `series`.
pub fn circular_block_resample(series: &Series, block_len: usize, rng: &mut StreamRng) -> Series {
    let y = series.values();
    let n = y.len();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let start = rng.random_range(0..n);
        for i in 0..block_len.min(n - out.len()) {
            out.push(y[(start + i) % n]);
        }
    }
    Series::new(out).expect("resample has the original length")
}

/// Sample covariance (denominator `R − 1`) of the rows of `draws`, times `n`.
pub fn sigma_from_draws(draws: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    let d = draws.first().map_or(0, Vec::len);
    let r = draws.len() as f64;
    if draws.len() < 2 {
        return vec![vec![0.0; d]; d];
    }
    // Shifting by the first draw keeps identical draws exactly degenerate.
    let shifted: Vec<Vec<f64>> = draws
        .iter()
        .map(|x| x.iter().zip(&draws[0]).map(|(a, b)| a - b).collect())
        .collect();
    let mean: Vec<f64> = (0..d).map(|j| shifted.iter().map(|x| x[j]).sum::<f64>() / r).collect();
    let mut sigma = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in i..d {
            let c: f64 = shifted.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / (r - 1.0);
            sigma[i][j] = c * n as f64;
            sigma[j][i] = c * n as f64;
        }
    }
    sigma
}

/// Generic bootstrap driver: `resample` draws a pseudo-series and `fit` maps
/// it to an estimate. Replicate `r` uses its own stream derived from
/// `(seed, r)`, so results do not depend on scheduling.
pub fn bootstrap_with<R, F>(
    series: &Series,
    replicates: usize,
    block_len: usize,
    seed: u64,
    resample: R,
    fit: F,
) -> Result<CovarianceEstimate>
where
    R: Fn(&Series, &mut StreamRng) -> Series + Sync,
    F: Fn(&Series) -> Result<ThetaParams> + Sync,
{
    if replicates < MIN_REPLICATES {
        return Err(Error::Configuration(format!(
            "at least {MIN_REPLICATES} bootstrap replicates are required, got {replicates}"
        )));
    }
    let n = series.len();
    if block_len == 0 || block_len > n / 2 {
        return Err(Error::Configuration(format!("block length {block_len} outside 1..={}", n / 2)));
    }
    let fits: Vec<Result<ThetaParams>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream(derive_seed(seed, r as u64));
            fit(&resample(series, &mut rng))
        })
        .collect();
    let mut draws = Vec::with_capacity(replicates);
    let mut failures = Vec::new();
    for (r, f) in fits.into_iter().enumerate() {
        match f {
            Ok(theta) => draws.push(theta.free_coords()),
            Err(e) => failures.push(format!("replicate {r}: {e}")),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_FRACTION * replicates as f64 {
        return Err(Error::OptimizationFailure {
            message: format!("{} of {replicates} bootstrap fits failed", failures.len()),
            diagnostics: failures,
        });
    }
    if let Some(d) = draws.first().map(Vec::len) {
        if draws.iter().any(|x| x.len() != d) {
            return Err(Error::Numerical("replicate estimates differ in dimension".into()));
        }
    }
    Ok(CovarianceEstimate {
        sigma: sigma_from_draws(&draws, n),
        method: CovarianceMethod::Bootstrap,
        replicates: draws.len(),
        failed_replicates: failures.len(),
        block_len,
        draws,
    })
}

/// Block-bootstrap covariance of the compact-set estimator with `k`
/// populations. Each replicate is refitted from `theta_hat`.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_sigma(
    series: &Series,
    theta_hat: &ThetaParams,
    spec: &CompactSpec,
    ccfg: &ContrastConfig,
    opts: &OptimOptions,
    replicates: usize,
    block_len: usize,
    seed: u64,
) -> Result<CovarianceEstimate> {
    let k = theta_hat.k();
    spec.check_feasible(k)?;
    let rule = quad_nodes(ccfg)?;
    let starts = [theta_hat.clone()];
    bootstrap_with(
        series,
        replicates,
        block_len,
        seed,
        |s, rng| circular_block_resample(s, block_len, rng),
        |s| {
            let grid = ecf_grid(s, &rule.nodes, &rule.nodes)?;
            let target = ContrastTarget::empirical(&grid, ccfg)?;
            fit_compact_from(k, spec, &target, &starts, opts)
        },
    )
}

/// Symmetric two-sided interval for one free coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// `θ̂_j ± z_{(1+level)/2} √(Σ_jj / n)` for every free coordinate.
pub fn confidence_intervals(
    theta_hat: &ThetaParams,
    cov: &CovarianceEstimate,
    n: usize,
    level: f64,
) -> Result<Vec<Interval>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!("confidence level {level} outside (0, 1)")));
    }
    let x = theta_hat.free_coords();
    if cov.sigma.len() != x.len() {
        return Err(Error::InvalidParameter(format!(
            "covariance of size {} for {} coordinates",
            cov.sigma.len(),
            x.len()
        )));
    }
    let z = standard_normal_quantile(0.5 * (1.0 + level));
    Ok(x.iter()
        .enumerate()
        .map(|(j, &v)| {
            let half = z * (cov.sigma[j][j].max(0.0) / n as f64).sqrt();
            Interval {
                estimate: v,
                lower: v - half,
                upper: v + half,
            }
        })
        .collect())
}

pub fn standard_normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Kolmogorov–Smirnov test of normality after standardizing by the sample
/// mean and standard deviation. Returns `(D, p-value)` using the asymptotic
/// Kolmogorov law with Stephens' finite-sample correction.
pub fn ks_normality(sample: &[f64]) -> Result<(f64, f64)> {
    let n = sample.len();
    if n < 3 {
        return Err(Error::InsufficientData { needed: 3, got: n });
    }
    let nf = n as f64;
    let mean = sample.iter().sum::<f64>() / nf;
    let sd = (sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(Error::Numerical("sample has zero spread".into()));
    }
    let mut z: Vec<f64> = sample.iter().map(|v| (v - mean) / sd).collect();
    z.sort_by(f64::total_cmp);
    let normal = Normal::standard();
    let d = z
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = normal.cdf(v);
            (c - i as f64 / nf).max((i + 1) as f64 / nf - c)
        })
        .fold(0.0, f64::max);
    let root = nf.sqrt();
    Ok((d, kolmogorov_survival((root + 0.12 + 0.11 / root) * d)))
}

/// `P(K > x)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 0.3 {
        // Series below converges slowly; the survival is 1 to double precision.
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * x * x).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
