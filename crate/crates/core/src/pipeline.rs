//! End-to-end estimation run: parametric fit, optional bootstrap intervals and
//! optional noise density, collected into a self-contained JSON report with
//! CSV files for plotting.
//!
//! Every random stream is derived from the single top-level seed, and all
//! parallel reductions are ordered, so a report is reproducible bit for bit
//! regardless of the worker-pool size.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrast::{quad_nodes, ContrastConfig, ContrastTarget, WeightKind};
use crate::density::{select_p, DensityFit, SieveConfig, WeightRule};
use crate::ecf::{ecf_grid, Series};
use crate::error::{Error, Result};
use crate::estimate::{fit_compact_target, select_order_target, CompactSpec, OrderPenalty, ParamFit, SelectionConfig};
use crate::inference::{bootstrap_sigma, confidence_intervals, default_block_len, CovarianceEstimate, Interval};
use crate::model::ThetaParams;
use crate::optimize::OptimOptions;
use crate::rng::derive_seed;

/// Half-width of the contrast weight support: a number, or `"auto"` for the
/// data-driven rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HalfWidth {
    Fixed(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

impl Default for HalfWidth {
    fn default() -> Self {
        HalfWidth::Fixed(2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastSection {
    pub half_width: HalfWidth,
    pub quad_order: usize,
}

impl Default for ContrastSection {
    fn default() -> Self {
        Self {
            half_width: HalfWidth::default(),
            quad_order: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionSection {
    /// Known number of regimes; when set, the compact-set estimator is used
    /// instead of order selection.
    pub k: Option<usize>,
    pub k_max: usize,
    pub lambda_coeff: f64,
    pub order_penalty: OrderPenalty,
    pub multistart: usize,
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for SelectionSection {
    fn default() -> Self {
        let s = SelectionConfig::default();
        Self {
            k: None,
            k_max: s.k_max,
            lambda_coeff: s.lambda_coeff,
            order_penalty: s.order_penalty,
            multistart: s.multistart,
            grad_tol: s.optimizer.grad_tol,
            max_iter: s.optimizer.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub replicates: usize,
    /// `None` uses `⌈n^{1/3}⌉`.
    pub block_len: Option<usize>,
    pub level: f64,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        Self {
            replicates: 200,
            block_len: None,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensitySection {
    pub p_min: usize,
    pub p_max: usize,
    pub b0: f64,
    pub a0: f64,
    pub big_b: Option<f64>,
    pub kappa: f64,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for DensitySection {
    fn default() -> Self {
        let s = SieveConfig::default();
        Self {
            p_min: s.p_min,
            p_max: s.p_max,
            b0: s.b0,
            a0: s.a0,
            big_b: s.big_b,
            kappa: s.kappa,
            restarts: s.restarts,
            max_iter: s.max_iter,
            tol: s.tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotSection {
    /// Number of abscissae in the density curve file.
    pub points: usize,
    /// Histogram bins; `None` uses `⌈2 n^{1/3}⌉`.
    pub bins: Option<usize>,
}

impl Default for PlotSection {
    fn default() -> Self {
        Self { points: 1001, bins: None }
    }
}

/// Which optional stages run after the parametric fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub bootstrap: bool,
    pub density: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub stages: Stages,
    pub contrast: ContrastSection,
    pub selection: SelectionSection,
    pub compact: CompactSpec,
    pub bootstrap: BootstrapSection,
    pub density: DensitySection,
    pub plot: PlotSection,
    /// Record wall-clock timings in the report. Off by default because
    /// timings differ between otherwise identical runs.
    pub record_timing: bool,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Configuration(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn contrast_config(&self, series: &Series) -> Result<ContrastConfig> {
        let half_width = match self.contrast.half_width {
            HalfWidth::Fixed(a) => a,
            HalfWidth::Auto(_) => ContrastConfig::auto_half_width(series),
        };
        let cfg = ContrastConfig {
            half_width,
            quad_order: self.contrast.quad_order,
            weight: WeightKind::Uniform,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn selection_config(&self) -> SelectionConfig {
        let s = &self.selection;
        SelectionConfig {
            k_max: s.k_max,
            lambda_coeff: s.lambda_coeff,
            order_penalty: s.order_penalty.clone(),
            multistart: s.multistart,
            seed: derive_seed(self.seed, 1),
            optimizer: OptimOptions {
                grad_tol: s.grad_tol,
                max_iter: s.max_iter,
                ..OptimOptions::default()
            },
        }
    }

    pub fn sieve_config(&self) -> SieveConfig {
        let d = &self.density;
        SieveConfig {
            p_min: d.p_min,
            p_max: d.p_max,
            b0: d.b0,
            a0: d.a0,
            big_b: d.big_b,
            kappa: d.kappa,
            weight_rule: WeightRule::Linear,
            restarts: d.restarts,
            max_iter: d.max_iter,
            tol: d.tol,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.selection_config().validate()?;
        if let Some(k) = self.selection.k {
            if k == 0 {
                return Err(Error::Configuration("k must be at least 1".into()));
            }
            self.compact.check_feasible(k).map_err(|e| Error::Configuration(e.to_string()))?;
        }
        if self.stages.density {
            self.sieve_config().validate()?;
        }
        if self.stages.bootstrap && !(self.bootstrap.level > 0.0 && self.bootstrap.level < 1.0) {
            return Err(Error::Configuration("confidence level must lie in (0, 1)".into()));
        }
        if self.plot.points < 2 || self.plot.bins == Some(0) {
            return Err(Error::Configuration("plot grid needs at least 2 points and 1 bin".into()));
        }
        Ok(())
    }
}

/// Identity of the analysed data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
    pub n: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Parses a series: one value per line, blank lines ignored, and an optional
/// non-numeric header on the first line.
pub fn parse_series(text: &str, origin: &str) -> Result<Series> {
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.parse::<f64>() {
            Ok(v) => values.push(v),
            Err(_) if i == 0 => continue,
            Err(_) => {
                return Err(Error::Parse(format!("{origin}, line {}: not a number: {line:?}", i + 1)));
            }
        }
    }
    if values.is_empty() {
        return Err(Error::io(
            origin,
            std::io::Error::new(std::io::ErrorKind::InvalidData, "file contains no observations"),
        ));
    }
    if values.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: values.len() });
    }
    Series::new(values).map_err(|e| Error::Parse(format!("{origin}: {e}")))
}

/// Reads a series file and fingerprints its bytes.
pub fn read_series(path: &Path) -> Result<(Series, InputDigest)> {
    let name = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(&name, e))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| Error::Parse(format!("{name}: not valid UTF-8")))?;
    let series = parse_series(&text, &name)?;
    let digest = InputDigest {
        path: name,
        sha256: sha256_hex(&bytes),
        n: series.len(),
    };
    Ok((series, digest))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    /// Penalized order selection then the restricted refit.
    OrderSelection,
    /// Known number of regimes, compact-set estimator.
    KnownOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamResult {
    pub mode: FitMode,
    pub k_hat: usize,
    pub theta_hat: ThetaParams,
    /// Contrast at `θ̂`.
    pub mn_value: f64,
    pub half_width: f64,
    /// Full order-selection record, when it ran.
    pub selection: Option<ParamFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub param_ms: f64,
    pub bootstrap_ms: f64,
    pub density_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl Default for ToolInfo {
    fn default() -> Self {
        Self {
            name: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub tool: ToolInfo,
    pub input: InputDigest,
    pub config: PipelineConfig,
    pub param: ParamResult,
    pub covariance: Option<CovarianceEstimate>,
    pub intervals: Option<Vec<Interval>>,
    pub density: Option<DensityFit>,
    pub timing: Option<Timings>,
}

impl FitReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("report: {e}")))
    }
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs the configured stages on `series`.
pub fn run_pipeline(series: &Series, input: InputDigest, cfg: &PipelineConfig) -> Result<FitReport> {
    cfg.validate()?;
    let ccfg = cfg.contrast_config(series)?;
    let scfg = cfg.selection_config();
    let rule = quad_nodes(&ccfg)?;
    let grid = ecf_grid(series, &rule.nodes, &rule.nodes)?;
    let target = ContrastTarget::empirical(&grid, &ccfg)?;

    let t0 = Instant::now();
    let param = match cfg.selection.k {
        Some(k) => {
            let theta = fit_compact_target(k, &cfg.compact, &target, Some(series), &scfg)?;
            ParamResult {
                mode: FitMode::KnownOrder,
                k_hat: k,
                mn_value: target.value(&theta),
                theta_hat: theta,
                half_width: ccfg.half_width,
                selection: None,
            }
        }
        None => {
            let fit = select_order_target(&target, Some(series), series.len(), &scfg)?;
            ParamResult {
                mode: FitMode::OrderSelection,
                k_hat: fit.k_hat,
                theta_hat: fit.theta_hat.clone(),
                mn_value: fit.mn_value,
                half_width: ccfg.half_width,
                selection: Some(fit),
            }
        }
    };
    let param_ms = elapsed_ms(t0);

    let t0 = Instant::now();
    let (covariance, intervals) = if cfg.stages.bootstrap {
        let block_len = cfg.bootstrap.block_len.unwrap_or_else(|| default_block_len(series.len()));
        let cov = bootstrap_sigma(
            series,
            &param.theta_hat,
            &cfg.compact,
            &ccfg,
            &scfg.optimizer,
            cfg.bootstrap.replicates,
            block_len,
            derive_seed(cfg.seed, 2),
        )?;
        let ci = confidence_intervals(&param.theta_hat, &cov, series.len(), cfg.bootstrap.level)?;
        (Some(cov), Some(ci))
    } else {
        (None, None)
    };
    let bootstrap_ms = elapsed_ms(t0);

    let t0 = Instant::now();
    let density = if cfg.stages.density {
        Some(select_p(series, &param.theta_hat, &cfg.sieve_config(), derive_seed(cfg.seed, 3))?)
    } else {
        None
    };
    let density_ms = elapsed_ms(t0);

    Ok(FitReport {
        tool: ToolInfo::default(),
        input,
        config: cfg.clone(),
        param,
        covariance,
        intervals,
        density,
        timing: cfg.record_timing.then_some(Timings {
            param_ms,
            bootstrap_ms,
            density_ms,
        }),
    })
}

/// Name of the density curve file written by [`emit_plot_data`].
pub const DENSITY_FILE: &str = "density.csv";
/// Name of the model-selection table written by [`emit_plot_data`].
pub const SELECTION_FILE: &str = "dn_table.csv";

fn histogram(series: &Series, bins: usize) -> (f64, f64, Vec<f64>) {
    let y = series.values();
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in y {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let scale = 1.0 / (y.len() as f64 * width);
    (lo, width, counts.iter().map(|&c| c as f64 * scale).collect())
}

/// Writes the density curves and the `D_n` table into `dir`. Returns the
/// written paths; nothing is written when the report has no density fit.
pub fn emit_plot_data(report: &FitReport, series: &Series, dir: &Path) -> Result<Vec<PathBuf>> {
    let Some(fit) = &report.density else {
        return Ok(Vec::new());
    };
    let name = dir.display().to_string();
    fs::create_dir_all(dir).map_err(|e| Error::io(&name, e))?;

    let f = &fit.f_hat;
    let marginal = fit.marginal();
    let y = series.values();
    let u_max = f.u.iter().copied().fold(0.0, f64::max);
    let m_max = fit.theta_hat.m().last().copied().unwrap_or(0.0);
    let y_min = y.iter().copied().fold(f64::INFINITY, f64::min);
    let y_max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let a_min = f.alpha.iter().copied().fold(f64::INFINITY, f64::min);
    let a_max = f.alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = (y_min - m_max).min(a_min - 8.0 * u_max);
    let hi = y_max.max(a_max + m_max + 8.0 * u_max);
    let points = report.config.plot.points;
    let bins = report
        .config
        .plot
        .bins
        .unwrap_or_else(|| (2.0 * (y.len() as f64).cbrt()).ceil() as usize);
    let (h_lo, h_width, h_density) = histogram(series, bins);

    let mut curve = String::from("# x: abscissa; f_hat: fitted noise density; s_hat: fitted marginal density of one observation; hist: histogram density of the observations\nx,f_hat,s_hat,hist\n");
    for i in 0..points {
        let x = lo + (hi - lo) * i as f64 / (points - 1) as f64;
        let rel = (x - h_lo) / h_width;
        let hist = if rel >= 0.0 && rel <= bins as f64 {
            h_density[(rel as usize).min(bins - 1)]
        } else {
            0.0
        };
        let _ = writeln!(curve, "{x},{},{},{hist}", f.eval(x), marginal.eval(x));
    }
    let mut table = String::from("# p: sieve size; ell_n: maximized marginal log-likelihood per observation; pen: penalty; d_n: penalized criterion\np,ell_n,pen,d_n\n");
    for row in &fit.table {
        let _ = writeln!(table, "{},{},{},{}", row.p, row.ell_n, row.pen, row.d_n);
    }
    let mut written = Vec::new();
    for (file, body) in [(DENSITY_FILE, curve), (SELECTION_FILE, table)] {
        let path = dir.join(file);
        fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))?;
        written.push(path);
    }
    Ok(written)
}
