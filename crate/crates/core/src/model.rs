//! Parametric part of a translation mixture: the population count `k`, the
//! ordered translations `m` (with `m[0] = 0`) and the joint law `Q` of two
//! consecutive latent regimes.
//!
//! Free coordinates follow the layout `(m_2, ..., m_k, Q_11, ..., Q_kk-1)`:
//! the first translation is pinned at zero and `Q_kk` is eliminated as one
//! minus the sum of the other entries. Every gradient in the crate uses this
//! layout.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Carrier for characteristic-function values.
pub type ComplexValue = Complex64;

/// Minimum `|det Q|` for interior membership.
pub const INTERIOR_DET_MIN: f64 = 1e-12;
/// Minimum consecutive translation gap for interior membership.
pub const INTERIOR_GAP_MIN: f64 = 1e-9;

const SUM_TOL: f64 = 1e-9;

/// Which marginal of the pair law a characteristic function refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Law of the first regime of a pair (row sums of `Q`).
    First,
    /// Law of the second regime of a pair (column sums of `Q`).
    Second,
}

/// Parametric part `θ = (k, m, Q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ThetaJson", into = "ThetaJson")]
pub struct ThetaParams {
    k: usize,
    m: Vec<f64>,
    /// Row-major `k × k`.
    q: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ThetaJson {
    k: usize,
    m: Vec<f64>,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
}

impl TryFrom<ThetaJson> for ThetaParams {
    type Error = Error;

    fn try_from(j: ThetaJson) -> Result<Self> {
        if j.m.len() != j.k {
            return Err(Error::InvalidParameter(format!(
                "k = {} but m has {} entries",
                j.k,
                j.m.len()
            )));
        }
        ThetaParams::new(j.m, &j.q)
    }
}

impl From<ThetaParams> for ThetaJson {
    fn from(t: ThetaParams) -> Self {
        let q = t.q.chunks(t.k).map(|r| r.to_vec()).collect();
        ThetaJson { k: t.k, m: t.m, q }
    }
}

impl ThetaParams {
    /// Builds a canonical parameter, rejecting anything that is not already in
    /// canonical form (use [`canonicalize`] for raw input).
    pub fn new(m: Vec<f64>, q_rows: &[Vec<f64>]) -> Result<Self> {
        let k = m.len();
        if k == 0 {
            return Err(Error::InvalidParameter("k must be positive".into()));
        }
        if q_rows.len() != k || q_rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidParameter(format!("Q must be {k}x{k}")));
        }
        let q: Vec<f64> = q_rows.iter().flatten().copied().collect();
        if m.iter().chain(q.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite entry".into()));
        }
        if q.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidParameter("negative Q entry".into()));
        }
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidParameter(format!(
                "Q entries sum to {total}, expected 1"
            )));
        }
        if m[0] != 0.0 {
            return Err(Error::InvalidParameter("m[0] must be 0".into()));
        }
        if m.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter("m must be nondecreasing".into()));
        }
        Ok(Self { k, m, q })
    }

    /// The single-population parameter `m = (0)`, `Q = ((1))`.
    pub fn trivial() -> Self {
        Self {
            k: 1,
            m: vec![0.0],
            q: vec![1.0],
        }
    }

    /// Raw constructor used by perturbation and reparameterization code; `q`
    /// is row-major and is not validated.
    pub(crate) fn from_raw(m: Vec<f64>, q: Vec<f64>) -> Self {
        let k = m.len();
        debug_assert_eq!(q.len(), k * k);
        Self { k, m, q }
    }

    /// Rebuilds `θ` from its free coordinates, setting `Q_kk` to one minus the
    /// other entries. No validation is performed.
    pub fn from_free_coords(k: usize, x: &[f64]) -> Self {
        assert_eq!(x.len(), free_dim(k), "free coordinate length");
        let mut m = Vec::with_capacity(k);
        m.push(0.0);
        m.extend_from_slice(&x[..k - 1]);
        let mut q = Vec::with_capacity(k * k);
        q.extend_from_slice(&x[k - 1..]);
        let rest: f64 = q.iter().sum();
        q.push(1.0 - rest);
        Self { k, m, q }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    /// Row-major `Q`.
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn q_at(&self, i: usize, j: usize) -> f64 {
        self.q[i * self.k + j]
    }

    pub fn q_rows(&self) -> Vec<Vec<f64>> {
        self.q.chunks(self.k).map(|r| r.to_vec()).collect()
    }

    /// Free coordinates `(m_2..m_k, Q_ij for (i,j) != (k,k))`.
    pub fn free_coords(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(free_dim(self.k));
        x.extend_from_slice(&self.m[1..]);
        x.extend_from_slice(&self.q[..self.k * self.k - 1]);
        x
    }

    pub fn det_q(&self) -> f64 {
        match self.k {
            1 => self.q[0],
            2 => self.q[0] * self.q[3] - self.q[1] * self.q[2],
            k => DMatrix::from_row_slice(k, k, &self.q).determinant(),
        }
    }

    /// Interior membership: strictly increasing translations and a
    /// non-singular `Q`.
    pub fn is_interior(&self) -> bool {
        self.det_q().abs() > INTERIOR_DET_MIN
            && self.m.windows(2).all(|w| w[1] - w[0] > INTERIOR_GAP_MIN)
    }

    /// Euclidean distance in free coordinates; `None` when the orders differ.
    pub fn distance(&self, other: &ThetaParams) -> Option<f64> {
        (self.k == other.k).then(|| {
            self.free_coords()
                .iter()
                .zip(other.free_coords())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
    }
}

/// Number of free coordinates for `k` populations.
pub fn free_dim(k: usize) -> usize {
    (k - 1) + (k * k - 1)
}

/// Maps raw translations and pair weights onto canonical form: translations
/// shifted to start at zero and sorted ascending, `Q` permuted accordingly and
/// renormalized.
pub fn canonicalize(m_raw: &[f64], q_raw: &[Vec<f64>]) -> Result<ThetaParams> {
    let k = m_raw.len();
    if k == 0 {
        return Err(Error::InvalidParameter("k must be positive".into()));
    }
    if q_raw.len() != k || q_raw.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidParameter(format!("Q must be {k}x{k}")));
    }
    if m_raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite translation".into()));
    }
    if q_raw.iter().flatten().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "Q entries must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = q_raw.iter().flatten().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidParameter("Q sums to zero".into()));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| m_raw[a].total_cmp(&m_raw[b]));
    let base = m_raw[order[0]];
    let m = order.iter().map(|&i| m_raw[i] - base).collect();
    // Skip rescaling at rounding level so that canonicalize is idempotent.
    let scale = if (total - 1.0).abs() > 1e-15 * (k * k) as f64 {
        total
    } else {
        1.0
    };
    let mut q = Vec::with_capacity(k * k);
    for &i in &order {
        for &j in &order {
            q.push(q_raw[i][j] / scale);
        }
    }
    Ok(ThetaParams { k, m, q })
}

/// Row sums of `Q`: the stationary regime law used downstream.
pub fn marginal_mu(theta: &ThetaParams) -> Vec<f64> {
    theta.q.chunks(theta.k).map(|r| r.iter().sum()).collect()
}

/// Column sums of `Q`.
pub fn column_marginal(theta: &ThetaParams) -> Vec<f64> {
    let k = theta.k;
    (0..k).map(|j| (0..k).map(|i| theta.q[i * k + j]).sum()).collect()
}

/// Characteristic function of `m_{S_1}` (axis 1) or `m_{S_2}` (axis 2).
pub fn marginal_cf(theta: &ThetaParams, t: f64, axis: Axis) -> ComplexValue {
    let weights = match axis {
        Axis::First => marginal_mu(theta),
        Axis::Second => column_marginal(theta),
    };
    weights
        .iter()
        .zip(&theta.m)
        .map(|(&w, &m)| Complex64::from_polar(w, t * m))
        .sum()
}

/// Characteristic function of the pair `(m_{S_1}, m_{S_2})`: `V(t1)ᵀ Q V(t2)`.
pub fn pair_cf(theta: &ThetaParams, t1: f64, t2: f64) -> ComplexValue {
    let k = theta.k;
    let v1: Vec<Complex64> = theta.m.iter().map(|&m| Complex64::cis(t1 * m)).collect();
    let v2: Vec<Complex64> = theta.m.iter().map(|&m| Complex64::cis(t2 * m)).collect();
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..k {
        let row: Complex64 = (0..k).map(|j| v2[j] * theta.q[i * k + j]).sum();
        acc += v1[i] * row;
    }
    acc
}

/// Analytic partial derivatives of the latent characteristic functions with
/// respect to the free coordinates.
#[derive(Debug, Clone)]
pub struct CfGradients {
    /// `∂ φ_{θ,1}(t1)`.
    pub first: Vec<ComplexValue>,
    /// `∂ φ_{θ,2}(t2)`.
    pub second: Vec<ComplexValue>,
    /// `∂ Φ_θ(t1, t2)`.
    pub pair: Vec<ComplexValue>,
}

pub fn cf_gradients(theta: &ThetaParams, t1: f64, t2: f64) -> CfGradients {
    let k = theta.k;
    let d = free_dim(k);
    let mut out = CfGradients {
        first: Vec::with_capacity(d),
        second: Vec::with_capacity(d),
        pair: Vec::with_capacity(d),
    };
    let v1: Vec<Complex64> = theta.m.iter().map(|&m| Complex64::cis(t1 * m)).collect();
    let v2: Vec<Complex64> = theta.m.iter().map(|&m| Complex64::cis(t2 * m)).collect();
    let rows = marginal_mu(theta);
    let cols = column_marginal(theta);
    let i_unit = Complex64::i();
    for j in 1..k {
        // Φ_θ = Σ_ab Q_ab V_a(t1) V_b(t2); m_j enters through V_j on both sides.
        let row_part: Complex64 = (0..k).map(|b| v2[b] * theta.q[j * k + b]).sum();
        let col_part: Complex64 = (0..k).map(|a| v1[a] * theta.q[a * k + j]).sum();
        out.first.push(i_unit * t1 * rows[j] * v1[j]);
        out.second.push(i_unit * t2 * cols[j] * v2[j]);
        out.pair
            .push(i_unit * t1 * v1[j] * row_part + i_unit * t2 * v2[j] * col_part);
    }
    // Q_kk = 1 - Σ others, so each free Q_ab carries minus the (k,k) partial.
    let last = k - 1;
    for a in 0..k {
        for b in 0..k {
            if a == last && b == last {
                continue;
            }
            out.first.push(v1[a] - v1[last]);
            out.second.push(v2[b] - v2[last]);
            out.pair.push(v1[a] * v2[b] - v1[last] * v2[last]);
        }
    }
    out
}

/// Boundary penalty `I_k(θ) = −log det Q − Σ_i log(|m_i − m_{i−1}| / (1+‖m‖∞)²)`.
///
/// Returns `+∞` when `det Q ≤ 0` or a translation gap vanishes.
pub fn boundary_penalty(theta: &ThetaParams) -> f64 {
    let det = theta.det_q();
    if !(det > 0.0) {
        return f64::INFINITY;
    }
    let norm = theta.m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let scale = (1.0 + norm).powi(2);
    let mut total = -det.ln();
    for w in theta.m.windows(2) {
        let gap = (w[1] - w[0]).abs();
        if gap == 0.0 {
            return f64::INFINITY;
        }
        total -= (gap / scale).ln();
    }
    total
}
