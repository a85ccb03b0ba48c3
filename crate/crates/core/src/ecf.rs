//! Empirical characteristic function of consecutive observation pairs.
//!
//! `Φ̂_n(t1, t2) = (1/n) Σ_{j=1}^{n-1} exp(i(t1 Y_j + t2 Y_{j+1}))`; the `1/n`
//! normalization over `n − 1` summands is kept as is, so `Φ̂_n(0, 0) = (n−1)/n`.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::ComplexValue;

/// Observed series `Y_1, ..., Y_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    y: Vec<f64>,
}

impl Series {
    pub fn new(y: Vec<f64>) -> Result<Self> {
        if y.len() < 2 {
            return Err(Error::InsufficientData {
                needed: 2,
                got: y.len(),
            });
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "observation {i} is not finite"
            )));
        }
        Ok(Self { y })
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.y.len() as f64
    }

    /// Sample standard deviation (denominator `n − 1`).
    pub fn std_dev(&self) -> f64 {
        let mean = self.mean();
        let ss: f64 = self.y.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (self.y.len() - 1) as f64).sqrt()
    }

    /// Empirical quantile by linear interpolation between order statistics.
    pub fn quantile(&self, level: f64) -> f64 {
        let mut sorted = self.y.clone();
        sorted.sort_by(f64::total_cmp);
        quantile_sorted(&sorted, level)
    }
}

pub(crate) fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let pos = level.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Empirical characteristic function of `(Y_j, Y_{j+1})` at one point.
pub fn ecf_at(series: &Series, t1: f64, t2: f64) -> ComplexValue {
    let y = &series.y;
    let terms: Vec<Complex64> = y
        .windows(2)
        .map(|w| Complex64::cis(t1 * w[0] + t2 * w[1]))
        .collect();
    pairwise_sum(&terms) / y.len() as f64
}

/// `Φ̂_n` tabulated on a tensor grid, with the two axis marginals cached.
#[derive(Debug, Clone)]
pub struct EcfGrid {
    pub nodes1: Vec<f64>,
    pub nodes2: Vec<f64>,
    /// Row-major: `values[a * nodes2.len() + b] = Φ̂_n(nodes1[a], nodes2[b])`.
    pub values: Vec<ComplexValue>,
    /// `Φ̂_n(nodes1[a], 0)`.
    pub axis1: Vec<ComplexValue>,
    /// `Φ̂_n(0, nodes2[b])`.
    pub axis2: Vec<ComplexValue>,
    pub n: usize,
}

impl EcfGrid {
    pub fn value(&self, a: usize, b: usize) -> ComplexValue {
        self.values[a * self.nodes2.len() + b]
    }

    /// Tabulates an arbitrary bivariate characteristic function, e.g. a
    /// population law, in place of the empirical one. `n` is recorded as given.
    pub fn from_fn<F>(nodes1: &[f64], nodes2: &[f64], n: usize, cf: F) -> Self
    where
        F: Fn(f64, f64) -> ComplexValue,
    {
        let mut values = Vec::with_capacity(nodes1.len() * nodes2.len());
        for &t1 in nodes1 {
            for &t2 in nodes2 {
                values.push(cf(t1, t2));
            }
        }
        Self {
            axis1: nodes1.iter().map(|&t| cf(t, 0.0)).collect(),
            axis2: nodes2.iter().map(|&t| cf(0.0, t)).collect(),
            nodes1: nodes1.to_vec(),
            nodes2: nodes2.to_vec(),
            values,
            n,
        }
    }
}

const BLOCK: usize = 128;

/// Tabulates `Φ̂_n` on `nodes1 × nodes2`.
///
/// Uses the factorization `e^{i(t1 y + t2 y')} = e^{i t1 y} e^{i t2 y'}`:
/// products are accumulated in blocks of consecutive pairs and the block sums
/// are combined by pairwise reduction.
pub fn ecf_grid(series: &Series, nodes1: &[f64], nodes2: &[f64]) -> Result<EcfGrid> {
    if nodes1.is_empty() || nodes2.is_empty() {
        return Err(Error::Configuration("empty node vector".into()));
    }
    let y = &series.y;
    let n = y.len();
    let (q1, q2) = (nodes1.len(), nodes2.len());

    // e1[j*q1 + a] = exp(i nodes1[a] y_j), e2 likewise.
    let expo = |nodes: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut re = Vec::with_capacity(n * nodes.len());
        let mut im = Vec::with_capacity(n * nodes.len());
        for &v in y {
            for &t in nodes {
                let (s, c) = (t * v).sin_cos();
                re.push(c);
                im.push(s);
            }
        }
        (re, im)
    };
    let (e1r, e1i) = expo(nodes1);
    let (e2r, e2i) = if nodes1 == nodes2 {
        (e1r.clone(), e1i.clone())
    } else {
        expo(nodes2)
    };

    let pairs = n - 1;
    let mut block_sums: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(pairs.div_ceil(BLOCK));
    let mut start = 0;
    while start < pairs {
        let end = (start + BLOCK).min(pairs);
        let mut acc_r = vec![0.0; q1 * q2];
        let mut acc_i = vec![0.0; q1 * q2];
        for j in start..end {
            let r1 = &e1r[j * q1..(j + 1) * q1];
            let i1 = &e1i[j * q1..(j + 1) * q1];
            let r2 = &e2r[(j + 1) * q2..(j + 2) * q2];
            let i2 = &e2i[(j + 1) * q2..(j + 2) * q2];
            for a in 0..q1 {
                let (ar, ai) = (r1[a], i1[a]);
                let row_r = &mut acc_r[a * q2..(a + 1) * q2];
                let row_i = &mut acc_i[a * q2..(a + 1) * q2];
                for b in 0..q2 {
                    row_r[b] += ar * r2[b] - ai * i2[b];
                    row_i[b] += ar * i2[b] + ai * r2[b];
                }
            }
        }
        block_sums.push((acc_r, acc_i));
        start = end;
    }
    let (sum_r, sum_i) = reduce_blocks(block_sums);
    let scale = 1.0 / n as f64;
    let values = sum_r
        .iter()
        .zip(&sum_i)
        .map(|(&r, &i)| Complex64::new(r * scale, i * scale))
        .collect();

    let axis = |nodes: &[f64], range: std::ops::Range<usize>| -> Vec<Complex64> {
        nodes
            .iter()
            .map(|&t| {
                let terms: Vec<Complex64> = y[range.clone()].iter().map(|&v| Complex64::cis(t * v)).collect();
                pairwise_sum(&terms) * scale
            })
            .collect()
    };

    Ok(EcfGrid {
        axis1: axis(nodes1, 0..n - 1),
        axis2: axis(nodes2, 1..n),
        nodes1: nodes1.to_vec(),
        nodes2: nodes2.to_vec(),
        values,
        n,
    })
}

fn reduce_blocks(mut blocks: Vec<(Vec<f64>, Vec<f64>)>) -> (Vec<f64>, Vec<f64>) {
    while blocks.len() > 1 {
        let mut next = Vec::with_capacity(blocks.len().div_ceil(2));
        let mut it = blocks.into_iter();
        while let Some((mut ar, mut ai)) = it.next() {
            if let Some((br, bi)) = it.next() {
                ar.iter_mut().zip(&br).for_each(|(x, y)| *x += y);
                ai.iter_mut().zip(&bi).for_each(|(x, y)| *x += y);
            }
            next.push((ar, ai));
        }
        blocks = next;
    }
    blocks.pop().expect("at least one block")
}

pub(crate) fn pairwise_sum(terms: &[Complex64]) -> Complex64 {
    if terms.len() <= 32 {
        terms.iter().sum()
    } else {
        let mid = terms.len() / 2;
        pairwise_sum(&terms[..mid]) + pairwise_sum(&terms[mid..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_series(n: usize, seed: u64) -> Series {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Series::new((0..n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn rejects_short_series() {
        assert!(matches!(
            Series::new(vec![1.0]),
            Err(Error::InsufficientData { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn point_examples() {
        let s = Series::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(ecf_at(&s, 1.7, -0.3), Complex64::new(0.5, 0.0));

        let s = random_series(37, 1);
        assert_eq!(ecf_at(&s, 0.0, 0.0), Complex64::new(36.0 / 37.0, 0.0));

        let s = Series::new(vec![1.0, -1.0, 2.0]).unwrap();
        let v = ecf_at(&s, 1.0, 0.0);
        assert_abs_diff_eq!(v.re, 2.0 * 1.0_f64.cos() / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v.im, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(v.re, 0.3602, epsilon = 1e-4);
    }

    #[test]
    fn single_node_grid_at_origin() {
        let s = random_series(10, 2);
        let g = ecf_grid(&s, &[0.0], &[0.0]).unwrap();
        assert_eq!(g.values.len(), 1);
        assert_abs_diff_eq!(g.value(0, 0).re, 0.9, epsilon = 1e-15);
    }

    #[test]
    fn grid_matches_pointwise_evaluation() {
        let s = random_series(1000, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let nodes1: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let nodes2: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = ecf_grid(&s, &nodes1, &nodes2).unwrap();
        for (a, &t1) in nodes1.iter().enumerate() {
            assert!((g.axis1[a] - ecf_at(&s, t1, 0.0)).norm() < 1e-12);
            for (b, &t2) in nodes2.iter().enumerate() {
                assert!((g.value(a, b) - ecf_at(&s, t1, t2)).norm() < 1e-12);
            }
        }
        for (b, &t2) in nodes2.iter().enumerate() {
            assert!((g.axis2[b] - ecf_at(&s, 0.0, t2)).norm() < 1e-12);
        }
    }

    #[test]
    fn grid_conjugation_and_modulus() {
        let s = random_series(500, 5);
        let nodes = [-1.5, -0.4, 0.4, 1.5];
        let g = ecf_grid(&s, &nodes, &nodes).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                let v = g.value(a, b);
                assert!(v.norm() <= 1.0);
                assert!((g.value(3 - a, 3 - b) - v.conj()).norm() < 1e-15);
            }
        }
    }
}
