//! Empirical measures, the 2-Wasserstein distance, and lifted finite differences
//! for the derivative with respect to the measure.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact assignment is used up to this many samples (for `dim > 1`).
pub const ASSIGNMENT_CUTOFF: usize = 512;
pub const DEFAULT_SLICED_PROJECTIONS: usize = 64;

/// Weighted point cloud in `R^dim`. Samples are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    dim: usize,
    samples: Vec<f64>,
    weights: Vec<f64>,
}

/// First moments of a measure; the registry coefficients see the law only
/// through these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureStats {
    pub mean: Vec<f64>,
}

impl MeasureStats {
    pub fn zeros(dim: usize) -> Self {
        Self { mean: vec![0.0; dim] }
    }

    /// Mean of equally weighted rows, summed in index order.
    pub fn of_rows(rows: &[f64], dim: usize) -> Self {
        let n = rows.len() / dim.max(1);
        let mut mean = vec![0.0; dim];
        for row in rows.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        if n > 0 {
            for m in &mut mean {
                *m /= n as f64;
            }
        }
        Self { mean }
    }
}

impl EmpiricalMeasure {
    /// Uniformly weighted cloud from row-major samples.
    pub fn uniform(dim: usize, samples: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be >= 1".into()));
        }
        if samples.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if samples.len() % dim != 0 {
            return Err(Error::DimensionMismatch { expected: dim, got: samples.len() % dim });
        }
        let n = samples.len() / dim;
        Ok(Self { dim, samples, weights: vec![1.0 / n as f64; n] })
    }

    pub fn weighted(dim: usize, samples: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let mut m = Self::uniform(dim, samples)?;
        if weights.len() != m.len() {
            return Err(Error::DimensionMismatch { expected: m.len(), got: weights.len() });
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("weights sum to {total}, not 1")));
        }
        m.weights = weights;
        Ok(m)
    }

    pub fn from_points(points: &[f64]) -> Result<Self> {
        Self::uniform(1, points.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|x| (x - w).abs() <= 1e-15)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (row, w) in self.samples.chunks_exact(self.dim).zip(&self.weights) {
            for (acc, v) in m.iter_mut().zip(row) {
                *acc += w * v;
            }
        }
        m
    }

    pub fn stats(&self) -> MeasureStats {
        MeasureStats { mean: self.mean() }
    }

    /// Integral of `g` against the measure.
    pub fn integrate(&self, g: impl Fn(&[f64]) -> f64) -> f64 {
        self.samples
            .chunks_exact(self.dim)
            .zip(&self.weights)
            .map(|(row, w)| w * g(row))
            .sum()
    }

    pub fn shifted(&self, shift: &[f64]) -> Self {
        let mut out = self.clone();
        for row in out.samples.chunks_exact_mut(self.dim) {
            for (v, s) in row.iter_mut().zip(shift) {
                *v += s;
            }
        }
        out
    }

    /// Copy with sample `i` moved by `delta`.
    pub fn with_sample_moved(&self, i: usize, delta: &[f64]) -> Result<Self> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange { index: i, len: self.len() });
        }
        let mut out = self.clone();
        for (v, d) in out.samples[i * self.dim..(i + 1) * self.dim].iter_mut().zip(delta) {
            *v += d;
        }
        Ok(out)
    }

    /// Copy with rows sorted lexicographically (weights follow their rows).
    pub fn canonical(&self) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.sample(a)
                .iter()
                .zip(self.sample(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(self.weights[a].total_cmp(&self.weights[b]))
        });
        let mut samples = Vec::with_capacity(self.samples.len());
        let mut weights = Vec::with_capacity(self.len());
        for i in idx {
            samples.extend_from_slice(self.sample(i));
            weights.push(self.weights[i]);
        }
        Self { dim: self.dim, samples, weights }
    }

    /// Deterministic systematic resampling to `n` equally weighted samples.
    pub fn systematic_resample(&self, n: usize) -> Self {
        let mut samples = Vec::with_capacity(n * self.dim);
        let mut cum = 0.0;
        let mut j = 0;
        for k in 0..n {
            let u = (k as f64 + 0.5) / n as f64;
            while j + 1 < self.len() && cum + self.weights[j] < u {
                cum += self.weights[j];
                j += 1;
            }
            samples.extend_from_slice(self.sample(j));
        }
        Self { dim: self.dim, samples, weights: vec![1.0 / n as f64; n] }
    }

    /// Digest of the sample and weight bits (FNV-1a).
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(self.dim as u64);
        for v in &self.samples {
            eat(v.to_bits());
        }
        for w in &self.weights {
            eat(w.to_bits());
        }
        h
    }

    /// One sample per row, comma separated; weights are not written (uniform clouds).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for row in self.samples.chunks_exact(self.dim) {
            wr.write_record(row.iter().map(|v| format!("{v:e}")))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
        let mut dim = 0;
        let mut samples = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            if dim == 0 {
                dim = rec.len();
            } else if rec.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: rec.len() });
            }
            for field in rec.iter() {
                samples.push(field.trim().parse::<f64>().map_err(|e| {
                    Error::InvalidArgument(format!("bad cloud value `{field}`: {e}"))
                })?);
            }
        }
        Self::uniform(dim.max(1), samples)
    }

    /// Little-endian `u64` dim, `u64` count, then `f64` samples.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.samples.len());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.samples {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<[u8; 8]> {
            bytes
                .get(8 * i..8 * i + 8)
                .and_then(|s| s.try_into().ok())
                .ok_or_else(|| Error::InvalidArgument("truncated cloud bytes".into()))
        };
        let dim = u64::from_le_bytes(word(0)?) as usize;
        let n = u64::from_le_bytes(word(1)?) as usize;
        let samples = (0..n * dim)
            .map(|i| word(2 + i).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        Self::uniform(dim, samples)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W2Mode {
    Exact1d,
    Assignment,
    Sliced { projections: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct W2Result {
    pub distance: f64,
    pub mode: W2Mode,
    /// Whether systematic resampling to equal uniform clouds was applied first.
    pub resampled: bool,
}

/// 2-Wasserstein distance between two clouds.
///
/// Exact via the sorted coupling in 1-D, exact via minimum-cost assignment for
/// `dim > 1` and at most [`ASSIGNMENT_CUTOFF`] samples, sliced otherwise.
pub fn w2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<W2Result> {
    w2_with_projections(mu, nu, DEFAULT_SLICED_PROJECTIONS)
}

pub fn w2_with_projections(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    projections: usize,
) -> Result<W2Result> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch { expected: mu.dim(), got: nu.dim() });
    }
    if mu.is_empty() || nu.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let resampled = !(mu.is_uniform() && nu.is_uniform() && mu.len() == nu.len());
    let (a, b) = if resampled {
        let n = mu.len().max(nu.len());
        (mu.systematic_resample(n), nu.systematic_resample(n))
    } else {
        (mu.clone(), nu.clone())
    };
    let dim = a.dim();
    let n = a.len();
    let (cost, mode) = if dim == 1 {
        (sorted_cost(a.samples(), b.samples()), W2Mode::Exact1d)
    } else if n <= ASSIGNMENT_CUTOFF {
        let c = cost_matrix(&a, &b);
        let perm = min_cost_assignment(&c, n);
        let total: f64 = (0..n).map(|i| c[i * n + perm[i]]).sum();
        (total / n as f64, W2Mode::Assignment)
    } else {
        (sliced_cost(&a, &b, projections), W2Mode::Sliced { projections })
    };
    Ok(W2Result { distance: cost.max(0.0).sqrt(), mode, resampled })
}

fn sorted_cost(a: &[f64], b: &[f64]) -> f64 {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64
}

fn sliced_cost(a: &EmpiricalMeasure, b: &EmpiricalMeasure, projections: usize) -> f64 {
    let dim = a.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_511ced);
    let mut total = 0.0;
    for _ in 0..projections {
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let proj = |m: &EmpiricalMeasure| -> Vec<f64> {
            m.samples()
                .chunks_exact(dim)
                .map(|r| r.iter().zip(&dir).map(|(x, d)| x * d).sum())
                .collect()
        };
        total += sorted_cost(&proj(a), &proj(b));
    }
    total / projections as f64
}

fn cost_matrix(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Vec<f64> {
    let n = a.len();
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            c[i * n + j] = a
                .sample(i)
                .iter()
                .zip(b.sample(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
        }
    }
    c
}

/// Minimum-cost perfect matching of an `n x n` cost matrix (row-major);
/// returns `perm[row] = column`. Shortest augmenting path with potentials, O(n^3).
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based arrays as in the classical formulation; index 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            perm[p[j] - 1] = j - 1;
        }
    }
    perm
}

/// `M * (phi(mu, x_i + h e_j) - phi(mu, x_i - h e_j)) / (2h)` for each coordinate `j`:
/// the empirical-lift approximation of the measure derivative at sample `i`.
pub fn lifted_grad<F>(phi: F, mu: &EmpiricalMeasure, index: usize, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&EmpiricalMeasure) -> f64,
{
    check_lift_args(mu, index, h)?;
    let k = mu.dim();
    let m = mu.len() as f64;
    let mut out = vec![0.0; k];
    for (j, o) in out.iter_mut().enumerate() {
        let mut e = vec![0.0; k];
        e[j] = h;
        let plus = phi(&mu.with_sample_moved(index, &e)?);
        e[j] = -h;
        let minus = phi(&mu.with_sample_moved(index, &e)?);
        *o = m * (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Second-order central differences in the shifted sample, approximating the
/// `y`-derivative of the measure derivative at sample `i`. Entry `[a][b]` is
/// `d/dy_a (d_mu phi)_b`.
pub fn lifted_grad_y<F>(phi: F, mu: &EmpiricalMeasure, index: usize, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&EmpiricalMeasure) -> f64,
{
    check_lift_args(mu, index, h)?;
    let k = mu.dim();
    let m = mu.len() as f64;
    let at = |shift: &[f64]| -> Result<f64> { Ok(phi(&mu.with_sample_moved(index, shift)?)) };
    let center = phi(mu);
    let mut out = vec![vec![0.0; k]; k];
    for a in 0..k {
        let mut e = vec![0.0; k];
        e[a] = h;
        let p = at(&e)?;
        e[a] = -h;
        let q = at(&e)?;
        out[a][a] = m * (p - 2.0 * center + q) / (h * h);
        for b in (a + 1)..k {
            let mut s = vec![0.0; k];
            let mut corner = |sa: f64, sb: f64| -> Result<f64> {
                s[a] = sa * h;
                s[b] = sb * h;
                at(&s)
            };
            let v = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)?
                + corner(-1.0, -1.0)?)
                * m
                / (4.0 * h * h);
            out[a][b] = v;
            out[b][a] = v;
        }
    }
    Ok(out)
}

fn check_lift_args(mu: &EmpiricalMeasure, index: usize, h: f64) -> Result<()> {
    if index >= mu.len() {
        return Err(Error::IndexOutOfRange { index, len: mu.len() });
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {h}")));
    }
    Ok(())
}
