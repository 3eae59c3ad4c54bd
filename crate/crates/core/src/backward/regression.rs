//! Ridge least-squares projection onto polynomial or local-partition bases.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Basis {
    /// All monomials of total degree `≤ degree`.
    Polynomial { degree: usize },
    /// Indicators of a uniform partition with `bins` cells per axis.
    LocalPartition { bins: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub basis: Basis,
    /// Ridge weight on the non-constant basis functions (Gram matrix scaled by 1/n).
    pub ridge: f64,
    pub standardize: bool,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        Self { basis: Basis::Polynomial { degree: 2 }, ridge: 1e-8, standardize: true }
    }
}

impl RegressionSpec {
    pub fn polynomial(degree: usize) -> Self {
        Self { basis: Basis::Polynomial { degree }, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::ParameterOutOfRange { name: "ridge".into(), reason: "must be >= 0".into() });
        }
        if let Basis::LocalPartition { bins } = self.basis {
            if bins == 0 {
                return Err(Error::ParameterOutOfRange { name: "bins".into(), reason: "must be >= 1".into() });
            }
        }
        Ok(())
    }
}

/// Rows per chunk in the Gram reduction; fixed so the summation order never
/// depends on the worker count.
const CHUNK: usize = 2048;

/// Affine map of the retained (non-constant) regressor axes plus the basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedBasis {
    pub axes: Vec<usize>,
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
    pub basis: Basis,
    exponents: Vec<Vec<usize>>,
    /// Cell bounds for the local partition (in transformed coordinates).
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl FittedBasis {
    pub fn size(&self) -> usize {
        match self.basis {
            Basis::Polynomial { .. } => self.exponents.len(),
            Basis::LocalPartition { bins } => bins.pow(self.axes.len() as u32),
        }
    }

    fn transform(&self, row: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (a, &ax) in self.axes.iter().enumerate() {
            out.push((row[ax] - self.shift[a]) / self.scale[a]);
        }
    }

    /// Basis values at one regressor row.
    pub fn eval(&self, row: &[f64], out: &mut [f64]) {
        let mut z = Vec::with_capacity(self.axes.len());
        self.transform(row, &mut z);
        match self.basis {
            Basis::Polynomial { .. } => {
                for (o, ex) in out.iter_mut().zip(&self.exponents) {
                    *o = ex.iter().zip(&z).map(|(e, v)| v.powi(*e as i32)).product();
                }
            }
            Basis::LocalPartition { bins } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                let mut cell = 0;
                for (a, v) in z.iter().enumerate() {
                    let w = (self.hi[a] - self.lo[a]) / bins as f64;
                    let b = if w > 0.0 { (((v - self.lo[a]) / w).floor() as isize).clamp(0, bins as isize - 1) } else { 0 };
                    cell = cell * bins + b as usize;
                }
                out[cell] = 1.0;
            }
        }
    }

    fn constant_index(&self) -> Option<usize> {
        match self.basis {
            Basis::Polynomial { .. } => Some(0),
            Basis::LocalPartition { .. } => None,
        }
    }
}

fn monomials(k: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut cur = vec![0; k];
        fill(&mut out, &mut cur, 0, total);
    }
    out
}

fn fill(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, axis: usize, left: usize) {
    if axis + 1 >= cur.len() {
        if !cur.is_empty() {
            cur[axis] = left;
            out.push(cur.clone());
            cur[axis] = 0;
        } else if left == 0 {
            out.push(Vec::new());
        }
        return;
    }
    for e in (0..=left).rev() {
        cur[axis] = e;
        fill(out, cur, axis + 1, left - e);
    }
    cur[axis] = 0;
}

/// Least-squares projector for one design (one node's regressors).
#[derive(Debug, Clone)]
pub struct Projector {
    pub fitted_basis: FittedBasis,
    design: Vec<f64>,
    n: usize,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Projector {
    /// `states` is row-major `n × k`.
    pub fn new(states: &[f64], k: usize, spec: &RegressionSpec) -> Result<Self> {
        spec.validate()?;
        let n = if k == 0 { 0 } else { states.len() / k };
        if n == 0 {
            return Err(Error::EmptyCloud);
        }
        let mut axes = Vec::new();
        let mut shift = Vec::new();
        let mut scale = Vec::new();
        for a in 0..k {
            let col = states.iter().skip(a).step_by(k);
            let mean = col.clone().sum::<f64>() / n as f64;
            let var = col.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            // constant axes carry no information and would make the design singular
            if var.sqrt() <= 1e-12 * (1.0 + mean.abs()) {
                continue;
            }
            axes.push(a);
            if spec.standardize {
                shift.push(mean);
                scale.push(var.sqrt());
            } else {
                shift.push(0.0);
                scale.push(1.0);
            }
        }
        let exponents = match spec.basis {
            Basis::Polynomial { degree } => monomials(axes.len(), degree),
            Basis::LocalPartition { .. } => Vec::new(),
        };
        let mut fb = FittedBasis { axes, shift, scale, basis: spec.basis, exponents, lo: Vec::new(), hi: Vec::new() };
        if let Basis::LocalPartition { .. } = spec.basis {
            let na = fb.axes.len();
            let mut lo = vec![f64::INFINITY; na];
            let mut hi = vec![f64::NEG_INFINITY; na];
            let mut z = Vec::new();
            for row in states.chunks_exact(k) {
                fb.transform(row, &mut z);
                for a in 0..na {
                    lo[a] = lo[a].min(z[a]);
                    hi[a] = hi[a].max(z[a]);
                }
            }
            fb.lo = lo;
            fb.hi = hi;
        }
        let p = fb.size();
        if n < p {
            return Err(Error::TooFewSamples { samples: n, basis: p });
        }
        let mut design = vec![0.0; n * p];
        design.par_chunks_mut(p).zip(states.par_chunks(k)).for_each(|(out, row)| fb.eval(row, out));
        let gram_parts: Vec<Vec<f64>> = design
            .par_chunks(CHUNK * p)
            .map(|blk| {
                let mut g = vec![0.0; p * p];
                for row in blk.chunks_exact(p) {
                    for a in 0..p {
                        let ra = row[a];
                        if ra == 0.0 {
                            continue;
                        }
                        for b in a..p {
                            g[a * p + b] += ra * row[b];
                        }
                    }
                }
                g
            })
            .collect();
        let mut gram = DMatrix::<f64>::zeros(p, p);
        for part in &gram_parts {
            for a in 0..p {
                for b in a..p {
                    gram[(a, b)] += part[a * p + b];
                }
            }
        }
        for a in 0..p {
            for b in a..p {
                let v = gram[(a, b)] / n as f64;
                gram[(a, b)] = v;
                gram[(b, a)] = v;
            }
        }
        let cidx = fb.constant_index();
        for a in 0..p {
            if Some(a) != cidx {
                gram[(a, a)] += spec.ridge;
            }
        }
        let maxdiag = (0..p).map(|a| gram[(a, a)]).fold(0.0, f64::max);
        let chol = gram.clone().cholesky().ok_or(Error::RankDeficient { basis: p, samples: n })?;
        let l = chol.l();
        let mindiag = (0..p).map(|a| l[(a, a)] * l[(a, a)]).fold(f64::INFINITY, f64::min);
        if mindiag <= 1e-13 * maxdiag {
            return Err(Error::RankDeficient { basis: p, samples: n });
        }
        Ok(Self { fitted_basis: fb, design, n, chol })
    }

    pub fn size(&self) -> usize {
        self.fitted_basis.size()
    }

    /// Coefficients and fitted values of the projection of `targets`.
    pub fn project(&self, targets: &[f64]) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(targets.len(), self.n, "one target per sample");
        let p = self.size();
        let parts: Vec<Vec<f64>> = self
            .design
            .par_chunks(CHUNK * p)
            .zip(targets.par_chunks(CHUNK))
            .map(|(blk, ys)| {
                let mut r = vec![0.0; p];
                for (row, y) in blk.chunks_exact(p).zip(ys) {
                    for a in 0..p {
                        r[a] += row[a] * y;
                    }
                }
                r
            })
            .collect();
        let mut rhs = DVector::<f64>::zeros(p);
        for part in &parts {
            for a in 0..p {
                rhs[a] += part[a];
            }
        }
        rhs /= self.n as f64;
        let coef = self.chol.solve(&rhs);
        let coef: Vec<f64> = coef.iter().copied().collect();
        let fitted: Vec<f64> = self
            .design
            .par_chunks(p)
            .map(|row| row.iter().zip(&coef).map(|(a, b)| a * b).sum())
            .collect();
        (coef, fitted)
    }

    /// Evaluate a fitted expansion at a new regressor row.
    pub fn predict(&self, coef: &[f64], row: &[f64]) -> f64 {
        let mut b = vec![0.0; self.size()];
        self.fitted_basis.eval(row, &mut b);
        b.iter().zip(coef).map(|(a, c)| a * c).sum()
    }
}

/// Coefficients and fitted values of `E[target | state]`.
pub fn regress_conditional(
    targets: &[f64],
    states: &[f64],
    k: usize,
    spec: &RegressionSpec,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let proj = Projector::new(states, k, spec)?;
    if targets.len() != states.len() / k {
        return Err(Error::DimensionMismatch { expected: states.len() / k, got: targets.len() });
    }
    Ok(proj.project(targets))
}
