//! Brownian and marked-Poisson drivers with reproducible per-path streams.
//!
//! Each path owns a ChaCha8 key built from `(seed, stream_id)`; the ChaCha
//! stream number separates the Brownian, jump and initial-value substreams.
//! Within a substream draws are sequential, so a path is a pure function of
//! `(grid, dim, levy, seed, stream_id)` whatever the scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::quadrature::gauss_legendre_on;

pub const SUBSTREAM_BROWNIAN: u64 = 0;
pub const SUBSTREAM_JUMPS: u64 = 1;
pub const SUBSTREAM_INITIAL: u64 = 2;

/// Generator for one `(seed, stream_id, substream)` triple.
pub fn stream_rng(seed: u64, stream_id: u64, substream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream_id.to_le_bytes());
    key[16..24].copy_from_slice(b"mfjump\0\0");
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(substream);
    rng
}

/// SplitMix64 finalizer; used to derive independent seeds from a base seed and a tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarkDistribution {
    /// Finitely many nonzero marks with probabilities summing to 1.
    Atoms { marks: Vec<f64>, probs: Vec<f64> },
    /// Uniform on `[lo, hi]`, an interval not containing 0.
    Uniform { lo: f64, hi: f64 },
}

/// Finite-activity Lévy measure `λ = Λ·ν` on scalar marks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevyModel {
    total_rate: f64,
    marks: MarkDistribution,
    /// `(mark, weight)` pairs with weights summing to `Λ`.
    quadrature: Vec<(f64, f64)>,
}

impl LevyModel {
    pub fn new(total_rate: f64, marks: MarkDistribution, quadrature_nodes: usize) -> Result<Self> {
        if !(total_rate.is_finite() && total_rate >= 0.0) {
            return Err(Error::ParameterOutOfRange {
                name: "total_rate".into(),
                reason: "must be finite and >= 0".into(),
            });
        }
        let quadrature = match &marks {
            MarkDistribution::Atoms { marks: m, probs } => {
                if m.is_empty() || m.len() != probs.len() {
                    return Err(Error::InvalidArgument("atoms need matching non-empty marks/probs".into()));
                }
                if m.iter().any(|e| *e == 0.0 || !e.is_finite()) {
                    return Err(Error::ParameterOutOfRange { name: "marks".into(), reason: "must be nonzero".into() });
                }
                if probs.iter().any(|p| !(*p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(Error::ParameterOutOfRange {
                        name: "probs".into(),
                        reason: "must be >= 0 and sum to 1".into(),
                    });
                }
                m.iter().zip(probs).map(|(e, p)| (*e, total_rate * p)).collect()
            }
            MarkDistribution::Uniform { lo, hi } => {
                if !(lo < hi) || (*lo <= 0.0 && *hi >= 0.0) {
                    return Err(Error::ParameterOutOfRange {
                        name: "uniform marks".into(),
                        reason: "need lo < hi on one side of 0".into(),
                    });
                }
                if quadrature_nodes == 0 {
                    return Err(Error::InvalidArgument("quadrature node count must be >= 1".into()));
                }
                let (x, w) = gauss_legendre_on(quadrature_nodes, *lo, *hi);
                let dens = total_rate / (hi - lo);
                x.into_iter().zip(w).map(|(e, wi)| (e, wi * dens)).collect()
            }
        };
        Ok(Self { total_rate, marks, quadrature })
    }

    /// No jumps at all.
    pub fn none() -> Self {
        Self::single_atom(0.0, 1.0).expect("valid")
    }

    pub fn single_atom(total_rate: f64, mark: f64) -> Result<Self> {
        Self::new(total_rate, MarkDistribution::Atoms { marks: vec![mark], probs: vec![1.0] }, 1)
    }

    pub fn atoms(total_rate: f64, marks: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        Self::new(total_rate, MarkDistribution::Atoms { marks, probs }, 1)
    }

    pub fn uniform(total_rate: f64, lo: f64, hi: f64, quadrature_nodes: usize) -> Result<Self> {
        Self::new(total_rate, MarkDistribution::Uniform { lo, hi }, quadrature_nodes)
    }

    pub fn total_rate(&self) -> f64 {
        self.total_rate
    }

    pub fn marks(&self) -> &MarkDistribution {
        &self.marks
    }

    pub fn quadrature(&self) -> &[(f64, f64)] {
        &self.quadrature
    }

    pub fn mark_dim(&self) -> usize {
        1
    }

    /// `∫ g(e) λ(de)` by the model's quadrature.
    pub fn integrate(&self, g: impl Fn(f64) -> f64) -> f64 {
        self.quadrature.iter().map(|(e, w)| w * g(*e)).sum()
    }

    pub fn sample_mark<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.marks {
            MarkDistribution::Atoms { marks, probs } => {
                if marks.len() == 1 {
                    return marks[0];
                }
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (e, p) in marks.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        return *e;
                    }
                }
                *marks.last().unwrap()
            }
            MarkDistribution::Uniform { lo, hi } => rng.random_range(*lo..*hi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    pub mark: f64,
}

/// One path's Brownian increments (row-major, `n_steps × dim`) and jump events.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverPath {
    pub grid: TimeGrid,
    pub dim: usize,
    pub brownian: Vec<f64>,
    pub events: Vec<JumpEvent>,
    pub stream_id: u64,
    /// `events[step_offsets[i]..step_offsets[i+1]]` fall in step `i`.
    step_offsets: Vec<usize>,
}

impl DriverPath {
    fn build(grid: TimeGrid, dim: usize, brownian: Vec<f64>, events: Vec<JumpEvent>, stream_id: u64) -> Self {
        let mut step_offsets = vec![0usize; grid.n_steps() + 1];
        let mut k = 0;
        for i in 0..grid.n_steps() {
            step_offsets[i] = k;
            let right = grid.node(i + 1);
            while k < events.len() && (events[k].time <= right || i + 1 == grid.n_steps()) {
                k += 1;
            }
        }
        step_offsets[grid.n_steps()] = events.len();
        Self { grid, dim, brownian, events, stream_id, step_offsets }
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn db(&self, step: usize) -> &[f64] {
        &self.brownian[step * self.dim..(step + 1) * self.dim]
    }

    pub fn events_in_step(&self, step: usize) -> &[JumpEvent] {
        &self.events[self.step_offsets[step]..self.step_offsets[step + 1]]
    }

    /// Same path on a grid `factor` times coarser (increments summed, events kept).
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let grid = self.grid.coarsen(factor)?;
        let d = self.dim;
        let mut brownian = vec![0.0; grid.n_steps() * d];
        for i in 0..self.n_steps() {
            let c = i / factor;
            for j in 0..d {
                brownian[c * d + j] += self.brownian[i * d + j];
            }
        }
        Ok(Self::build(grid, d, brownian, self.events.clone(), self.stream_id))
    }

    /// Same grid and jump events with replaced Brownian increments.
    pub fn with_brownian(self, brownian: Vec<f64>) -> Result<Self> {
        if brownian.len() != self.brownian.len() {
            return Err(Error::DimensionMismatch { expected: self.brownian.len(), got: brownian.len() });
        }
        Ok(Self { brownian, ..self })
    }

    /// Restriction to the grid tail starting at node `from`.
    pub fn tail(&self, from: usize) -> Result<Self> {
        let grid = self.grid.tail(from)?;
        let brownian = self.brownian[from * self.dim..].to_vec();
        let events = self.events[self.step_offsets[from]..].to_vec();
        Ok(Self::build(grid, self.dim, brownian, events, self.stream_id))
    }
}

/// Sample one driver path on `grid`.
pub fn sample_driver(grid: &TimeGrid, dim: usize, levy: &LevyModel, stream_id: u64, seed: u64) -> DriverPath {
    assert!(dim >= 1, "dimension must be >= 1");
    let mut rng = stream_rng(seed, stream_id, SUBSTREAM_BROWNIAN);
    let sd = grid.delta().sqrt();
    let brownian: Vec<f64> =
        (0..grid.n_steps() * dim).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut events = Vec::new();
    if levy.total_rate() > 0.0 {
        let mut rng = stream_rng(seed, stream_id, SUBSTREAM_JUMPS);
        let exp = Exp::new(levy.total_rate()).expect("positive rate");
        let mut t = grid.t_start();
        loop {
            t += exp.sample(&mut rng);
            if t > grid.t_end() {
                break;
            }
            let mark = levy.sample_mark(&mut rng);
            events.push(JumpEvent { time: t, mark });
        }
    }
    DriverPath::build(*grid, dim, brownian, events, stream_id)
}

/// Per-step `Σ_{events} g(τ, e) − Δ·∫ g(t_i, e) λ(de)`.
pub fn compensated_integral(
    path: &DriverPath,
    g: impl Fn(f64, f64) -> f64,
    levy: &LevyModel,
) -> Vec<f64> {
    let delta = path.grid.delta();
    (0..path.n_steps())
        .map(|i| {
            let t = path.grid.node(i);
            let jumps: f64 = path.events_in_step(i).iter().map(|ev| g(ev.time, ev.mark)).sum();
            jumps - delta * levy.integrate(|e| g(t, e))
        })
        .collect()
}

/// Per-step uncompensated sum `Σ_{events} g(τ, e)`.
pub fn jump_sum(path: &DriverPath, g: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    (0..path.n_steps())
        .map(|i| path.events_in_step(i).iter().map(|ev| g(ev.time, ev.mark)).sum())
        .collect()
}

/// `Δ·∫ l(e)² λ(de)`, the second moment of one step of the compensated l-integral.
pub fn isometry_weight(levy: &LevyModel, l: impl Fn(f64) -> f64, delta: f64) -> f64 {
    delta * levy.integrate(|e| l(e) * l(e))
}

/// Distribution of the initial value `ξ` (componentwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialSampler {
    Point { value: f64 },
    Normal { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl InitialSampler {
    pub fn name(&self) -> String {
        match self {
            Self::Point { value } => format!("point({value})"),
            Self::Normal { mean, std } => format!("normal({mean},{std})"),
            Self::Uniform { lo, hi } => format!("uniform({lo},{hi})"),
        }
    }

    /// `ξ` for one stream, `dim` components.
    pub fn sample(&self, dim: usize, stream_id: u64, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, stream_id, SUBSTREAM_INITIAL);
        (0..dim)
            .map(|_| match self {
                Self::Point { value } => *value,
                Self::Normal { mean, std } => mean + std * rng.sample::<f64, _>(StandardNormal),
                Self::Uniform { lo, hi } => rng.random_range(*lo..*hi),
            })
            .collect()
    }

    pub fn mean(&self) -> f64 {
        match self {
            Self::Point { value } => *value,
            Self::Normal { mean, .. } => *mean,
            Self::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            Self::Point { .. } => 0.0,
            Self::Normal { std, .. } => std * std,
            Self::Uniform { lo, hi } => (hi - lo) * (hi - lo) / 12.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::report::mean_and_se;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn zero_rate_has_no_events_and_shapes_match() {
        let p = sample_driver(&grid(4), 1, &LevyModel::none(), 3, 9);
        assert!(p.events.is_empty());
        assert_eq!(p.brownian.len(), 4);
    }

    #[test]
    fn reproducible_and_distinct_streams() {
        let levy = LevyModel::uniform(3.0, 0.2, 1.0, 4).unwrap();
        let a = sample_driver(&grid(10), 2, &levy, 5, 11);
        let b = sample_driver(&grid(10), 2, &levy, 5, 11);
        let c = sample_driver(&grid(10), 2, &levy, 6, 11);
        assert_eq!(a, b);
        assert_ne!(a.brownian, c.brownian);
        assert!(a.events.windows(2).all(|w| w[0].time < w[1].time));
    }

    #[test]
    fn quadrature_weights_sum_to_rate() {
        let u = LevyModel::uniform(2.5, -1.0, -0.1, 6).unwrap();
        let s: f64 = u.quadrature().iter().map(|q| q.1).sum();
        assert!((s - 2.5).abs() < 1e-12);
        assert!(u.quadrature().iter().all(|q| q.0 != 0.0));
        let a = LevyModel::atoms(2.0, vec![0.5, -1.0], vec![0.3, 0.7]).unwrap();
        let s: f64 = a.quadrature().iter().map(|q| q.1).sum();
        assert!((s - 2.0).abs() < 1e-12);
        assert!(LevyModel::uniform(1.0, -0.5, 0.5, 4).is_err());
        assert!(LevyModel::single_atom(1.0, 0.0).is_err());
        assert!(LevyModel::single_atom(-1.0, 1.0).is_err());
    }

    #[test]
    fn events_are_bucketed_into_left_open_steps() {
        let levy = LevyModel::single_atom(20.0, 1.0).unwrap();
        let p = sample_driver(&grid(8), 1, &levy, 1, 2);
        let mut total = 0;
        for i in 0..8 {
            for ev in p.events_in_step(i) {
                assert!(ev.time > p.grid.node(i) && ev.time <= p.grid.node(i + 1));
            }
            total += p.events_in_step(i).len();
        }
        assert_eq!(total, p.events.len());
    }

    #[test]
    fn coarsen_and_tail_preserve_the_path() {
        let levy = LevyModel::single_atom(5.0, 0.5).unwrap();
        let p = sample_driver(&grid(8), 1, &levy, 1, 2);
        let c = p.coarsen(2).unwrap();
        assert_eq!(c.n_steps(), 4);
        assert!((c.brownian[1] - (p.brownian[2] + p.brownian[3])).abs() < 1e-15);
        let t = p.tail(4).unwrap();
        assert_eq!(t.n_steps(), 4);
        assert_eq!(t.db(0), p.db(4));
        assert!(t.events.iter().all(|e| e.time > 0.5));
    }

    #[test]
    fn isometry_weight_examples() {
        let levy = LevyModel::none();
        assert_eq!(isometry_weight(&levy, |_| 0.0, 0.1), 0.0);
        let one = LevyModel::single_atom(3.0, 0.5).unwrap();
        assert!((isometry_weight(&one, |_| 2.0, 0.1) - 0.1 * 3.0 * 4.0).abs() < 1e-15);
        let two = LevyModel::atoms(2.0, vec![0.5, -0.25], vec![0.25, 0.75]).unwrap();
        let l = |e: f64| 3.0 * e;
        let brute = 0.1 * (2.0 * 0.25 * l(0.5).powi(2) + 2.0 * 0.75 * l(-0.25).powi(2));
        assert!((isometry_weight(&two, l, 0.1) - brute).abs() < 1e-14);
    }

    #[test]
    fn compensated_integral_of_zero_is_zero() {
        let levy = LevyModel::single_atom(2.0, 1.0).unwrap();
        let p = sample_driver(&grid(5), 1, &levy, 0, 0);
        assert!(compensated_integral(&p, |_, _| 0.0, &levy).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn initial_sampler_moments() {
        let s = InitialSampler::Normal { mean: 1.0, std: 2.0 };
        let v: Vec<f64> = (0..20_000).map(|i| s.sample(1, i, 4)[0]).collect();
        let (m, se) = mean_and_se(&v);
        assert!((m - 1.0).abs() < 4.0 * se);
        assert_eq!(InitialSampler::Point { value: 0.3 }.sample(2, 1, 1), vec![0.3, 0.3]);
    }
}
