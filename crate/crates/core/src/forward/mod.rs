//! Interacting-particle simulation of the law-carrying SDE and of the pivot SDE
//! driven by the frozen particle law.
//!
//! Euler convention: coefficients are frozen at the left node of each step and
//! the law is the particle cloud at that node. Jumps are applied at their event
//! times; the jump coefficient sees the pre-jump state, which within a step is
//! the node state plus the earlier jumps of that step (the continuous increment
//! is added at the end of the step).

pub mod checks;
pub mod variation;

use std::sync::Arc;

use rayon::prelude::*;

use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::measures::{EmpiricalMeasure, MeasureStats};
use crate::randomness::{sample_driver, DriverPath, InitialSampler, JumpEvent, LevyModel};

pub use checks::{check_flow_property, check_moment_estimates, FlowOptions, MomentOptions};
pub use variation::{lifted_dmu_oracle, simulate_dmu, simulate_dx, VariationPaths};

/// Stream ids of pivot paths start here; law paths use `0..M`.
pub const PIVOT_STREAM_BASE: u64 = 1 << 40;
/// Stream ids of the auxiliary pivots started at the measure-derivative argument `y`.
pub const AUX_STREAM_BASE: u64 = 2 << 40;

pub fn drivers(grid: &TimeGrid, dim: usize, levy: &LevyModel, count: usize, first_stream: u64, seed: u64) -> Vec<DriverPath> {
    (0..count)
        .into_par_iter()
        .map(|i| sample_driver(grid, dim, levy, first_stream + i as u64, seed))
        .collect()
}

/// Particle paths stored node-major: `states[(node * m + i) * dim + j]`.
#[derive(Debug, Clone)]
pub struct Paths {
    pub grid: TimeGrid,
    pub dim: usize,
    pub m: usize,
    states: Vec<f64>,
    drivers: Arc<Vec<DriverPath>>,
}

impl Paths {
    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn state(&self, node: usize, i: usize) -> &[f64] {
        let o = (node * self.m + i) * self.dim;
        &self.states[o..o + self.dim]
    }

    /// All particle states at `node`, row-major.
    pub fn node_states(&self, node: usize) -> &[f64] {
        let w = self.m * self.dim;
        &self.states[node * w..(node + 1) * w]
    }

    pub fn path(&self, i: usize) -> Vec<Vec<f64>> {
        (0..self.grid.n_nodes()).map(|k| self.state(k, i).to_vec()).collect()
    }

    pub fn drivers(&self) -> &Arc<Vec<DriverPath>> {
        &self.drivers
    }

    pub fn terminal(&self) -> &[f64] {
        self.node_states(self.grid.n_steps())
    }
}

/// Law-carrying particle cloud plus (optionally) a pivot ensemble.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub law: Paths,
    /// Mean of the particle cloud at every node.
    pub law_stats: Arc<Vec<MeasureStats>>,
    pub initial_sampler_name: String,
    pub pivot: Option<PivotPaths>,
}

impl ParticleEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.law.grid
    }

    pub fn dim(&self) -> usize {
        self.law.dim
    }

    pub fn m(&self) -> usize {
        self.law.m
    }

    /// Empirical law at `node`: exactly the cloud of law-path values there.
    pub fn snapshot(&self, node: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(self.dim(), self.law.node_states(node).to_vec()).expect("non-empty cloud")
    }

    pub fn initial_cloud(&self) -> EmpiricalMeasure {
        self.snapshot(0)
    }
}

/// Pivot paths driven by a frozen law.
#[derive(Debug, Clone)]
pub struct PivotPaths {
    pub paths: Paths,
    pub law_stats: Arc<Vec<MeasureStats>>,
}

/// One Euler step of component `i`'s scalar dynamics; returns the new value.
#[inline]
pub(crate) fn euler_component(
    c: &CoefficientSet,
    x0: f64,
    m: f64,
    db: f64,
    events: &[JumpEvent],
    quad: &[(f64, f64)],
    delta: f64,
) -> f64 {
    let comp: f64 = quad.iter().map(|(e, w)| w * c.beta(x0, m, *e)).sum();
    let cont = c.b(x0, m) * delta + c.sigma(x0, m) * db - delta * comp;
    let mut pre = x0;
    for ev in events {
        pre += c.beta(pre, m, ev.mark);
    }
    pre + cont
}

fn advance(
    c: &CoefficientSet,
    prev: &[f64],
    next: &mut [f64],
    law: &MeasureStats,
    drivers: &[DriverPath],
    step: usize,
    quad: &[(f64, f64)],
    delta: f64,
) -> Result<()> {
    let d = law.mean.len();
    let bad = next
        .par_chunks_mut(d)
        .zip(prev.par_chunks(d))
        .enumerate()
        .map(|(p, (out, x))| {
            let drv = &drivers[p];
            let db = drv.db(step);
            let ev = drv.events_in_step(step);
            for j in 0..d {
                out[j] = euler_component(c, x[j], law.mean[j], db[j], ev, quad, delta);
            }
            if out.iter().all(|v| v.is_finite()) {
                None
            } else {
                Some(p)
            }
        })
        .filter_map(|b| b)
        .min();
    match bad {
        Some(path) => Err(Error::NonFiniteState { step, path }),
        None => Ok(()),
    }
}

fn check_drivers(grid: &TimeGrid, dim: usize, drivers: &[DriverPath], count: usize) -> Result<()> {
    if drivers.len() != count {
        return Err(Error::DimensionMismatch { expected: count, got: drivers.len() });
    }
    for d in drivers {
        if d.grid != *grid || d.dim != dim {
            return Err(Error::InvalidArgument("driver paths must share the grid and dimension".into()));
        }
    }
    Ok(())
}

/// Self-consistent particle scheme from explicit initial values and drivers.
pub fn simulate_law_with(
    c: &CoefficientSet,
    initial: &[f64],
    drivers: Arc<Vec<DriverPath>>,
    levy: &LevyModel,
    initial_sampler_name: &str,
) -> Result<ParticleEnsemble> {
    let d = c.dim;
    if initial.is_empty() || initial.len() % d != 0 {
        return Err(Error::DimensionMismatch { expected: d, got: initial.len() % d.max(1) });
    }
    let m = initial.len() / d;
    if m < 2 {
        return Err(Error::InvalidArgument("need at least 2 particles".into()));
    }
    let grid = drivers.first().map(|p| p.grid).ok_or(Error::EmptyCloud)?;
    check_drivers(&grid, d, &drivers, m)?;
    let n = grid.n_steps();
    let w = m * d;
    let mut states = vec![0.0; (n + 1) * w];
    states[..w].copy_from_slice(initial);
    let mut stats = Vec::with_capacity(n + 1);
    let quad = levy.quadrature();
    let delta = grid.delta();
    for k in 0..n {
        let (head, tail) = states.split_at_mut((k + 1) * w);
        let prev = &head[k * w..];
        let law = MeasureStats::of_rows(prev, d);
        advance(c, prev, &mut tail[..w], &law, &drivers, k, quad, delta)?;
        stats.push(law);
    }
    stats.push(MeasureStats::of_rows(&states[n * w..], d));
    Ok(ParticleEnsemble {
        law: Paths { grid, dim: d, m, states, drivers },
        law_stats: Arc::new(stats),
        initial_sampler_name: initial_sampler_name.to_string(),
        pivot: None,
    })
}

pub fn sample_initial(xi: &InitialSampler, dim: usize, m: usize, seed: u64) -> Vec<f64> {
    (0..m).into_par_iter().flat_map_iter(|i| xi.sample(dim, i as u64, seed)).collect()
}

/// Law part of the ensemble: `M` particles, streams `0..M`.
pub fn simulate_law_ensemble(
    c: &CoefficientSet,
    xi: &InitialSampler,
    grid: &TimeGrid,
    m: usize,
    levy: &LevyModel,
    seed: u64,
) -> Result<ParticleEnsemble> {
    if m < 2 {
        return Err(Error::InvalidArgument("need at least 2 particles".into()));
    }
    let initial = sample_initial(xi, c.dim, m, seed);
    let drv = Arc::new(drivers(grid, c.dim, levy, m, 0, seed));
    simulate_law_with(c, &initial, drv, levy, &xi.name())
}

/// Pivot paths from explicit starting points (one row per path) and drivers, under a frozen law.
pub fn simulate_pivot_with(
    c: &CoefficientSet,
    starts: &[f64],
    drivers: Arc<Vec<DriverPath>>,
    law_stats: Arc<Vec<MeasureStats>>,
    levy: &LevyModel,
) -> Result<PivotPaths> {
    let d = c.dim;
    if starts.is_empty() || starts.len() % d != 0 {
        return Err(Error::DimensionMismatch { expected: d, got: starts.len() % d.max(1) });
    }
    let m = starts.len() / d;
    let grid = drivers.first().map(|p| p.grid).ok_or(Error::EmptyCloud)?;
    check_drivers(&grid, d, &drivers, m)?;
    if law_stats.len() != grid.n_nodes() {
        return Err(Error::DimensionMismatch { expected: grid.n_nodes(), got: law_stats.len() });
    }
    let n = grid.n_steps();
    let w = m * d;
    let mut states = vec![0.0; (n + 1) * w];
    states[..w].copy_from_slice(starts);
    let quad = levy.quadrature();
    let delta = grid.delta();
    for k in 0..n {
        let (head, tail) = states.split_at_mut((k + 1) * w);
        advance(c, &head[k * w..], &mut tail[..w], &law_stats[k], &drivers, k, quad, delta)?;
    }
    Ok(PivotPaths { paths: Paths { grid, dim: d, m, states, drivers }, law_stats })
}

/// `M′` pivot paths started at `x` with streams disjoint from the law paths.
pub fn simulate_pivot(
    c: &CoefficientSet,
    x: &[f64],
    ensemble: &ParticleEnsemble,
    m_prime: usize,
    levy: &LevyModel,
    seed: u64,
) -> Result<PivotPaths> {
    if x.len() != c.dim {
        return Err(Error::DimensionMismatch { expected: c.dim, got: x.len() });
    }
    let grid = ensemble.grid();
    let drv = Arc::new(drivers(grid, c.dim, levy, m_prime, PIVOT_STREAM_BASE, seed));
    let starts: Vec<f64> = (0..m_prime).flat_map(|_| x.iter().copied()).collect();
    simulate_pivot_with(c, &starts, drv, ensemble.law_stats.clone(), levy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TimeGrid {
        TimeGrid::new(0.0, 1.0, 20).unwrap()
    }

    fn normal() -> InitialSampler {
        InitialSampler::Normal { mean: 0.5, std: 1.0 }
    }

    #[test]
    fn zero_family_paths_are_constant() {
        let c = CoefficientSet::instantiate("zero", &[]).unwrap();
        let levy = LevyModel::single_atom(2.0, 0.5).unwrap();
        let e = simulate_law_ensemble(&c, &normal(), &grid(), 50, &levy, 1).unwrap();
        for i in 0..50 {
            let p = e.law.path(i);
            assert!(p.iter().all(|s| s == &p[0]));
        }
        let pv = simulate_pivot(&c, &[0.3], &e, 10, &levy, 1).unwrap();
        assert!(pv.paths.terminal().iter().all(|v| *v == 0.3));
    }

    #[test]
    fn constant_drift_transports_exactly() {
        let c = CoefficientSet::instantiate("constant_drift", &[("b0", 1.0)]).unwrap();
        let e = simulate_law_ensemble(&c, &normal(), &grid(), 40, &LevyModel::none(), 2).unwrap();
        for i in 0..40 {
            assert!((e.law.state(20, i)[0] - (e.law.state(0, i)[0] + 1.0)).abs() < 1e-12);
        }
        let pv = simulate_pivot(&c, &[0.25], &e, 5, &LevyModel::none(), 2).unwrap();
        assert!(pv.paths.terminal().iter().all(|v| (v - 1.25).abs() < 1e-12));
    }

    #[test]
    fn mean_reversion_preserves_the_cloud_mean() {
        let c = CoefficientSet::instantiate("mean_reverting_to_law_mean", &[("kappa", 1.0)]).unwrap();
        let e = simulate_law_ensemble(&c, &normal(), &grid(), 200, &LevyModel::none(), 3).unwrap();
        let m0 = e.law_stats[0].mean[0];
        for s in e.law_stats.iter() {
            assert!((s.mean[0] - m0).abs() < 1e-10);
        }
    }

    #[test]
    fn snapshots_are_the_law_cloud() {
        let c = CoefficientSet::instantiate("mean_reverting_to_law_mean", &[("s", 0.3)]).unwrap();
        let e = simulate_law_ensemble(&c, &normal(), &grid(), 30, &LevyModel::none(), 4).unwrap();
        let snap = e.snapshot(7);
        for i in 0..30 {
            assert_eq!(snap.sample(i), e.law.state(7, i));
        }
        assert!((snap.mean()[0] - e.law_stats[7].mean[0]).abs() < 1e-14);
    }

    #[test]
    fn non_finite_state_is_reported_with_its_step() {
        let c = CoefficientSet::instantiate("zero", &[("drift.linear", 1e308)]).unwrap();
        let err = simulate_law_ensemble(&c, &normal(), &grid(), 10, &LevyModel::none(), 5).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { step: 0, .. }), "{err}");
    }
}
