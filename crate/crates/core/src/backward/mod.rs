//! Least-squares Monte Carlo solver for the mean-field BSDE on the law
//! particles (Picard iteration on the law of `Π = (X, Y, Z, Γ)`), the pivot
//! BSDE under that frozen law, and the linear `∂ₓ` BSDE.
//!
//! One backward step on node `i`:
//! `Ỹ = E[Y_{i+1} | X_i]`, `Z = E[(Y_{i+1} − Ỹ) ΔB_i | X_i] / Δ`,
//! `Γ = E[(Y_{i+1} − Ỹ) ΔM^l_i | X_i] / Δ`, `Y_i = Ỹ + Δ f(X_i, Ỹ, Z, Γ, ν_i)`,
//! where `ΔM^l_i` is the step's compensated `l`-weighted jump integral, so that
//! `E[Y_{i+1} ΔM^l_i | X_i] ≈ Δ ∫ H l dλ`.

pub mod checks;
pub mod regression;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientSet, PiStats};
use crate::config::SolverConfig;
use crate::error::{Error, Result};
use crate::forward::{ParticleEnsemble, Paths, PivotPaths, VariationPaths};
use crate::grid::TimeGrid;
use crate::measures::{EmpiricalMeasure, MeasureStats};
use crate::randomness::{compensated_integral, LevyModel};
use crate::report::mean_and_se;

pub use checks::{check_apriori_bounds, check_lipschitz_in_data, check_picard_contraction};
pub use regression::{regress_conditional, Basis, FittedBasis, Projector, RegressionSpec};

/// Regression coefficients of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRegression {
    pub basis: FittedBasis,
    pub y: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub gamma: Vec<f64>,
}

/// Grids are node-major: `y[node * m + p]`, `z[(node * m + p) * d + j]`.
/// `Z` and `Γ` are not defined at the terminal node and are stored as 0 there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BsdeSolution {
    pub grid: TimeGrid,
    pub dim: usize,
    pub m: usize,
    pub y_grid: Vec<f64>,
    pub z_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    /// One entry per non-terminal node.
    pub regression_coeffs: Vec<NodeRegression>,
    pub picard_history: Vec<f64>,
    /// Per-path `ξ_T + Σ_i Δ f_i − Σ_i Z_i·ΔB_i`: an estimator of `E[Y_0]`
    /// whose spread carries all of the path noise (the `Z·ΔB` term is a
    /// control variate). Common-random-number differences of these samples
    /// give honest standard errors for finite differences of `Y_0`.
    pub y0_samples: Vec<f64>,
    /// Accumulated projection noise of `Y` per node (standard deviation),
    /// `sqrt(Σ_{j≥i} p·var(Y_{j+1} − Ỹ_j)/M)` with `p` the basis size.
    pub noise_y: Vec<f64>,
    /// Per-node projection noise of `Z` (summed over components) and `Γ`.
    pub noise_z: Vec<f64>,
    pub noise_gamma: Vec<f64>,
}

impl BsdeSolution {
    pub fn y(&self, node: usize, p: usize) -> f64 {
        self.y_grid[node * self.m + p]
    }

    pub fn y_node(&self, node: usize) -> &[f64] {
        &self.y_grid[node * self.m..(node + 1) * self.m]
    }

    pub fn z(&self, node: usize, p: usize) -> &[f64] {
        let o = (node * self.m + p) * self.dim;
        &self.z_grid[o..o + self.dim]
    }

    pub fn gamma(&self, node: usize, p: usize) -> f64 {
        self.gamma_grid[node * self.m + p]
    }

    /// `(mean, standard error)` of `Y` at node 0.
    pub fn y0(&self) -> (f64, f64) {
        mean_and_se(&self.y0_samples)
    }

    /// Cross-sectional standard deviation of `Y_0` over paths (a regression diagnostic).
    pub fn y0_spread(&self) -> f64 {
        let v = self.y_node(0);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / v.len() as f64).sqrt()
    }

    /// Long-format CSV: `node,t,path,y,z_0..z_{d-1},gamma`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["node".to_string(), "t".into(), "path".into(), "y".into()];
        header.extend((0..self.dim).map(|j| format!("z_{j}")));
        header.push("gamma".into());
        w.write_record(&header)?;
        for k in 0..self.grid.n_nodes() {
            for p in 0..self.m {
                let mut rec = vec![k.to_string(), format!("{:e}", self.grid.node(k)), p.to_string()];
                rec.push(format!("{:e}", self.y(k, p)));
                rec.extend(self.z(k, p).iter().map(|v| format!("{v:e}")));
                rec.push(format!("{:e}", self.gamma(k, p)));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-node empirical law of `Π = (X, Y, Z, Γ)` on `ℝ^{2d+2}`.
#[derive(Debug, Clone)]
pub struct PiCloud {
    pub dim: usize,
    pub nodes: Vec<EmpiricalMeasure>,
    pub stats: Vec<PiStats>,
}

impl PiCloud {
    /// `ν⁰`: the state cloud with `Y = Z = Γ = 0`.
    pub fn initial(paths: &Paths) -> Self {
        let zeros = BsdeSolution {
            grid: paths.grid,
            dim: paths.dim,
            m: paths.m,
            y_grid: vec![0.0; paths.grid.n_nodes() * paths.m],
            z_grid: vec![0.0; paths.grid.n_nodes() * paths.m * paths.dim],
            gamma_grid: vec![0.0; paths.grid.n_nodes() * paths.m],
            regression_coeffs: Vec::new(),
            picard_history: Vec::new(),
            y0_samples: Vec::new(),
            noise_y: Vec::new(),
            noise_z: Vec::new(),
            noise_gamma: Vec::new(),
        };
        Self::from_solution(paths, &zeros)
    }

    pub fn from_solution(paths: &Paths, sol: &BsdeSolution) -> Self {
        let d = paths.dim;
        let k = 2 * d + 2;
        let (nodes, stats): (Vec<_>, Vec<_>) = (0..paths.grid.n_nodes())
            .into_par_iter()
            .map(|node| {
                let mut rows = Vec::with_capacity(paths.m * k);
                for p in 0..paths.m {
                    rows.extend_from_slice(paths.state(node, p));
                    rows.push(sol.y(node, p));
                    rows.extend_from_slice(sol.z(node, p));
                    rows.push(sol.gamma(node, p));
                }
                let st = PiStats { mean: MeasureStats::of_rows(&rows, k).mean };
                (EmpiricalMeasure::uniform(k, rows).expect("non-empty cloud"), st)
            })
            .unzip();
        Self { dim: d, nodes, stats }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Brownian and compensated-jump increments of every path, laid out
/// `db[(p * n + i) * d + j]`, `dm[p * n + i]`.
struct Increments {
    db: Vec<f64>,
    dm: Option<Vec<f64>>,
}

fn increments(c: &CoefficientSet, paths: &Paths, levy: &LevyModel) -> Increments {
    let db: Vec<f64> = paths.drivers().par_iter().flat_map_iter(|drv| drv.brownian.iter().copied()).collect();
    let weight = levy.integrate(|e| c.l(e) * c.l(e));
    let dm = (weight > 0.0).then(|| {
        paths
            .drivers()
            .par_iter()
            .flat_map_iter(|drv| compensated_integral(drv, |_, e| c.l(e), levy))
            .collect()
    });
    Increments { db, dm }
}

/// Regressor rows of one node and the resulting projector.
fn projectors(states: impl Fn(usize) -> Vec<f64> + Sync, k: usize, n: usize, spec: &RegressionSpec) -> Result<Vec<Projector>> {
    (0..n).into_par_iter().map(|i| Projector::new(&states(i), k, spec)).collect()
}

/// What a backward sweep needs to know about the equation.
struct Sweep<'a> {
    grid: TimeGrid,
    dim: usize,
    m: usize,
    projectors: &'a [Projector],
    inc: &'a Increments,
    terminal: Vec<f64>,
    /// `f(node, path, ỹ, z, γ)`.
    driver: &'a (dyn Fn(usize, usize, f64, &[f64], f64) -> f64 + Sync),
}

fn sweep(s: &Sweep) -> BsdeSolution {
    let (n, m, d) = (s.grid.n_steps(), s.m, s.dim);
    let delta = s.grid.delta();
    let nn = n + 1;
    let mut y = vec![0.0; nn * m];
    let mut z = vec![0.0; nn * m * d];
    let mut gamma = vec![0.0; nn * m];
    let mut coeffs = Vec::with_capacity(n);
    let mut pathwise = vec![0.0; m];
    let mut noise_y = vec![0.0; nn];
    let mut noise_z = vec![0.0; nn];
    let mut noise_gamma = vec![0.0; nn];
    let proj_var = |target: &[f64], fit: &[f64], p: usize| -> f64 {
        let r: Vec<f64> = target.iter().zip(fit).map(|(a, b)| a - b).collect();
        let mean = r.iter().sum::<f64>() / m as f64;
        p as f64 * r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m as f64 * m as f64)
    };
    y[n * m..].copy_from_slice(&s.terminal);
    let mut acc_var = 0.0;
    for i in (0..n).rev() {
        let proj = &s.projectors[i];
        let psize = proj.size();
        let next = &y[(i + 1) * m..(i + 2) * m];
        let (cy, ytil) = proj.project(next);
        let resid: Vec<f64> = next.iter().zip(&ytil).map(|(a, b)| a - b).collect();
        acc_var += proj_var(next, &ytil, psize);
        noise_y[i] = acc_var.sqrt();
        let mut cz = Vec::with_capacity(d);
        let mut zi = vec![0.0; m * d];
        let mut zvar = 0.0;
        for j in 0..d {
            let t: Vec<f64> = (0..m).map(|p| resid[p] * s.inc.db[(p * n + i) * d + j] / delta).collect();
            let (c, fit) = proj.project(&t);
            zvar += proj_var(&t, &fit, psize);
            for p in 0..m {
                zi[p * d + j] = fit[p];
            }
            cz.push(c);
        }
        noise_z[i] = zvar.sqrt();
        let (cg, gi) = match &s.inc.dm {
            Some(dm) => {
                let t: Vec<f64> = (0..m).map(|p| resid[p] * dm[p * n + i] / delta).collect();
                let (c, fit) = proj.project(&t);
                noise_gamma[i] = proj_var(&t, &fit, psize).sqrt();
                (c, fit)
            }
            None => (vec![0.0; psize], vec![0.0; m]),
        };
        let fvals: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|p| (s.driver)(i, p, ytil[p], &zi[p * d..(p + 1) * d], gi[p]))
            .collect();
        for p in 0..m {
            let zdb: f64 = (0..d).map(|j| zi[p * d + j] * s.inc.db[(p * n + i) * d + j]).sum();
            pathwise[p] += delta * fvals[p] - zdb;
        }
        let yi: Vec<f64> = ytil.iter().zip(&fvals).map(|(a, f)| a + delta * f).collect();
        y[i * m..(i + 1) * m].copy_from_slice(&yi);
        z[i * m * d..(i + 1) * m * d].copy_from_slice(&zi);
        gamma[i * m..(i + 1) * m].copy_from_slice(&gi);
        coeffs.push(NodeRegression { basis: proj.fitted_basis.clone(), y: cy, z: cz, gamma: cg });
    }
    coeffs.reverse();
    let y0_samples = pathwise.iter().zip(&s.terminal).map(|(a, t)| t + a).collect();
    BsdeSolution {
        grid: s.grid,
        dim: d,
        m,
        y_grid: y,
        z_grid: z,
        gamma_grid: gamma,
        regression_coeffs: coeffs,
        picard_history: Vec::new(),
        y0_samples,
        noise_y,
        noise_z,
        noise_gamma,
    }
}

fn check_finite(sol: &BsdeSolution) -> Result<()> {
    let bad = sol
        .y_grid
        .iter()
        .chain(&sol.gamma_grid)
        .chain(&sol.z_grid)
        .position(|v| !v.is_finite());
    match bad {
        None => Ok(()),
        Some(_) => Err(Error::InvalidArgument("backward recursion produced a non-finite value".into())),
    }
}

/// `sqrt(Σ_i Δ e^{β(t_i − t_0)} mean_p(|ΔY|² + |ΔZ|² + |ΔΓ|²))`.
pub fn weighted_distance(a: &BsdeSolution, b: &BsdeSolution, beta: f64) -> f64 {
    let m = a.m;
    let delta = a.grid.delta();
    let t0 = a.grid.t_start();
    let mut total = 0.0;
    for k in 0..a.grid.n_nodes() {
        let mut s = 0.0;
        for p in 0..m {
            let dy = a.y(k, p) - b.y(k, p);
            let dg = a.gamma(k, p) - b.gamma(k, p);
            let dz: f64 = a.z(k, p).iter().zip(b.z(k, p)).map(|(u, v)| (u - v) * (u - v)).sum();
            s += dy * dy + dz + dg * dg;
        }
        total += delta * (beta * (a.grid.node(k) - t0)).exp() * s / m as f64;
    }
    total.sqrt()
}

fn terminal_values(c: &CoefficientSet, paths: &Paths, law_t: &MeasureStats) -> Vec<f64> {
    (0..paths.m).into_par_iter().map(|p| c.phi(paths.state(paths.grid.n_steps(), p), law_t)).collect()
}

/// Picard iteration on the law of `Π` over the law particles.
pub fn solve_mkv_bsde(
    c: &CoefficientSet,
    ensemble: &ParticleEnsemble,
    levy: &LevyModel,
    spec: &RegressionSpec,
    cfg: &SolverConfig,
) -> Result<(BsdeSolution, PiCloud)> {
    cfg.validate()?;
    spec.validate()?;
    let paths = &ensemble.law;
    let (n, d) = (paths.grid.n_steps(), paths.dim);
    let projs = projectors(|i| paths.node_states(i).to_vec(), d, n, spec)?;
    let inc = increments(c, paths, levy);
    let terminal = terminal_values(c, paths, &ensemble.law_stats[n]);
    let mut cloud = PiCloud::initial(paths);
    let mut prev: Option<BsdeSolution> = None;
    let mut history = Vec::new();
    for _ in 0..cfg.picard_max_iters {
        let nu = &cloud.stats;
        let driver = |i: usize, p: usize, y: f64, z: &[f64], g: f64| c.f(paths.state(i, p), y, z, g, &nu[i]);
        let mut sol = sweep(&Sweep {
            grid: paths.grid,
            dim: d,
            m: paths.m,
            projectors: &projs,
            inc: &inc,
            terminal: terminal.clone(),
            driver: &driver,
        });
        check_finite(&sol)?;
        let dist = match &prev {
            Some(p) => weighted_distance(&sol, p, cfg.beta_weight),
            None => weighted_distance(&sol, &zero_like(&sol), cfg.beta_weight),
        };
        history.push(dist);
        cloud = PiCloud::from_solution(paths, &sol);
        // relative to the size of the first iterate, floored at 1
        if dist < cfg.picard_tol * history[0].max(1.0) {
            sol.picard_history = history;
            return Ok((sol, cloud));
        }
        prev = Some(sol);
    }
    Err(Error::PicardNotConverged { iterations: cfg.picard_max_iters, last: *history.last().unwrap(), history })
}

fn zero_like(s: &BsdeSolution) -> BsdeSolution {
    BsdeSolution {
        y_grid: vec![0.0; s.y_grid.len()],
        z_grid: vec![0.0; s.z_grid.len()],
        gamma_grid: vec![0.0; s.gamma_grid.len()],
        ..s.clone()
    }
}

/// One backward sweep on the pivot paths under the frozen law `cloud`.
pub fn solve_pivot_bsde(
    c: &CoefficientSet,
    pivots: &PivotPaths,
    cloud: &PiCloud,
    levy: &LevyModel,
    spec: &RegressionSpec,
    cfg: &SolverConfig,
) -> Result<BsdeSolution> {
    cfg.validate()?;
    let paths = &pivots.paths;
    let (n, d) = (paths.grid.n_steps(), paths.dim);
    if cloud.n_nodes() != n + 1 {
        return Err(Error::DimensionMismatch { expected: n + 1, got: cloud.n_nodes() });
    }
    let projs = projectors(|i| paths.node_states(i).to_vec(), d, n, spec)?;
    let inc = increments(c, paths, levy);
    let terminal = terminal_values(c, paths, &pivots.law_stats[n]);
    let nu = &cloud.stats;
    let driver = |i: usize, p: usize, y: f64, z: &[f64], g: f64| c.f(paths.state(i, p), y, z, g, &nu[i]);
    let sol = sweep(&Sweep { grid: paths.grid, dim: d, m: paths.m, projectors: &projs, inc: &inc, terminal, driver: &driver });
    check_finite(&sol)?;
    Ok(sol)
}

/// The linear BSDE for `∂ₓ(Y, Z, Γ)` along the pivot paths, one solution per
/// direction `x_r`. Law terms stay frozen; the driver is the linearization of
/// `f` at the pivot's `Π`. Regressors are `(X, ∂ₓX)`.
pub fn solve_dx_bsde(
    c: &CoefficientSet,
    pivots: &PivotPaths,
    dx: &VariationPaths,
    pivot_solution: &BsdeSolution,
    levy: &LevyModel,
    spec: &RegressionSpec,
    cfg: &SolverConfig,
) -> Result<Vec<BsdeSolution>> {
    cfg.validate()?;
    if dx.dx_paths.is_none() {
        return Err(Error::MissingDerivative("∂ₓX paths".into()));
    }
    let paths = &pivots.paths;
    let (n, d, m) = (paths.grid.n_steps(), paths.dim, paths.m);
    let k = d + d * d;
    let projs = projectors(
        |i| {
            let mut rows = Vec::with_capacity(m * k);
            for p in 0..m {
                rows.extend_from_slice(paths.state(i, p));
                rows.extend_from_slice(dx.dx(p, i));
            }
            rows
        },
        k,
        n,
        spec,
    )?;
    let inc = increments(c, paths, levy);
    (0..d)
        .map(|r| {
            let terminal: Vec<f64> = (0..m)
                .into_par_iter()
                .map(|p| {
                    let g = c.dphi_dx(paths.state(n, p));
                    let dm = dx.dx(p, n);
                    (0..d).map(|l| g[l] * dm[l * d + r]).sum()
                })
                .collect();
            let driver = |i: usize, p: usize, y: f64, z: &[f64], g: f64| {
                let x = paths.state(i, p);
                let (fx, fy, fz, fh) = c.df(x, pivot_solution.y(i, p));
                let dm = dx.dx(p, i);
                let xpart: f64 = (0..d).map(|l| fx * dm[l * d + r]).sum();
                xpart + fy * y + fz * z.iter().sum::<f64>() + fh * g
            };
            let sol = sweep(&Sweep { grid: paths.grid, dim: d, m, projectors: &projs, inc: &inc, terminal, driver: &driver });
            check_finite(&sol)?;
            Ok(sol)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::forward::{drivers, simulate_law_ensemble, simulate_pivot, simulate_pivot_with};
    use crate::randomness::InitialSampler;

    fn cfg(m: usize) -> SolverConfig {
        SolverConfig { n_particles: m, ..Default::default() }
    }

    fn ens(c: &CoefficientSet, n: usize, m: usize, levy: &LevyModel, xi: InitialSampler) -> ParticleEnsemble {
        let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
        simulate_law_ensemble(c, &xi, &grid, m, levy, 7).unwrap()
    }

    #[test]
    fn zero_driver_constant_terminal_is_exact() {
        let c = CoefficientSet::instantiate("bsde_law_mean_driver", &[("k", 0.0), ("c", 1.7)]).unwrap();
        let levy = LevyModel::none();
        let e = ens(&c, 10, 200, &levy, InitialSampler::Normal { mean: 0.0, std: 1.0 });
        let (sol, cloud) = solve_mkv_bsde(&c, &e, &levy, &RegressionSpec::default(), &cfg(200)).unwrap();
        assert!(sol.y_grid.iter().all(|v| (v - 1.7).abs() < 1e-13));
        assert!(sol.z_grid.iter().all(|v| v.abs() < 1e-13));
        assert!(sol.gamma_grid.iter().all(|v| *v == 0.0));
        assert_eq!(sol.picard_history.len(), 2);
        assert_eq!(sol.picard_history[1], 0.0);
        assert_eq!(cloud.n_nodes(), 11);
        assert_eq!(cloud.len(), 200);
    }

    #[test]
    fn constant_driver_is_linear_in_time() {
        let c = CoefficientSet::instantiate("bsde_law_mean_driver", &[("k", 0.0), ("c", 0.5), ("driver.constant", 2.0)])
            .unwrap();
        let levy = LevyModel::none();
        let e = ens(&c, 8, 100, &levy, InitialSampler::Normal { mean: 0.0, std: 1.0 });
        let (sol, _) = solve_mkv_bsde(&c, &e, &levy, &RegressionSpec::default(), &cfg(100)).unwrap();
        for k in 0..=8 {
            let want = 0.5 + 2.0 * (1.0 - e.grid().node(k));
            for p in 0..100 {
                assert!((sol.y(k, p) - want).abs() < 1e-12, "{} vs {want}", sol.y(k, p));
            }
        }
    }

    #[test]
    fn law_mean_driver_tracks_exponential() {
        let c = CoefficientSet::instantiate("bsde_law_mean_driver", &[]).unwrap();
        let levy = LevyModel::none();
        let e = ens(&c, 50, 500, &levy, InitialSampler::Point { value: 0.0 });
        let (sol, _) = solve_mkv_bsde(&c, &e, &levy, &RegressionSpec::default(), &cfg(500)).unwrap();
        let (y0, _) = sol.y0();
        assert!((y0 - 1f64.exp()).abs() < 5.0 / 50.0, "{y0}");
        let h = &sol.picard_history;
        assert!(h.len() <= 12, "{h:?}");
        for w in h.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn terminal_is_exact_each_iteration() {
        let c = CoefficientSet::instantiate("quadratic_terminal", &[("s", 0.4)]).unwrap();
        let levy = LevyModel::single_atom(1.0, 0.5).unwrap();
        let e = ens(&c, 10, 300, &levy, InitialSampler::Normal { mean: 0.0, std: 1.0 });
        let (sol, _) = solve_mkv_bsde(&c, &e, &levy, &RegressionSpec::default(), &cfg(300)).unwrap();
        for p in 0..300 {
            assert_eq!(sol.y(10, p), c.phi(e.law.state(10, p), &e.law_stats[10]));
        }
    }

    #[test]
    fn zero_driver_is_martingale_projection() {
        let c = CoefficientSet::instantiate("quadratic_terminal", &[("s", 0.4)]).unwrap();
        let levy = LevyModel::none();
        let e = ens(&c, 6, 300, &levy, InitialSampler::Normal { mean: 0.0, std: 1.0 });
        let spec = RegressionSpec::default();
        let (sol, _) = solve_mkv_bsde(&c, &e, &levy, &spec, &cfg(300)).unwrap();
        for i in 0..6 {
            let (_, fit) = regress_conditional(sol.y_node(i + 1), e.law.node_states(i), 1, &spec).unwrap();
            for p in 0..300 {
                assert_eq!(sol.y(i, p), fit[p]);
            }
        }
    }

    #[test]
    fn driftless_pivot_is_martingale_with_z_equal_sigma() {
        let c = CoefficientSet::instantiate("linear_terminal_plus_law_mean", &[("s", 0.3)]).unwrap();
        let levy = LevyModel::none();
        let e = ens(&c, 20, 200, &levy, InitialSampler::Normal { mean: 0.5, std: 1.0 });
        let (_, cloud) = solve_mkv_bsde(&c, &e, &levy, &RegressionSpec::default(), &cfg(200)).unwrap();
        let pv = simulate_pivot(&c, &[0.2], &e, 4000, &levy, 7).unwrap();
        let sol = solve_pivot_bsde(&c, &pv, &cloud, &levy, &RegressionSpec::default(), &cfg(4000)).unwrap();
        let m_t = e.law_stats[20].mean[0];
        // per-node intercept noise accumulates along the sweep
        for k in [0, 5, 19] {
            let zbar = (0..4000).map(|p| sol.z(k, p)[0]).sum::<f64>() / 4000.0;
            assert!((zbar - 0.3).abs() < 0.02, "{zbar}");
            for p in (0..4000).step_by(97) {
                let x = pv.paths.state(k, p)[0];
                assert!((sol.y(k, p) - (x + m_t)).abs() < 0.02, "{k}: {} vs {}", sol.y(k, p), x + m_t);
                if k < 20 {
                    assert!((sol.z(k, p)[0] - 0.3).abs() < 0.1, "{}", sol.z(k, p)[0]);
                }
            }
        }
    }

    #[test]
    fn pivot_zero_dynamics_law_mean_terminal() {
        let c = CoefficientSet::instantiate("linear_terminal_plus_law_mean", &[("s", 0.0)]).unwrap();
        let levy = LevyModel::none();
        let e = ens(&c, 5, 100, &levy, InitialSampler::Normal { mean: 0.3, std: 1.0 });
        let (_, cloud) = solve_mkv_bsde(&c, &e, &levy, &RegressionSpec::default(), &cfg(100)).unwrap();
        let pv = simulate_pivot(&c, &[0.7], &e, 50, &levy, 7).unwrap();
        let sol = solve_pivot_bsde(&c, &pv, &cloud, &levy, &RegressionSpec::default(), &cfg(50)).unwrap();
        let want = 0.7 + e.law_stats[0].mean[0];
        assert!((sol.y0().0 - want).abs() < 1e-12);
    }

    #[test]
    fn dx_bsde_trivial_cases() {
        let levy = LevyModel::none();
        for (name, want) in [("linear_terminal_plus_law_mean", 1.0), ("quadratic_terminal", 1.2)] {
            let c = CoefficientSet::instantiate(name, &[("s", 0.0)]).unwrap();
            let e = ens(&c, 5, 50, &levy, InitialSampler::Point { value: 0.0 });
            let (_, cloud) = solve_mkv_bsde(&c, &e, &levy, &RegressionSpec::default(), &cfg(50)).unwrap();
            let pv = simulate_pivot(&c, &[0.6], &e, 20, &levy, 3).unwrap();
            let ps = solve_pivot_bsde(&c, &pv, &cloud, &levy, &RegressionSpec::default(), &cfg(20)).unwrap();
            let dx = crate::forward::simulate_dx(&c, &pv, &levy).unwrap();
            let s = solve_dx_bsde(&c, &pv, &dx, &ps, &levy, &RegressionSpec::default(), &cfg(20)).unwrap();
            assert_eq!(s.len(), 1);
            assert!(s[0].y_grid.iter().all(|v| (v - want).abs() < 1e-12), "{name}");
        }
    }

    #[test]
    fn dx_bsde_matches_crn_difference() {
        let c = CoefficientSet::instantiate("quadratic_terminal", &[("s", 0.3), ("driver.sine", 0.5), ("drift.sine", 0.4)])
            .unwrap();
        let levy = LevyModel::single_atom(1.0, 0.4).unwrap();
        let e = ens(&c, 20, 500, &levy, InitialSampler::Normal { mean: 0.0, std: 0.5 });
        let spec = RegressionSpec::polynomial(3);
        let (_, cloud) = solve_mkv_bsde(&c, &e, &levy, &spec, &cfg(500)).unwrap();
        let drv = Arc::new(drivers(e.grid(), 1, &levy, 2000, crate::forward::PIVOT_STREAM_BASE, 11));
        let solve_at = |x: f64| {
            let pv = simulate_pivot_with(&c, &vec![x; 2000], drv.clone(), e.law_stats.clone(), &levy).unwrap();
            let s = solve_pivot_bsde(&c, &pv, &cloud, &levy, &spec, &cfg(2000)).unwrap();
            (pv, s)
        };
        let (pv, s0) = solve_at(0.3);
        let dx = crate::forward::simulate_dx(&c, &pv, &levy).unwrap();
        let dsol = solve_dx_bsde(&c, &pv, &dx, &s0, &levy, &spec, &cfg(2000)).unwrap();
        let h = 1e-3;
        let fd = (solve_at(0.3 + h).1.y0().0 - solve_at(0.3 - h).1.y0().0) / (2.0 * h);
        let (an, se) = dsol[0].y0();
        assert!((an - fd).abs() < 3.0 * se + 0.02, "{an} vs {fd} (se {se})");
    }
}
