//! Statistical checks of the forward system: flow property and moment estimates.

use std::sync::Arc;

use super::{drivers, sample_initial, simulate_law_with, simulate_pivot_with, ParticleEnsemble, PivotPaths, PIVOT_STREAM_BASE};
use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::measures::{w2, EmpiricalMeasure};
use crate::randomness::{DriverPath, InitialSampler, LevyModel};
use crate::report::{mean_and_se, StatCheckReport};

#[derive(Debug, Clone)]
pub struct FlowOptions {
    pub xi: InitialSampler,
    pub x: Vec<f64>,
    pub m: usize,
    pub levy: LevyModel,
    pub seed: u64,
    /// Declared `C` in `discrepancy ≤ C·Δ`.
    pub c_declared: f64,
    pub k_sigma: f64,
}

/// Outcome of one flow-property run.
#[derive(Debug, Clone)]
pub struct FlowOutcome {
    pub report: StatCheckReport,
    pub discrepancy: f64,
    pub delta: f64,
}

fn split_drivers(drv: &[DriverPath], f: impl Fn(&DriverPath) -> Result<DriverPath> + Sync) -> Result<Vec<DriverPath>> {
    drv.iter().map(f).collect()
}

/// Flow check: simulate on `grid`, then restart at `split_node` from the
/// pivot states and the law cloud there, on the grid tail refined by 2 with the
/// same Brownian paths and jump events. The discrepancy is the max over the
/// tail nodes of the root-mean-square pivot gap.
pub fn check_flow_property(
    c: &CoefficientSet,
    grid: &TimeGrid,
    split_node: usize,
    opts: &FlowOptions,
) -> Result<FlowOutcome> {
    if split_node == 0 || split_node >= grid.n_steps() {
        return Err(Error::InvalidArgument("split node must be interior".into()));
    }
    let d = c.dim;
    let fine = grid.refine(2)?;
    let law_fine = drivers(&fine, d, &opts.levy, opts.m, 0, opts.seed);
    let piv_fine = drivers(&fine, d, &opts.levy, opts.m, PIVOT_STREAM_BASE, opts.seed);
    let law_coarse = Arc::new(split_drivers(&law_fine, |p| p.coarsen(2))?);
    let piv_coarse = Arc::new(split_drivers(&piv_fine, |p| p.coarsen(2))?);
    let init = sample_initial(&opts.xi, d, opts.m, opts.seed);
    let ens = simulate_law_with(c, &init, law_coarse, &opts.levy, &opts.xi.name())?;
    let starts: Vec<f64> = (0..opts.m).flat_map(|_| opts.x.iter().copied()).collect();
    let piv = simulate_pivot_with(c, &starts, piv_coarse, ens.law_stats.clone(), &opts.levy)?;

    let law_tail = Arc::new(split_drivers(&law_fine, |p| p.tail(2 * split_node))?);
    let piv_tail = Arc::new(split_drivers(&piv_fine, |p| p.tail(2 * split_node))?);
    let re_law = simulate_law_with(c, ens.law.node_states(split_node), law_tail, &opts.levy, "restart")?;
    let re_piv =
        simulate_pivot_with(c, piv.paths.node_states(split_node), piv_tail, re_law.law_stats.clone(), &opts.levy)?;

    let mut disc = 0.0f64;
    for k in split_node..grid.n_nodes() {
        let a = piv.paths.node_states(k);
        let b = re_piv.paths.node_states(2 * (k - split_node));
        let ms: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / opts.m as f64;
        disc = disc.max(ms.sqrt());
    }
    let delta = grid.delta();
    let mut report = StatCheckReport::upper_bound(
        format!("flow_property/{}", c.registry_name),
        disc,
        0.0,
        opts.c_declared * delta,
        opts.k_sigma,
        0.0,
        opts.m as u64,
    );
    report.note(format!("delta={delta:e}; fitted_c={:e}; split_node={split_node}", disc / delta));
    Ok(FlowOutcome { report, discrepancy: disc, delta })
}

#[derive(Debug, Clone)]
pub struct MomentOptions {
    pub xi: InitialSampler,
    pub xi_hat: InitialSampler,
    pub x: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub m: usize,
    /// Window length for the small-time estimate.
    pub h: f64,
    /// Steps used to resolve each small-time window.
    pub window_steps: usize,
    pub levy: LevyModel,
    pub seed: u64,
    pub k_sigma: f64,
    /// Allowed relative change of a fitted constant under grid refinement.
    pub stability: f64,
}

struct Pair {
    ens: ParticleEnsemble,
    piv: PivotPaths,
    ens_hat: ParticleEnsemble,
    piv_hat: PivotPaths,
}

fn simulate_pair(c: &CoefficientSet, grid_drivers: (&[DriverPath], &[DriverPath]), o: &MomentOptions) -> Result<Pair> {
    let d = c.dim;
    let (law_d, piv_d) = grid_drivers;
    let law_d = Arc::new(law_d.to_vec());
    let piv_d = Arc::new(piv_d.to_vec());
    let one = |xi: &InitialSampler, x: &[f64]| -> Result<(ParticleEnsemble, PivotPaths)> {
        let init = sample_initial(xi, d, o.m, o.seed);
        let ens = simulate_law_with(c, &init, law_d.clone(), &o.levy, &xi.name())?;
        let starts: Vec<f64> = (0..o.m).flat_map(|_| x.iter().copied()).collect();
        let piv = simulate_pivot_with(c, &starts, piv_d.clone(), ens.law_stats.clone(), &o.levy)?;
        Ok((ens, piv))
    };
    let (ens, piv) = one(&o.xi, &o.x)?;
    let (ens_hat, piv_hat) = one(&o.xi_hat, &o.x_hat)?;
    Ok(Pair { ens, piv, ens_hat, piv_hat })
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Per-path `sup_s |X_s − X̂_s|²` over the pivot pair.
fn sup_gap(p: &Pair) -> Vec<f64> {
    let nn = p.piv.paths.grid.n_nodes();
    (0..p.piv.paths.m)
        .map(|i| (0..nn).map(|k| sq(p.piv.paths.state(k, i), p.piv_hat.paths.state(k, i))).fold(0.0, f64::max))
        .collect()
}

fn sup_norm(p: &Pair) -> Vec<f64> {
    let nn = p.piv.paths.grid.n_nodes();
    let z = vec![0.0; p.piv.paths.dim];
    (0..p.piv.paths.m)
        .map(|i| (0..nn).map(|k| sq(p.piv.paths.state(k, i), &z)).fold(0.0, f64::max))
        .collect()
}

fn law_w2_ratio(p: &Pair) -> Result<f64> {
    let d = p.ens.dim();
    let cloud = |e: &ParticleEnsemble, k: usize| EmpiricalMeasure::uniform(d, e.law.node_states(k).to_vec());
    let w0 = w2(&cloud(&p.ens, 0)?, &cloud(&p.ens_hat, 0)?)?.distance;
    let mut sup = 0.0f64;
    for k in 0..p.ens.grid().n_nodes() {
        sup = sup.max(w2(&cloud(&p.ens, k)?, &cloud(&p.ens_hat, k)?)?.distance);
    }
    Ok(if w0 > 0.0 { sup / w0 } else { 0.0 })
}

fn stability_report(name: String, coarse: (f64, f64), fine: (f64, f64), o: &MomentOptions, samples: u64) -> StatCheckReport {
    let tol = o.stability * fine.0.abs().max(coarse.0.abs());
    let se = (coarse.1 * coarse.1 + fine.1 * fine.1).sqrt();
    let mut r = StatCheckReport::equality(name, coarse.0, se, fine.0, o.k_sigma, tol, samples);
    r.note(format!("fitted_constant_coarse={:e}; fitted_constant_fine={:e}", coarse.0, fine.0));
    r
}

/// Monte Carlo left sides of the standard forward estimates at `p = 2`, each
/// turned into a fitted constant and checked for stability under refinement
/// of `grid`; the small-time estimate is checked for linear scaling in `h`.
pub fn check_moment_estimates(c: &CoefficientSet, grid: &TimeGrid, o: &MomentOptions) -> Result<Vec<StatCheckReport>> {
    let d = c.dim;
    let fine = grid.refine(2)?;
    let law_f = drivers(&fine, d, &o.levy, o.m, 0, o.seed);
    let piv_f = drivers(&fine, d, &o.levy, o.m, PIVOT_STREAM_BASE, o.seed);
    let law_c: Vec<DriverPath> = law_f.iter().map(|p| p.coarsen(2)).collect::<Result<_>>()?;
    let piv_c: Vec<DriverPath> = piv_f.iter().map(|p| p.coarsen(2)).collect::<Result<_>>()?;
    let pc = simulate_pair(c, (&law_c, &piv_c), o)?;
    let pf = simulate_pair(c, (&law_f, &piv_f), o)?;
    let samples = o.m as u64;
    let fam = &c.registry_name;

    let init_w2 = w2(&pc.ens.initial_cloud(), &pc.ens_hat.initial_cloud())?.distance;
    let denom = sq(&o.x, &o.x_hat) + init_w2 * init_w2;
    let fit = |v: Vec<f64>, den: f64| {
        let (mu, se) = mean_and_se(&v);
        if den > 0.0 {
            (mu / den, se / den)
        } else {
            (mu, se)
        }
    };
    let mut out = Vec::new();
    out.push(stability_report(
        format!("moment_lipschitz_pivot/{fam}"),
        fit(sup_gap(&pc), denom),
        fit(sup_gap(&pf), denom),
        o,
        samples,
    ));
    let growth = 1.0 + o.x.iter().map(|v| v * v).sum::<f64>();
    out.push(stability_report(
        format!("moment_growth_pivot/{fam}"),
        fit(sup_norm(&pc), growth),
        fit(sup_norm(&pf), growth),
        o,
        samples,
    ));
    out.push(stability_report(
        format!("moment_law_w2/{fam}"),
        (law_w2_ratio(&pc)?, 0.0),
        (law_w2_ratio(&pf)?, 0.0),
        o,
        samples,
    ));
    out.push(small_time_scaling(c, grid.t_start(), o)?);
    Ok(out)
}

/// `E[sup_{[t,t+h]} (|X^ξ − ξ|² + |X^x − x|²)]` on a window grid of `window_steps` steps.
pub fn small_time_moment(c: &CoefficientSet, t: f64, h: f64, o: &MomentOptions) -> Result<(f64, f64)> {
    let d = c.dim;
    let grid = TimeGrid::new(t, t + h, o.window_steps)?;
    let init = sample_initial(&o.xi, d, o.m, o.seed);
    let ens = simulate_law_with(c, &init, Arc::new(drivers(&grid, d, &o.levy, o.m, 0, o.seed)), &o.levy, &o.xi.name())?;
    let starts: Vec<f64> = (0..o.m).flat_map(|_| o.x.iter().copied()).collect();
    let piv = simulate_pivot_with(
        c,
        &starts,
        Arc::new(drivers(&grid, d, &o.levy, o.m, PIVOT_STREAM_BASE, o.seed)),
        ens.law_stats.clone(),
        &o.levy,
    )?;
    let vals: Vec<f64> = (0..o.m)
        .map(|i| {
            (0..grid.n_nodes())
                .map(|k| sq(ens.law.state(k, i), ens.law.state(0, i)))
                .fold(0.0, f64::max)
                + (0..grid.n_nodes()).map(|k| sq(piv.paths.state(k, i), &o.x)).fold(0.0, f64::max)
        })
        .collect();
    Ok(mean_and_se(&vals))
}

fn small_time_scaling(c: &CoefficientSet, t: f64, o: &MomentOptions) -> Result<StatCheckReport> {
    let (a, sa) = small_time_moment(c, t, o.h, o)?;
    let mut o2 = o.clone();
    o2.seed = o.seed.wrapping_add(0x5ca1e);
    let (b, sb) = small_time_moment(c, t, 0.5 * o.h, &o2)?;
    let name = format!("moment_small_time_scaling/{}", c.registry_name);
    if a == 0.0 && b == 0.0 {
        return Ok(StatCheckReport::with_verdict(name, crate::report::CheckMode::Equality, 0.0, 0.0, true, 2 * o.m as u64)
            .with_note("both windows have zero left side"));
    }
    let r = a / b;
    let se = r * ((sa / a).powi(2) + (sb / b).powi(2)).sqrt();
    let mut rep = StatCheckReport::within_range(name, r, se, 1.6, 2.6, o.k_sigma, 2 * o.m as u64);
    rep.note(format!("h={}; estimate_h={a:e}; estimate_h_half={b:e}", o.h));
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow_opts(levy: LevyModel) -> FlowOptions {
        FlowOptions {
            xi: InitialSampler::Normal { mean: 0.0, std: 1.0 },
            x: vec![0.5],
            m: 200,
            levy,
            seed: 11,
            c_declared: 10.0,
            k_sigma: 3.0,
        }
    }

    #[test]
    fn flow_discrepancy_vanishes_for_exact_families() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        for name in ["zero", "constant_drift"] {
            let c = CoefficientSet::instantiate(name, &[]).unwrap();
            let o = check_flow_property(&c, &g, 4, &flow_opts(LevyModel::single_atom(1.0, 0.5).unwrap())).unwrap();
            assert!(o.discrepancy < 1e-12, "{name}: {}", o.discrepancy);
            assert!(o.report.passed());
        }
    }

    #[test]
    fn flow_discrepancy_shrinks_with_the_step() {
        let c = CoefficientSet::instantiate("mean_reverting_to_law_mean", &[("s", 0.4), ("drift.sine", 0.5)]).unwrap();
        let levy = LevyModel::none();
        let a = check_flow_property(&c, &TimeGrid::new(0.0, 1.0, 10).unwrap(), 4, &flow_opts(levy.clone())).unwrap();
        let b = check_flow_property(&c, &TimeGrid::new(0.0, 1.0, 20).unwrap(), 8, &flow_opts(levy)).unwrap();
        let r = a.discrepancy / b.discrepancy;
        assert!(r > 1.5 && r < 2.6, "ratio {r}");
    }

    #[test]
    fn zero_family_moments_vanish() {
        let c = CoefficientSet::instantiate("zero", &[]).unwrap();
        let o = MomentOptions {
            xi: InitialSampler::Normal { mean: 0.0, std: 1.0 },
            xi_hat: InitialSampler::Normal { mean: 0.3, std: 1.0 },
            x: vec![0.0],
            x_hat: vec![0.2],
            m: 100,
            h: 0.25,
            window_steps: 8,
            levy: LevyModel::none(),
            seed: 1,
            k_sigma: 3.0,
            stability: 0.25,
        };
        let small = small_time_moment(&c, 0.0, 0.25, &o).unwrap();
        assert_eq!(small.0, 0.0);
        let reps = check_moment_estimates(&c, &TimeGrid::new(0.0, 1.0, 8).unwrap(), &o).unwrap();
        assert!(reps.iter().all(|r| r.passed()), "{reps:?}");
    }

    #[test]
    fn constant_drift_small_time_moment_is_h_squared() {
        let c = CoefficientSet::instantiate("constant_drift", &[]).unwrap();
        let o = MomentOptions {
            xi: InitialSampler::Normal { mean: 0.0, std: 1.0 },
            xi_hat: InitialSampler::Normal { mean: 0.0, std: 1.0 },
            x: vec![0.0],
            x_hat: vec![0.0],
            m: 10,
            h: 0.5,
            window_steps: 4,
            levy: LevyModel::none(),
            seed: 1,
            k_sigma: 3.0,
            stability: 0.25,
        };
        // both the law path and the pivot move by exactly h
        let (v, _) = small_time_moment(&c, 0.0, 0.5, &o).unwrap();
        assert!((v - 2.0 * 0.25).abs() < 1e-12);
    }
}
