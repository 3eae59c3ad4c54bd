//! The acceptance battery: one function per criterion, each returning the
//! reports that decide it. Everything is seeded from [`SuiteConfig::seed`];
//! `quick` shrinks sample sizes for smoke runs (verdicts are then advisory).

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backward::{checks::check_picard_contraction, solve_dx_bsde, solve_mkv_bsde, solve_pivot_bsde, RegressionSpec};
use crate::coefficients::CoefficientSet;
use crate::config::SolverConfig;
use crate::error::{Error, Result};
use crate::forward::checks::{check_flow_property, small_time_moment, FlowOptions, MomentOptions};
use crate::forward::variation::{lifted_dmu_oracle, simulate_dmu, simulate_dx};
use crate::forward::{drivers, sample_initial, simulate_law_ensemble, simulate_pivot_with, PIVOT_STREAM_BASE};
use crate::grid::TimeGrid;
use crate::itocalc::{verify_ito, ItoProcessSpec, ItoTestFunction, LadderRow};
use crate::measures::{w2, EmpiricalMeasure};
use crate::pde::{check_regularity, check_representation, pde_residual, RegularityProbes, RepresentationOptions, ValueFunctionHandle};
use crate::randomness::{derive_seed, stream_rng, InitialSampler, LevyModel};
use crate::report::{mean_and_se, CheckMode, StatCheckReport};

pub const CRITERIA: usize = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub seed: u64,
    pub quick: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { seed: 20240601, quick: false }
    }
}

impl SuiteConfig {
    /// `full` at normal scale, `small` in quick mode.
    fn size(&self, full: usize, small: usize) -> usize {
        if self.quick {
            small
        } else {
            full
        }
    }

    fn seed_for(&self, criterion: usize) -> u64 {
        derive_seed(self.seed, criterion as u64)
    }
}

/// Outcome of one criterion, plus plot-ready ladders where it produces them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub id: usize,
    pub title: String,
    pub reports: Vec<StatCheckReport>,
    #[serde(skip)]
    pub ladders: Vec<(String, Vec<LadderRow>)>,
    /// Set when the criterion aborted; the reports then hold one failing entry.
    pub error: Option<String>,
    #[serde(skip)]
    pub non_convergence: bool,
}

impl Criterion {
    pub fn passed(&self) -> bool {
        self.error.is_none() && !self.reports.is_empty() && self.reports.iter().all(|r| r.passed())
    }

    fn from_result(id: usize, r: Result<(Vec<StatCheckReport>, Vec<(String, Vec<LadderRow>)>)>) -> Self {
        let title = TITLES.get(id.wrapping_sub(1)).copied().unwrap_or("unknown").to_string();
        match r {
            Ok((reports, ladders)) => Self { id, title, reports, ladders, error: None, non_convergence: false },
            Err(e) => {
                let non_convergence = matches!(e, Error::PicardNotConverged { .. });
                let mut rep = StatCheckReport::with_verdict(format!("criterion_{id:02}"), CheckMode::Equality, f64::NAN, 0.0, false, 0);
                rep.fail_because(e.to_string());
                Self { id, title, reports: vec![rep], ladders: vec![], error: Some(e.to_string()), non_convergence }
            }
        }
    }
}

pub const TITLES: [&str; CRITERIA] = [
    "w2_oracle_equivalence",
    "forward_weak_convergence",
    "diagonal_identity",
    "flow_property",
    "small_time_moment_scaling",
    "bsde_oracle",
    "picard_contraction",
    "dx_consistency",
    "dmu_oracle",
    "ito_formula",
    "representation_formulas",
    "pde_residual",
    "regularity",
    "reproducibility",
];

type Out = Result<(Vec<StatCheckReport>, Vec<(String, Vec<LadderRow>)>)>;

/// Runs criterion `id` (1-based). Criterion 14 needs the executable and is
/// decided by the caller; here it only re-runs criterion 6 twice and compares
/// the serialized reports.
pub fn run_criterion(id: usize, cfg: &SuiteConfig) -> Criterion {
    let out: Out = match id {
        1 => w2_oracle(cfg).map(|r| (r, vec![])),
        2 => weak_convergence(cfg).map(|r| (r, vec![])),
        3 => diagonal_identity(cfg).map(|r| (r, vec![])),
        4 => flow_property(cfg).map(|r| (r, vec![])),
        5 => small_time_scaling(cfg).map(|r| (r, vec![])),
        6 => bsde_oracle(cfg).map(|r| (r, vec![])),
        7 => picard_contraction(cfg).map(|r| (r, vec![])),
        8 => dx_consistency(cfg).map(|r| (r, vec![])),
        9 => dmu_oracle(cfg).map(|r| (r, vec![])),
        10 => ito_formula(cfg),
        11 => representation(cfg).map(|r| (r, vec![])),
        12 => residual_trials(cfg).map(|r| (r, vec![])),
        13 => regularity(cfg).map(|r| (r, vec![])),
        14 => in_process_reproducibility(cfg).map(|r| (r, vec![])),
        _ => Err(Error::InvalidArgument(format!("no criterion {id}"))),
    };
    Criterion::from_result(id, out)
}

pub fn run_all(cfg: &SuiteConfig) -> Vec<Criterion> {
    (1..=CRITERIA).map(|id| run_criterion(id, cfg)).collect()
}

/// Brute-force `W₂` between equal-size uniform clouds: minimum over all
/// permutations (Heap's algorithm).
pub fn brute_force_w2(a: &[f64], b: &[f64], dim: usize) -> f64 {
    let n = a.len() / dim;
    let cost = |i: usize, j: usize| -> f64 {
        (0..dim).map(|k| (a[i * dim + k] - b[j * dim + k]).powi(2)).sum()
    };
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost(i, j)).sum::<f64>();
    let mut best = total(&perm);
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(total(&perm));
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    (best / n as f64).sqrt()
}

fn w2_oracle(cfg: &SuiteConfig) -> Result<Vec<StatCheckReport>> {
    let mut rng = stream_rng(cfg.seed_for(1), 0, 0);
    let trials = 100;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(1..=8usize);
        let dim = rng.random_range(1..=3usize);
        let a: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = w2(&EmpiricalMeasure::uniform(dim, a.clone())?, &EmpiricalMeasure::uniform(dim, b.clone())?)?.distance;
        worst = worst.max((got - brute_force_w2(&a, &b, dim)).abs());
    }
    let r = StatCheckReport::equality("w2_vs_brute_force", worst, 0.0, 0.0, 0.0, 1e-12, trials);
    Ok(vec![r.with_note("max abs difference over random pairs, M <= 8, dim <= 3")])
}

/// `b = b₀ + a·E[X]`, `σ = 0.1`, `ξ = 1`, `Φ = x`: `E[X_T] = (1 + b₀/a)e^{aT} − b₀/a`
/// while the scheme's mean follows `(1 + aΔ)^N`.
fn weak_convergence(cfg: &SuiteConfig) -> Result<Vec<StatCheckReport>> {
    let c = CoefficientSet::instantiate("constant_drift", &[("b0", 1.0), ("drift.law_mean", 1.0), ("s", 0.1)])?;
    let m = cfg.size(100_000, 10_000);
    let exact = 2.0 * 1f64.exp() - 1.0;
    let seed = cfg.seed_for(2);
    let mut errs = Vec::new();
    for (k, n) in [25usize, 50, 100].into_iter().enumerate() {
        let grid = TimeGrid::new(0.0, 1.0, n)?;
        let e = simulate_law_ensemble(&c, &InitialSampler::Point { value: 1.0 }, &grid, m, &LevyModel::none(), seed + k as u64)?;
        let (mean, se) = mean_and_se(e.law.terminal());
        errs.push((mean - exact, se));
    }
    let mut out = Vec::new();
    for k in 0..2 {
        let (a, sa) = errs[k];
        let (b, sb) = errs[k + 1];
        let r = a / b;
        let se = r.abs() * ((sa / a).powi(2) + (sb / b).powi(2)).sqrt();
        let mut rep = StatCheckReport::within_range(format!("weak_error_ratio_{k}"), r, se, 1.6, 2.6, 3.0, m as u64);
        rep.note(format!("errors: {a:.6e} -> {b:.6e}"));
        out.push(rep);
    }
    Ok(out)
}

fn diagonal_identity(cfg: &SuiteConfig) -> Result<Vec<StatCheckReport>> {
    let c = CoefficientSet::instantiate("mean_reverting_to_law_mean", &[("s", 0.3), ("jump", 0.4), ("drift.sine", 0.5)])?;
    let levy = LevyModel::single_atom(2.0, 0.5)?;
    let grid = TimeGrid::new(0.0, 1.0, 50)?;
    let m = 100;
    let e = simulate_law_ensemble(&c, &InitialSampler::Normal { mean: 0.0, std: 1.0 }, &grid, m, &levy, cfg.seed_for(3))?;
    let pv = simulate_pivot_with(&c, e.law.node_states(0), e.law.drivers().clone(), e.law_stats.clone(), &levy)?;
    let mismatches = (0..grid.n_nodes())
        .map(|k| e.law.node_states(k).iter().zip(pv.paths.node_states(k)).filter(|(a, b)| a.to_bits() != b.to_bits()).count())
        .sum::<usize>();
    let r = StatCheckReport::with_verdict("diagonal_identity", CheckMode::Equality, mismatches as f64, 0.0, mismatches == 0, m as u64);
    Ok(vec![r.with_note("count of node states differing bitwise from the law path")])
}

fn flow_property(cfg: &SuiteConfig) -> Result<Vec<StatCheckReport>> {
    let families: [(&str, &[(&str, f64)]); 2] = [
        ("mean_reverting_to_law_mean", &[("s", 0.4), ("drift.sine", 0.5), ("jump", 0.3), ("jump.law_sine", 0.2)]),
        ("jump_only_compensated", &[("drift.sine", 0.8), ("s", 0.3), ("jump.law_sine", 0.3)]),
    ];
    let m = cfg.size(2000, 300);
    let mut out = Vec::new();
    for (name, params) in families {
        let c = CoefficientSet::instantiate(name, params)?;
        let opts = FlowOptions {
            xi: InitialSampler::Normal { mean: 0.0, std: 1.0 },
            x: vec![0.5],
            m,
            levy: LevyModel::single_atom(1.0, 0.7)?,
            seed: cfg.seed_for(4),
            c_declared: f64::INFINITY,
            k_sigma: 3.0,
        };
        let mut fitted = Vec::new();
        for n in [25usize, 50, 100] {
            let o = check_flow_property(&c, &TimeGrid::new(0.0, 1.0, n)?, 2 * n / 5, &opts)?;
            fitted.push(o.discrepancy / o.delta);
        }
        let lo = fitted.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = fitted.iter().cloned().fold(0.0, f64::max);
        let variation = if hi > 0.0 { (hi - lo) / hi } else { 0.0 };
        let mut r = StatCheckReport::with_verdict(
            format!("flow_fitted_constant/{name}"),
            CheckMode::UpperBound,
            variation,
            0.25,
            fitted.iter().all(|v| v.is_finite()) && variation <= 0.25,
            m as u64,
        );
        r.note(format!("discrepancy/delta at N=25,50,100: {}", fmt_list(&fitted)));
        out.push(r);
    }
    Ok(out)
}

fn small_time_scaling(cfg: &SuiteConfig) -> Result<Vec<StatCheckReport>> {
    // bounded coefficients: sine drift and diffusion, constant jump size
    let c = CoefficientSet::instantiate(
        "jump_only_compensated",
        &[("jump", 0.5), ("diffusion.sine", 0.2), ("s", 0.3), ("drift.sine", 0.3)],
    )?;
    let o = MomentOptions {
        xi: InitialSampler::Normal { mean: 0.0, std: 1.0 },
        xi_hat: InitialSampler::Normal { mean: 0.0, std: 1.0 },
        x: vec![0.2],
        x_hat: vec![0.2],
        m: cfg.size(20_000, 2000),
        h: 0.1,
        window_steps: 32,
        levy: LevyModel::single_atom(2.0, 0.8)?,
        seed: cfg.seed_for(5),
        k_sigma: 3.0,
        stability: 0.25,
    };
    let (a, sa) = small_time_moment(&c, 0.0, o.h, &o)?;
    let o2 = MomentOptions { seed: o.seed.wrapping_add(1), ..o.clone() };
    let (b, sb) = small_time_moment(&c, 0.0, 0.5 * o.h, &o2)?;
    let r = a / b;
    let se = r * ((sa / a).powi(2) + (sb / b).powi(2)).sqrt();
    let mut rep = StatCheckReport::within_range("small_time_ratio", r, se, 1.6, 2.6, 3.0, 2 * o.m as u64);
    rep.note(format!("E sup |X - xi|^2: h={a:.5e}, h/2={b:.5e}"));
    Ok(vec![rep])
}

fn solve_family(c: &CoefficientSet, m: usize, n: usize, seed: u64, picard_tol: f64) -> Result<crate::backward::BsdeSolution> {
    let levy = LevyModel::none();
    let grid = TimeGrid::new(0.0, 1.0, n)?;
    let e = simulate_law_ensemble(c, &InitialSampler::Normal { mean: 0.0, std: 1.0 }, &grid, m, &levy, seed)?;
    let cfg = SolverConfig { n_particles: m, seed, picard_tol, ..Default::default() };
    Ok(solve_mkv_bsde(c, &e, &levy, &cfg.regression, &cfg)?.0)
}

fn bsde_oracle(cfg: &SuiteConfig) -> Result<Vec<StatCheckReport>> {
    let (m, n) = (cfg.size(10_000, 1000), 50);
    let delta = 1.0 / n as f64;
    let seed = cfg.seed_for(6);
    let c0 = 1.5;
    let c = CoefficientSet::instantiate("bsde_law_mean_driver", &[("k", 1.0), ("c", c0)])?;
    let sol = solve_family(&c, m, n, seed, 1e-10)?;
    let (y0, se) = sol.y0();
    let mut out = vec![StatCheckReport::equality("law_mean_driver_y0", y0, se, c0 * 1f64.exp(), 3.0, 5.0 * delta, m as u64)];
    let c = CoefficientSet::instantiate("zero", &[("driver.constant", 0.7), ("terminal.constant", 0.2)])?;
    let (y0, _) = solve_family(&c, m, n, seed, 1e-10)?.y0();
    out.push(StatCheckReport::equality("constant_driver_y0", y0, 0.0, 0.9, 0.0, 1e-12, m as u64));
    let c = CoefficientSet::instantiate("zero", &[("terminal.constant", 0.2)])?;
    let (y0, _) = solve_family(&c, m, n, seed, 1e-10)?.y0();
    out.push(StatCheckReport::equality("zero_driver_y0", y0, 0.0, 0.2, 0.0, 1e-12, m as u64));
    Ok(out)
}

fn picard_contraction(cfg: &SuiteConfig) -> Result<Vec<StatCheckReport>> {
    let (m, n) = (cfg.size(10_000, 1000), 50);
    let mut out = Vec::new();
    for (k, bound) in [(1.0, 0.9), (0.5, 0.5)] {
        let c = CoefficientSet::instantiate("bsde_law_mean_driver", &[("k", k), ("c", 1.5)])?;
        let sol = solve_family(&c, m, n, cfg.seed_for(7), SolverConfig::default().picard_tol)?;
        let h = &sol.picard_history;
        let mut r = check_picard_contraction(h, bound);
        r.name = format!("picard_contraction/k={k}");
        if h.len() > 10 {
            r.fail_because(format!("{} iterations", h.len()));
        }
        r.note(format!("history={}", fmt_list(h)));
        out.push(r);
    }
    Ok(out)
}

fn dx_consistency(cfg: &SuiteConfig) -> Result<Vec<StatCheckReport>> {
    let families: [(&str, &[(&str, f64)], LevyModel); 2] = [
        ("quadratic_terminal", &[("s", 0.3), ("driver.sine", 0.5), ("drift.sine", 0.4)], LevyModel::single_atom(1.0, 0.4)?),
        ("linear_terminal_plus_law_mean", &[("s", 0.3), ("terminal.sine", 1.0), ("driver.y", -0.5), ("drift.sine", 0.3)], LevyModel::none()),
    ];
    let m = cfg.size(4000, 500);
    let seed = cfg.seed_for(8);
    let spec = RegressionSpec::polynomial(3);
    let scfg = SolverConfig { n_particles: m, seed, ..Default::default() };
    let x0 = 0.3;
    let mut out = Vec::new();
    for (name, params, levy) in families {
        let c = CoefficientSet::instantiate(name, params)?;
        let grid = TimeGrid::new(0.0, 1.0, 20)?;
        let e = simulate_law_ensemble(&c, &InitialSampler::Normal { mean: 0.0, std: 0.5 }, &grid, m, &levy, seed)?;
        let (_, cloud) = solve_mkv_bsde(&c, &e, &levy, &spec, &scfg)?;
        let drv = Arc::new(drivers(&grid, 1, &levy, m, PIVOT_STREAM_BASE, seed));
        let solve_at = |x: f64| -> Result<_> {
            let pv = simulate_pivot_with(&c, &vec![x; m], drv.clone(), e.law_stats.clone(), &levy)?;
            let s = solve_pivot_bsde(&c, &pv, &cloud, &levy, &spec, &scfg)?;
            Ok((pv, s))
        };
        let (pv, s0) = solve_at(x0)?;
        let dx = simulate_dx(&c, &pv, &levy)?;
        let dsol = solve_dx_bsde(&c, &pv, &dx, &s0, &levy, &spec, &scfg)?.remove(0);
        for h in [1e-2, 1e-3] {
            let up = solve_at(x0 + h)?.1;
            let dn = solve_at(x0 - h)?.1;
            let diff: Vec<f64> = (0..m)
                .map(|p| dsol.y0_samples[p] - (up.y0_samples[p] - dn.y0_samples[p]) / (2.0 * h))
                .collect();
            let (gap, se) = mean_and_se(&diff);
            // the two sides come from different regressions; their projection noise enters the budget
            let noise = dsol.noise_y[0] + (up.noise_y[0] + dn.noise_y[0]) / (2.0 * h).max(1.0);
            let mut r = StatCheckReport::equality(format!("dx_vs_crn_difference/{name}/h={h:e}"), gap, se, 0.0, 3.0, 3.0 * noise + h * h, m as u64);
            r.note(format!("dx_y0={:.6e}; fd={:.6e}", dsol.y0().0, (up.y0().0 - dn.y0().0) / (2.0 * h)));
            out.push(r);
        }
    }
    Ok(out)
}

fn dmu_oracle(cfg: &SuiteConfig) -> Result<Vec<StatCheckReport>> {
    let c = CoefficientSet::instantiate("mean_reverting_to_law_mean", &[("kappa", 1.0), ("s", 0.3), ("drift.sine", 0.3)])?;
    let levy = LevyModel::none();
    let n = 20;
    let grid = TimeGrid::new(0.0, 1.0, n)?;
    let m = cfg.size(400, 100);
    let seed = cfg.seed_for(9);
    let e = simulate_law_ensemble(&c, &InitialSampler::Normal { mean: 0.0, std: 1.0 }, &grid, m, &levy, seed)?;
    let pv = crate::forward::simulate_pivot(&c, &[0.2], &e, m, &levy, seed)?;
    let mut out = Vec::new();
    for j in [0usize, m / 2] {
        let y = e.law.state(0, j).to_vec();
        let v = simulate_dmu(&c, &e, &pv, &y, &levy, seed)?;
        let h = 1e-3;
        let fd = lifted_dmu_oracle(&c, &e, &pv, j, 0, h, &levy)?;
        let diffs: Vec<f64> = (0..m).map(|i| v.dmu(i, n)[0] - fd[i * (n + 1) + n]).collect();
        let (gap, se) = mean_and_se(&diffs);
        let delta = grid.delta();
        let mut r = StatCheckReport::equality(format!("dmu_vs_lifted_fd/j={j}"), gap, se, 0.0, 3.0, h * h + delta, m as u64);
        r.note(format!("mean dmu at T={:.6e}", mean_and_se(&(0..m).map(|i| v.dmu(i, n)[0]).collect::<Vec<_>>()).0));
        out.push(r);
    }
    Ok(out)
}

fn ito_formula(cfg: &SuiteConfig) -> Out {
    let m = cfg.size(20_000, 2000);
    let levy = LevyModel::single_atom(1.0, 0.6)?;
    let grid = TimeGrid::new(0.0, 1.0, 8)?;
    let mut reports = Vec::new();
    let mut ladders = Vec::new();
    for (f, p) in [("linear_x", "full"), ("mean", "full"), ("quadratic", "full")] {
        let tf = ItoTestFunction::registry(f, 1)?;
        let ps = ItoProcessSpec::registry(p)?;
        let o = verify_ito(&tf, &ps, &grid, m, &levy, cfg.seed_for(10), 3, 8, 3.0)?;
        reports.push(o.report);
        ladders.push((format!("ito_{f}_{p}"), o.ladder));
    }
    Ok((reports, ladders))
}

fn representation(cfg: &SuiteConfig) -> Result<Vec<StatCheckReport>> {
    let m = cfg.size(2000, 400);
    let scfg = SolverConfig { n_particles: m, ..Default::default() };
    let grid = TimeGrid::new(0.0, 1.0, 12)?;
    let opts = RepresentationOptions::default();
    let seeds = [cfg.seed_for(11)];
    let mut out = check_representation(
        &CoefficientSet::instantiate("linear_terminal_plus_law_mean", &[("s", 0.3)])?,
        &LevyModel::none(),
        grid,
        &scfg,
        &opts,
        &seeds,
    )?;
    for r in &mut out {
        r.name = format!("{}/driftless_diffusion", r.name);
    }
    let mut jumps = check_representation(
        &CoefficientSet::instantiate("jump_only_compensated", &[])?,
        &LevyModel::single_atom(1.0, 0.5)?,
        grid,
        &scfg,
        &opts,
        &seeds,
    )?;
    for r in &mut jumps {
        r.name = format!("{}/compensated_jump", r.name);
    }
    out.extend(jumps);
    Ok(out)
}

/// The closed-form families of the residual check.
pub fn residual_families() -> Result<Vec<(&'static str, CoefficientSet, LevyModel)>> {
    Ok(vec![
        (
            "pure_transport",
            CoefficientSet::instantiate("constant_drift", &[("b0", 0.5), ("terminal.law_mean", 1.0)])?,
            LevyModel::none(),
        ),
        (
            "mean_field_terminal",
            CoefficientSet::instantiate("linear_terminal_plus_law_mean", &[("s", 0.3)])?,
            LevyModel::none(),
        ),
        ("compensated_jumps", CoefficientSet::instantiate("jump_only_compensated", &[])?, LevyModel::single_atom(1.0, 0.5)?),
    ])
}

fn residual_trials(cfg: &SuiteConfig) -> Result<Vec<StatCheckReport>> {
    let trials = cfg.size(20, 4);
    let m = cfg.size(400, 100);
    let grid = TimeGrid::new(0.0, 1.0, 10)?;
    let cloud = EmpiricalMeasure::uniform(1, vec![-0.9, -0.4, 0.1, 0.5, 1.1])?;
    let times = [0.0, 0.3, 0.6];
    let xs = [-0.5, 0.0, 0.5];
    let mut out = Vec::new();
    for (label, c, levy) in residual_families()? {
        let mut passed = 0;
        let mut worst = 0.0f64;
        for trial in 0..trials {
            let scfg = SolverConfig {
                n_particles: m,
                seed: derive_seed(cfg.seed_for(12), trial as u64),
                fd_step_x: 0.1,
                fd_step_mu: 0.1,
                ..Default::default()
            };
            let h = ValueFunctionHandle::new(&c, &levy, grid, &scfg)?;
            let mut all = true;
            for t in times {
                for x in xs {
                    let r = pde_residual(&h, t, &[x], &cloud)?;
                    worst = worst.max(r.residual.abs() / r.budget.max(f64::MIN_POSITIVE));
                    all &= r.within_budget();
                }
            }
            passed += all as usize;
        }
        let frac = passed as f64 / trials as f64;
        let mut r = StatCheckReport::with_verdict(
            format!("pde_residual_within_budget/{label}"),
            CheckMode::ConvergenceOrder,
            frac,
            0.95,
            frac >= 0.95,
            (trials * 9) as u64,
        );
        r.note(format!("trials={trials}; probes=3x3; worst |residual|/budget={worst:.3}"));
        out.push(r);
    }
    Ok(out)
}

fn regularity(cfg: &SuiteConfig) -> Result<Vec<StatCheckReport>> {
    let c = CoefficientSet::instantiate("quadratic_terminal", &[("s", 0.4), ("jump", 0.5), ("terminal.law_mean", 1.0)])?;
    let levy = LevyModel::single_atom(1.0, 0.6)?;
    let m = cfg.size(2000, 300);
    let scfg = SolverConfig { n_particles: m, ..Default::default() };
    let cloud = EmpiricalMeasure::uniform(1, sample_initial(&InitialSampler::Normal { mean: 0.0, std: 1.0 }, 1, 16, cfg.seed_for(13)))?;
    let probes = RegularityProbes::standard(cloud, 1.0);
    check_regularity(&c, &levy, &scfg, &probes, &[cfg.seed_for(13)])
}

/// In-process part of reproducibility: the same criterion twice gives identical JSON.
fn in_process_reproducibility(cfg: &SuiteConfig) -> Result<Vec<StatCheckReport>> {
    let a = json_reports(&run_criterion(6, &SuiteConfig { quick: true, ..cfg.clone() }));
    let b = json_reports(&run_criterion(6, &SuiteConfig { quick: true, ..cfg.clone() }));
    let same = a == b;
    Ok(vec![StatCheckReport::with_verdict("repeat_run_identical", CheckMode::Equality, (!same) as u8 as f64, 0.0, same, 2)])
}

fn fmt_list(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| format!("{x:.4e}")).collect::<Vec<_>>().join(", "))
}

/// Serialized criterion, as written by the command-line runner.
pub fn json_reports(c: &Criterion) -> String {
    serde_json::to_string_pretty(c).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_matches_hand_computation() {
        // 1-D: sorted coupling of {0, 1} and {1, 3} costs (1 + 4)/2
        assert!((brute_force_w2(&[0.0, 1.0], &[3.0, 1.0], 1) - 2.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(brute_force_w2(&[0.5], &[0.5], 1), 0.0);
    }

    #[test]
    fn quick_w2_and_identity_criteria_pass() {
        let cfg = SuiteConfig { quick: true, ..Default::default() };
        for id in [1, 3, 6] {
            let c = run_criterion(id, &cfg);
            assert!(c.passed(), "{c:#?}");
        }
    }

    #[test]
    fn unknown_criterion_is_a_failing_entry() {
        let c = run_criterion(0, &SuiteConfig::default());
        assert!(!c.passed());
        assert!(c.error.is_some());
    }
}
