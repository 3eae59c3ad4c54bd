//! Value function `V(t, x, μ)` through the forward–backward solvers, and the
//! residual of its nonlocal mean-field PDE assembled from finite differences.
//!
//! All evaluations of one [`ValueFunctionHandle`] share driver streams:
//! the law drivers and pivot drivers are sampled once on the absolute grid
//! and every evaluation at time `t` uses their tail from `t`. Finite
//! differences in `t`, `x` and `μ` therefore cancel most Monte Carlo noise,
//! and the per-path pivot samples of the stencil give their standard error.

pub mod checks;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backward::{solve_mkv_bsde, solve_pivot_bsde, PiCloud};
use crate::coefficients::{CoefficientSet, PiStats};
use crate::config::SolverConfig;
use crate::error::{Error, Result};
use crate::forward::{drivers, simulate_law_with, simulate_pivot_with, PIVOT_STREAM_BASE};
use crate::grid::TimeGrid;
use crate::measures::{EmpiricalMeasure, MeasureStats};
use crate::quadrature::gauss_legendre_on;
use crate::randomness::{DriverPath, LevyModel};
use crate::report::mean_and_se;

pub use checks::{check_regularity, check_representation, RegularityProbes, RepresentationOptions};

/// One evaluation of `V`: the estimate and the per-pivot samples behind it.
#[derive(Debug, Clone)]
pub struct ValueSample {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: Arc<Vec<f64>>,
}

type Key = (usize, Vec<u64>, u64);

/// Law drivers in antithetic Brownian pairs: path `half + i` negates the
/// Brownian increments of path `i` and keeps its own jump events. Paired with
/// initial points repeated twice, this removes the leading sampling noise of
/// the law mean for affine dynamics.
pub fn antithetic_law_drivers(grid: &TimeGrid, dim: usize, levy: &LevyModel, m: usize, seed: u64) -> Result<Vec<DriverPath>> {
    if m % 2 != 0 {
        return Err(Error::ParameterOutOfRange { name: "n_particles".into(), reason: "must be even".into() });
    }
    let half = m / 2;
    let base = drivers(grid, dim, levy, half, 0, seed);
    let mirrored: Vec<DriverPath> = base
        .iter()
        .zip(drivers(grid, dim, levy, half, half as u64, seed))
        .map(|(b, own)| own.with_brownian(b.brownian.iter().map(|v| -v).collect()))
        .collect::<Result<_>>()?;
    Ok(base.into_iter().chain(mirrored).collect())
}

/// Initial rows for [`antithetic_law_drivers`]: `m/2` resampled points, twice.
pub fn antithetic_initial(cloud: &EmpiricalMeasure, m: usize) -> Vec<f64> {
    let half = cloud.systematic_resample(m / 2);
    let mut initial = half.samples().to_vec();
    initial.extend_from_slice(half.samples());
    initial
}

/// `V` backed by the solvers with a fixed configuration and fixed driver streams.
pub struct ValueFunctionHandle {
    pub c: CoefficientSet,
    pub levy: LevyModel,
    pub cfg: SolverConfig,
    pub grid: TimeGrid,
    law_drivers: Vec<DriverPath>,
    pivot_drivers: Vec<DriverPath>,
    tails: Mutex<HashMap<usize, (Arc<Vec<DriverPath>>, Arc<Vec<DriverPath>>)>>,
    cache: Mutex<HashMap<Key, ValueSample>>,
}

impl ValueFunctionHandle {
    /// `grid` is the absolute grid `[0, T]`; `V` is available at its nodes.
    /// Law particles come in antithetic Brownian pairs (the second half of the
    /// ensemble negates the first half's increments and shares its initial
    /// points), which removes the leading law-sampling noise from `V`.
    pub fn new(c: &CoefficientSet, levy: &LevyModel, grid: TimeGrid, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let law_drivers = antithetic_law_drivers(&grid, c.dim, levy, cfg.n_particles, cfg.seed)?;
        let pivot_drivers = drivers(&grid, c.dim, levy, cfg.n_particles, PIVOT_STREAM_BASE, cfg.seed);
        Ok(Self {
            c: c.clone(),
            levy: levy.clone(),
            cfg: cfg.clone(),
            grid,
            law_drivers,
            pivot_drivers,
            tails: Mutex::new(HashMap::new()),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn node_of(&self, t: f64) -> Result<usize> {
        self.grid
            .node_index(t)
            .ok_or_else(|| Error::InvalidArgument(format!("t = {t} is not a node of the value-function grid")))
    }

    fn tails(&self, node: usize) -> Result<(Arc<Vec<DriverPath>>, Arc<Vec<DriverPath>>)> {
        if let Some(t) = self.tails.lock().unwrap().get(&node) {
            return Ok(t.clone());
        }
        let law: Vec<DriverPath> = self.law_drivers.par_iter().map(|d| d.tail(node)).collect::<Result<_>>()?;
        let piv: Vec<DriverPath> = self.pivot_drivers.par_iter().map(|d| d.tail(node)).collect::<Result<_>>()?;
        let entry = (Arc::new(law), Arc::new(piv));
        self.tails.lock().unwrap().insert(node, entry.clone());
        Ok(entry)
    }

    /// `V(t, x, cloud)`; the cloud is put in canonical order first, so the
    /// result does not depend on the order of its samples.
    pub fn eval(&self, t: f64, x: &[f64], cloud: &EmpiricalMeasure) -> Result<ValueSample> {
        self.eval_ordered(self.node_of(t)?, x, &cloud.canonical())
    }

    /// Evaluation with the cloud taken in the given order (used by stencils
    /// that move one sample and must keep the sample-to-stream assignment).
    pub fn eval_ordered(&self, node: usize, x: &[f64], cloud: &EmpiricalMeasure) -> Result<ValueSample> {
        let c = &self.c;
        if x.len() != c.dim || cloud.dim() != c.dim {
            return Err(Error::DimensionMismatch { expected: c.dim, got: x.len() });
        }
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let key: Key = (node, x.iter().map(|v| v.to_bits()).collect(), cloud.digest());
        if let Some(v) = self.cache.lock().unwrap().get(&key) {
            return Ok(v.clone());
        }
        let m = self.cfg.n_particles;
        let out = if node == self.grid.n_steps() {
            let v = c.phi(x, &cloud.stats());
            ValueSample { estimate: v, std_error: 0.0, samples: Arc::new(vec![v; m]) }
        } else {
            let (law_drv, piv_drv) = self.tails(node)?;
            let initial = antithetic_initial(cloud, m);
            let ens = simulate_law_with(c, &initial, law_drv, &self.levy, "cloud")?;
            let spec = self.cfg.regression;
            let (_, pi) = solve_mkv_bsde(c, &ens, &self.levy, &spec, &self.cfg)?;
            let starts: Vec<f64> = (0..m).flat_map(|_| x.iter().copied()).collect();
            let pv = simulate_pivot_with(c, &starts, piv_drv, ens.law_stats.clone(), &self.levy)?;
            let sol = solve_pivot_bsde(c, &pv, &pi, &self.levy, &spec, &self.cfg)?;
            let (estimate, std_error) = sol.y0();
            ValueSample { estimate, std_error, samples: Arc::new(sol.y0_samples) }
        };
        self.cache.lock().unwrap().insert(key, out.clone());
        Ok(out)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }
}

/// `V(t, x, cloud)` with a throwaway handle on `grid`.
pub fn eval_value_function(
    c: &CoefficientSet,
    levy: &LevyModel,
    grid: TimeGrid,
    t: f64,
    x: &[f64],
    cloud: &EmpiricalMeasure,
    cfg: &SolverConfig,
) -> Result<(f64, f64)> {
    let h = ValueFunctionHandle::new(c, levy, grid, cfg)?;
    if h.node_of(t)? >= grid.n_steps() {
        return Err(Error::InvalidArgument("t must be < T".into()));
    }
    let v = h.eval(t, x, cloud)?;
    Ok((v.estimate, v.std_error))
}

/// Linear combination `Σ a_i V_i` of evaluations on common pivot streams.
#[derive(Debug, Clone, Default)]
struct Stencil {
    terms: Vec<(f64, Arc<Vec<f64>>, f64)>,
}

impl Stencil {
    fn add(&mut self, a: f64, v: &ValueSample) -> &mut Self {
        if a != 0.0 {
            self.terms.push((a, v.samples.clone(), v.estimate));
        }
        self
    }

    fn extend(&mut self, a: f64, other: &Stencil) -> &mut Self {
        for (b, s, e) in &other.terms {
            self.terms.push((a * b, s.clone(), *e));
        }
        self
    }

    fn value(&self) -> f64 {
        self.terms.iter().map(|(a, _, e)| a * e).sum()
    }

    /// Standard error from the per-path combination.
    fn se(&self) -> f64 {
        let Some((_, first, _)) = self.terms.first() else { return 0.0 };
        let n = first.len();
        let comb: Vec<f64> = (0..n).map(|p| self.terms.iter().map(|(a, s, _)| a * s[p]).sum()).collect();
        mean_and_se(&comb).1
    }
}

/// Every term of the PDE at one probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeDerivativeBundle {
    pub v: f64,
    pub dt_v: f64,
    pub dx_v: Vec<f64>,
    /// Row-major `d×d`; only the diagonal is estimated (diffusions are diagonal).
    pub dxx_v: Vec<f64>,
    pub nonlocal_x: f64,
    /// `∂_μV(ξ_j)` at each cloud sample (empty when no term needs it).
    pub dmu_v_at: Vec<Vec<f64>>,
    /// Diagonal of `∂_y∂_μV(ξ_j)` (empty when the diffusion vanishes).
    pub dy_dmu_v_at: Vec<Vec<f64>>,
    pub nonlocal_mu: f64,
    /// `(V, ∂ₓV σ, ∫(V(x+β) − V) l dλ)`.
    pub psi: (f64, Vec<f64>, f64),
    pub mu_block: f64,
    pub driver: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermBudget {
    pub term: String,
    pub value: f64,
    pub std_error: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeResidual {
    pub t: f64,
    pub x: Vec<f64>,
    pub residual: f64,
    pub std_error: f64,
    /// `k·SE + Σ |bias|`.
    pub budget: f64,
    pub terms: Vec<TermBudget>,
    pub bundle: PdeDerivativeBundle,
}

impl PdeResidual {
    pub fn within_budget(&self) -> bool {
        self.residual.abs() <= self.budget
    }
}

fn named<T>(term: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_term(term))
}

/// Residual `∂_tV + {…}` of the PDE at `(t, x, cloud)` with its error budget.
///
/// `∂_tV` is a forward difference over `fd_step_t` (rounded to whole grid
/// steps), `∂ₓV`, `∂²ₓV` are central differences with step `fd_step_x`, and
/// the measure derivatives are lifted differences with step `fd_step_mu`
/// (moving one cloud sample; the `1/w_j` lift factor cancels against the
/// cloud average). Biases of the `t`- and `x`-differences are estimated by
/// repeating them at twice the step.
pub fn pde_residual(h: &ValueFunctionHandle, t: f64, x: &[f64], cloud: &EmpiricalMeasure) -> Result<PdeResidual> {
    let c = &h.c;
    let cfg = &h.cfg;
    let d = c.dim;
    let node = h.node_of(t)?;
    let grid = h.grid;
    let kt = ((cfg.fd_step_t_for(grid.delta()) / grid.delta()).round() as usize).max(1);
    if node + kt >= grid.n_nodes() {
        return Err(Error::InvalidArgument("t + fd_step_t must be <= T".into()));
    }
    let cloud = cloud.canonical();
    let law = cloud.stats();
    let hx = cfg.fd_step_x;
    let hm = cfg.fd_step_mu;
    let quad = h.levy.quadrature().to_vec();
    let k = cfg.k_sigma;
    let ev = |n: usize, y: &[f64], mu: &EmpiricalMeasure| h.eval_ordered(n, y, mu);
    let shift = |y: &[f64], i: usize, a: f64| -> Vec<f64> {
        let mut v = y.to_vec();
        v[i] += a;
        v
    };

    let v0 = named("V", ev(node, x, &cloud))?;
    let mut terms = Vec::new();
    let mut total = Stencil::default();
    let mut bias_total = 0.0;

    // ∂_t V, forward difference and its doubled-step companion
    let ht = kt as f64 * grid.delta();
    let vt1 = named("dt_V", ev(node + kt, x, &cloud))?;
    let mut dt = Stencil::default();
    dt.add(1.0 / ht, &vt1).add(-1.0 / ht, &v0);
    let dt_bias = if node + 2 * kt < grid.n_nodes() {
        let vt2 = named("dt_V", ev(node + 2 * kt, x, &cloud))?;
        let dt2 = (vt2.estimate - v0.estimate) / (2.0 * ht);
        (dt.value() - dt2).abs()
    } else {
        0.0
    };
    terms.push(TermBudget { term: "dt_V".into(), value: dt.value(), std_error: dt.se(), bias: dt_bias });
    total.extend(1.0, &dt);
    bias_total += dt_bias;

    // x-derivatives (diagonal), each with a doubled-step bias estimate
    let mut dx_v = vec![0.0; d];
    let mut dxx_v = vec![0.0; d * d];
    let mut dx_st = Vec::with_capacity(d);
    let mut dx_bias = vec![0.0; d];
    let mut dxx_bias = vec![0.0; d];
    let b = c.drift_vec(x, &law);
    let sig = c.diffusion_matrix(x, &law);
    let mut xblock = Stencil::default();
    for i in 0..d {
        let e: Vec<ValueSample> = [hx, -hx, 2.0 * hx, -2.0 * hx]
            .par_iter()
            .map(|a| named("dx_V", ev(node, &shift(x, i, *a), &cloud)))
            .collect::<Result<_>>()?;
        let mut g = Stencil::default();
        g.add(0.5 / hx, &e[0]).add(-0.5 / hx, &e[1]);
        let mut hh = Stencil::default();
        hh.add(1.0 / (hx * hx), &e[0]).add(-2.0 / (hx * hx), &v0).add(1.0 / (hx * hx), &e[1]);
        let g2 = (e[2].estimate - e[3].estimate) / (4.0 * hx);
        let h2 = (e[2].estimate - 2.0 * v0.estimate + e[3].estimate) / (4.0 * hx * hx);
        dx_v[i] = g.value();
        dxx_v[i * d + i] = hh.value();
        dx_bias[i] = (g.value() - g2).abs() / 3.0;
        dxx_bias[i] = (hh.value() - h2).abs() / 3.0;
        let s2 = sig[i * d + i] * sig[i * d + i];
        xblock.extend(b[i], &g).extend(0.5 * s2, &hh);
        bias_total += b[i].abs() * dx_bias[i] + 0.5 * s2 * dxx_bias[i];
        dx_st.push(g);
    }
    terms.push(TermBudget {
        term: "drift_diffusion_x".into(),
        value: xblock.value(),
        std_error: xblock.se(),
        bias: (0..d).map(|i| b[i].abs() * dx_bias[i] + 0.5 * sig[i * d + i].powi(2) * dxx_bias[i]).sum(),
    });
    total.extend(1.0, &xblock);

    // nonlocal x-term and the jump part of ψ
    let mut nonlocal = Stencil::default();
    let mut jump_psi = Stencil::default();
    let mut nl_bias = 0.0;
    if c.has_jumps() && h.levy.total_rate() > 0.0 {
        let shifted: Vec<ValueSample> = quad
            .par_iter()
            .map(|(e, _)| {
                let jump = c.jump_vec(x, &law, *e);
                let y: Vec<f64> = x.iter().zip(&jump).map(|(a, j)| a + j).collect();
                named("nonlocal_x", ev(node, &y, &cloud))
            })
            .collect::<Result<_>>()?;
        for ((e, w), vs) in quad.iter().zip(&shifted) {
            let jump = c.jump_vec(x, &law, *e);
            nonlocal.add(*w, vs).add(-*w, &v0);
            for i in 0..d {
                nonlocal.extend(-w * jump[i], &dx_st[i]);
                nl_bias += (w * jump[i]).abs() * dx_bias[i];
            }
            jump_psi.add(w * c.l(*e), vs).add(-w * c.l(*e), &v0);
        }
    }
    terms.push(TermBudget { term: "nonlocal_x".into(), value: nonlocal.value(), std_error: nonlocal.se(), bias: nl_bias });
    total.extend(1.0, &nonlocal);
    bias_total += nl_bias;

    // μ-block: E[∂_μV·b + ½ tr(∂_y∂_μV σσ) + ∫∫₀¹(∂_μV(ξ+ρβ) − ∂_μV(ξ))·β dρ dλ]
    let need_drift = c.drift.constant != 0.0 || c.drift.linear != 0.0 || c.drift.law_mean != 0.0 || c.drift.sine != 0.0;
    let need_diff = c.diffusion.constant != 0.0 || c.diffusion.sine != 0.0 || c.diffusion.law_sine != 0.0;
    let need_jump = c.has_jumps() && h.levy.total_rate() > 0.0;
    let mut mu_block = Stencil::default();
    let mut nonlocal_mu = Stencil::default();
    let mut dmu_v_at = Vec::new();
    let mut dy_dmu_v_at = Vec::new();
    if need_drift || need_diff || need_jump {
        let mc = cloud.len();
        let (rs, ws) = gauss_legendre_on(cfg.rho_nodes, 0.0, 1.0);
        let per_sample: Vec<(Vec<f64>, Vec<f64>, Stencil, Stencil)> = (0..mc)
            .into_par_iter()
            .map(|j| -> Result<_> {
                let xi = cloud.sample(j).to_vec();
                let wj = cloud.weights()[j];
                let bj = c.drift_vec(&xi, &law);
                let sj = c.diffusion_matrix(&xi, &law);
                let mut block = Stencil::default();
                let mut rho_block = Stencil::default();
                let mut dmu = vec![0.0; d];
                let mut dydmu = vec![0.0; d];
                // lifted derivative of V at sample j of `mu` in direction i, as a stencil scaled by w_j
                let lifted = |mu: &EmpiricalMeasure, i: usize| -> Result<(Stencil, ValueSample, ValueSample)> {
                    let mut up = vec![0.0; d];
                    up[i] = hm;
                    let dn: Vec<f64> = up.iter().map(|v| -v).collect();
                    let vp = named("dmu_V", ev(node, x, &mu.with_sample_moved(j, &up)?))?;
                    let vm = named("dmu_V", ev(node, x, &mu.with_sample_moved(j, &dn)?))?;
                    let mut s = Stencil::default();
                    s.add(0.5 / hm, &vp).add(-0.5 / hm, &vm);
                    Ok((s, vp, vm))
                };
                for i in 0..d {
                    let (g, vp, vm) = lifted(&cloud, i)?;
                    dmu[i] = g.value() / wj;
                    if need_drift {
                        block.extend(bj[i], &g);
                    }
                    if need_diff {
                        let mut hh = Stencil::default();
                        hh.add(1.0 / (hm * hm), &vp).add(-2.0 / (hm * hm), &v0).add(1.0 / (hm * hm), &vm);
                        dydmu[i] = hh.value() / wj;
                        block.extend(0.5 * sj[i * d + i] * sj[i * d + i], &hh);
                    }
                    if need_jump {
                        for (e, we) in &quad {
                            let beta = c.jump_vec(&xi, &law, *e);
                            for (r, wr) in rs.iter().zip(&ws) {
                                let moved = cloud.with_sample_moved(j, &beta.iter().map(|v| r * v).collect::<Vec<_>>())?;
                                let (gr, _, _) = lifted(&moved, i)?;
                                rho_block.extend(we * wr * beta[i], &gr).extend(-we * wr * beta[i], &g);
                            }
                        }
                    }
                }
                Ok((dmu, dydmu, block, rho_block))
            })
            .collect::<Result<_>>()?;
        for (dmu, dydmu, block, rho) in per_sample {
            if need_drift || need_jump {
                dmu_v_at.push(dmu);
            }
            if need_diff {
                dy_dmu_v_at.push(dydmu);
            }
            mu_block.extend(1.0, &block).extend(1.0, &rho);
            nonlocal_mu.extend(1.0, &rho);
        }
    }
    terms.push(TermBudget { term: "mu_block".into(), value: mu_block.value(), std_error: mu_block.se(), bias: 0.0 });
    total.extend(1.0, &mu_block);

    // driver at ψ, linearized for the standard error
    let z: Vec<f64> = (0..d).map(|i| dx_v[i] * sig[i * d + i]).collect();
    let psi_h = jump_psi.value();
    let pi_law = if c.driver.law_mean_y != 0.0 {
        psi_law(h, node, &cloud, &law)?
    } else {
        // the driver ignores the law of Π; only the state mean is filled in
        let mut mean = vec![0.0; 2 * d + 2];
        mean[..d].copy_from_slice(&law.mean);
        PiStats { mean }
    };
    let fval = c.f(x, v0.estimate, &z, psi_h, &pi_law);
    let (_, fy, fz, fh) = c.df(x, v0.estimate);
    let mut flin = Stencil::default();
    flin.add(fy, &v0).extend(fh, &jump_psi);
    for i in 0..d {
        flin.extend(fz * sig[i * d + i], &dx_st[i]);
    }
    let fbias: f64 = (0..d).map(|i| (fz * sig[i * d + i]).abs() * dx_bias[i]).sum();
    terms.push(TermBudget { term: "driver".into(), value: fval, std_error: flin.se(), bias: fbias });
    total.extend(1.0, &flin);
    bias_total += fbias;

    // floating-point cancellation in the difference quotients
    let roundoff = 1e3 * f64::EPSILON * (1.0 + v0.estimate.abs()) * (1.0 / ht + 1.0 / (hx * hx) + 1.0 / (hm * hm));
    terms.push(TermBudget { term: "roundoff".into(), value: 0.0, std_error: 0.0, bias: roundoff });
    bias_total += roundoff;

    let residual = dt.value() + xblock.value() + nonlocal.value() + mu_block.value() + fval;
    let std_error = total.se();
    let bundle = PdeDerivativeBundle {
        v: v0.estimate,
        dt_v: dt.value(),
        dx_v,
        dxx_v,
        nonlocal_x: nonlocal.value(),
        dmu_v_at,
        dy_dmu_v_at,
        nonlocal_mu: nonlocal_mu.value(),
        psi: (v0.estimate, z, psi_h),
        mu_block: mu_block.value(),
        driver: fval,
    };
    let all_finite = residual.is_finite() && std_error.is_finite();
    if !all_finite {
        return Err(Error::InvalidArgument("non-finite PDE term".into()).in_term("residual"));
    }
    Ok(PdeResidual {
        t: grid.node(node),
        x: x.to_vec(),
        residual,
        std_error,
        budget: k * std_error + bias_total,
        terms,
        bundle,
    })
}

/// Mean of `(ξ, ψ(t, ξ, μ))` over the cloud.
fn psi_law(h: &ValueFunctionHandle, node: usize, cloud: &EmpiricalMeasure, law: &MeasureStats) -> Result<PiStats> {
    let c = &h.c;
    let d = c.dim;
    let hx = h.cfg.fd_step_x;
    let quad = h.levy.quadrature();
    let rows: Vec<Vec<f64>> = (0..cloud.len())
        .into_par_iter()
        .map(|j| -> Result<Vec<f64>> {
            let xi = cloud.sample(j);
            let v = h.eval_ordered(node, xi, cloud)?.estimate;
            let sig = c.diffusion_matrix(xi, law);
            let mut row = xi.to_vec();
            row.push(v);
            for i in 0..d {
                let mut up = xi.to_vec();
                up[i] += hx;
                let mut dn = xi.to_vec();
                dn[i] -= hx;
                let g = (h.eval_ordered(node, &up, cloud)?.estimate - h.eval_ordered(node, &dn, cloud)?.estimate) / (2.0 * hx);
                row.push(g * sig[i * d + i]);
            }
            let mut jump = 0.0;
            if c.has_jumps() {
                for (e, w) in quad {
                    let y: Vec<f64> = xi.iter().zip(c.jump_vec(xi, law, *e)).map(|(a, b)| a + b).collect();
                    jump += w * c.l(*e) * (h.eval_ordered(node, &y, cloud)?.estimate - v);
                }
            }
            row.push(jump);
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let k = 2 * d + 2;
    let mut mean = vec![0.0; k];
    for (row, w) in rows.iter().zip(cloud.weights()) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += w * v);
    }
    Ok(PiStats { mean })
}

/// Law of `Π` from a solved cloud at one node, for callers that already have it.
pub fn pi_stats_at(cloud: &PiCloud, node: usize) -> &PiStats {
    &cloud.stats[node]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn handle(name: &str, params: &[(&str, f64)], levy: LevyModel, n: usize, steps: usize) -> ValueFunctionHandle {
        let c = CoefficientSet::instantiate(name, params).unwrap();
        let cfg = SolverConfig { n_particles: n, seed: 17, fd_step_x: 0.1, fd_step_mu: 0.1, ..Default::default() };
        ValueFunctionHandle::new(&c, &levy, TimeGrid::new(0.0, 1.0, steps).unwrap(), &cfg).unwrap()
    }

    fn cloud() -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(1, vec![-0.8, -0.1, 0.3, 0.9]).unwrap()
    }

    #[test]
    fn closed_form_values() {
        let h = handle("quadratic_terminal", &[("s", 0.0)], LevyModel::none(), 64, 8);
        let v = h.eval(0.25, &[0.7], &cloud()).unwrap();
        assert!((v.estimate - 0.49).abs() < 1e-12);
        let h = handle("zero", &[("driver.constant", 1.0)], LevyModel::none(), 64, 8);
        let v = h.eval(0.25, &[0.7], &cloud()).unwrap();
        assert!((v.estimate - 0.75).abs() < 1e-12);
        let h = handle("quadratic_terminal", &[("s", 0.5)], LevyModel::none(), 4000, 10);
        let v = h.eval(0.2, &[0.3], &cloud()).unwrap();
        let want = 0.09 + 0.25 * 0.8;
        assert!((v.estimate - want).abs() < 3.0 * v.std_error + 0.1 * 0.25, "{} vs {want} ({})", v.estimate, v.std_error);
    }

    #[test]
    fn permutation_invariance_and_cache() {
        let h = handle("linear_terminal_plus_law_mean", &[("s", 0.3)], LevyModel::none(), 200, 6);
        let a = h.eval(0.0, &[0.2], &cloud()).unwrap();
        let perm = EmpiricalMeasure::uniform(1, vec![0.9, -0.1, -0.8, 0.3]).unwrap();
        let b = h.eval(0.0, &[0.2], &perm).unwrap();
        assert_eq!(a.estimate.to_bits(), b.estimate.to_bits());
        assert_eq!(h.cache_len(), 1);
        let fresh = handle("linear_terminal_plus_law_mean", &[("s", 0.3)], LevyModel::none(), 200, 6);
        let c = fresh.eval(0.0, &[0.2], &perm).unwrap();
        assert_eq!(a.estimate.to_bits(), c.estimate.to_bits());
    }

    #[test]
    fn residual_zero_family() {
        let h = handle("zero", &[("terminal.linear", 1.0)], LevyModel::none(), 64, 10);
        let r = pde_residual(&h, 0.2, &[0.4], &cloud()).unwrap();
        assert!(r.residual.abs() < 1e-12, "{r:?}");
        assert!(r.within_budget());
        assert!((r.bundle.v - 0.4).abs() < 1e-12);
    }

    #[test]
    fn residual_pure_transport() {
        let h = handle("constant_drift", &[("b0", 0.5), ("terminal.law_mean", 1.0)], LevyModel::none(), 400, 10);
        let r = pde_residual(&h, 0.2, &[0.4], &cloud()).unwrap();
        let want_v = 0.4 + cloud().mean()[0] + 2.0 * 0.5 * 0.8;
        assert!((r.bundle.v - want_v).abs() < 1e-9, "{}", r.bundle.v);
        assert!((r.bundle.dt_v + 1.0).abs() < 1e-9);
        assert!(r.within_budget(), "{r:?}");
    }

    #[test]
    fn residual_compensated_jumps() {
        let levy = LevyModel::single_atom(1.0, 0.5).unwrap();
        let h = handle("jump_only_compensated", &[], levy, 2000, 10);
        let r = pde_residual(&h, 0.2, &[0.4], &cloud()).unwrap();
        assert!(r.within_budget(), "{r:?}");
    }

    #[test]
    fn off_grid_time_is_rejected() {
        let h = handle("zero", &[], LevyModel::none(), 8, 4);
        assert!(h.eval(0.3, &[0.0], &cloud()).is_err());
    }
}
