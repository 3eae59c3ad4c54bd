//! First-variation processes: `∂ₓX` along pivot paths and the measure
//! derivative `U(y) = ∂_μX(y)`, both as exact derivatives of the Euler map.

use std::sync::Arc;

use rayon::prelude::*;

use super::{drivers, simulate_law_with, simulate_pivot_with, ParticleEnsemble, PivotPaths, AUX_STREAM_BASE};
use crate::coefficients::CoefficientSet;
use crate::error::{Error, Result};
use crate::measures::MeasureStats;
use crate::randomness::{JumpEvent, LevyModel};

/// Per-path `d×d` matrices along the grid, stored path-major:
/// `[(path * n_nodes + node) * d*d + row * d + col]`.
#[derive(Debug, Clone, Default)]
pub struct VariationPaths {
    pub dim: usize,
    pub n_nodes: usize,
    /// `∂ₓX` along each pivot path.
    pub dx_paths: Option<Vec<f64>>,
    /// `U(y)` along each pivot path.
    pub dmu_paths: Option<Vec<f64>>,
    /// The coupled copies `U^{ξ}(y)` along each law path.
    pub dmu_law_paths: Option<Vec<f64>>,
    /// Per-node mean of `∂ₓX` over pivots started at `y`.
    pub aux_dx_mean: Option<Vec<f64>>,
    pub y: Option<Vec<f64>>,
}

impl VariationPaths {
    fn at<'a>(&self, v: &'a [f64], path: usize, node: usize) -> &'a [f64] {
        let dd = self.dim * self.dim;
        let o = (path * self.n_nodes + node) * dd;
        &v[o..o + dd]
    }

    pub fn dx(&self, path: usize, node: usize) -> &[f64] {
        self.at(self.dx_paths.as_deref().expect("dx computed"), path, node)
    }

    pub fn dmu(&self, path: usize, node: usize) -> &[f64] {
        self.at(self.dmu_paths.as_deref().expect("dmu computed"), path, node)
    }

    pub fn dmu_law(&self, path: usize, node: usize) -> &[f64] {
        self.at(self.dmu_law_paths.as_deref().expect("dmu computed"), path, node)
    }
}

/// Derivative of one Euler component step, with an optional law forcing `g`
/// (the `E[·]` terms) multiplying the measure derivatives of the coefficients.
#[inline]
#[allow(clippy::too_many_arguments)]
fn variation_component(
    c: &CoefficientSet,
    x0: f64,
    m: f64,
    db: f64,
    events: &[JumpEvent],
    quad: &[(f64, f64)],
    delta: f64,
    dval: f64,
    g: f64,
) -> f64 {
    let comp_x: f64 = quad.iter().map(|(e, w)| w * c.dbeta_dx(x0, *e)).sum();
    let comp_mu: f64 = quad.iter().map(|(e, w)| w * c.dbeta_dmu(m, *e)).sum();
    let cont = (c.db_dx(x0) * delta + c.dsigma_dx(x0) * db - delta * comp_x) * dval
        + (c.db_dmu(m) * delta + c.dsigma_dmu(m) * db - delta * comp_mu) * g;
    let mut pre_x = x0;
    let mut pre_d = dval;
    for ev in events {
        pre_d += c.dbeta_dx(pre_x, ev.mark) * pre_d + c.dbeta_dmu(m, ev.mark) * g;
        pre_x += c.beta(pre_x, m, ev.mark);
    }
    pre_d + cont
}

fn require_smooth(c: &CoefficientSet) -> Result<()> {
    // every registry family carries analytic first derivatives; this guards
    // against hand-built sets with non-finite parameters
    let fields = [c.drift.linear, c.drift.sine, c.diffusion.sine, c.jump.sine];
    if fields.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::MissingDerivative(c.registry_name.clone()))
    }
}

/// Path-major `∂ₓX` along paths with frozen law statistics.
fn dx_along(
    c: &CoefficientSet,
    paths: &super::Paths,
    law_stats: &[MeasureStats],
    levy: &LevyModel,
) -> Vec<f64> {
    let d = paths.dim;
    let dd = d * d;
    let nn = paths.grid.n_nodes();
    let quad = levy.quadrature();
    let delta = paths.grid.delta();
    let mut out = vec![0.0; paths.m * nn * dd];
    out.par_chunks_mut(nn * dd).enumerate().for_each(|(p, buf)| {
        for r in 0..d {
            buf[r * d + r] = 1.0;
        }
        let drv = &paths.drivers()[p];
        for k in 0..paths.grid.n_steps() {
            let x = paths.state(k, p);
            let db = drv.db(k);
            let ev = drv.events_in_step(k);
            let (cur, next) = buf[k * dd..(k + 2) * dd].split_at_mut(dd);
            for r in 0..d {
                for col in 0..d {
                    next[r * d + col] = variation_component(
                        c,
                        x[r],
                        law_stats[k].mean[r],
                        db[r],
                        ev,
                        quad,
                        delta,
                        cur[r * d + col],
                        0.0,
                    );
                }
            }
        }
    });
    out
}

/// `∂ₓX` along every pivot path, started at the identity.
pub fn simulate_dx(c: &CoefficientSet, pivots: &PivotPaths, levy: &LevyModel) -> Result<VariationPaths> {
    require_smooth(c)?;
    Ok(VariationPaths {
        dim: pivots.paths.dim,
        n_nodes: pivots.paths.grid.n_nodes(),
        dx_paths: Some(dx_along(c, &pivots.paths, &pivots.law_stats, levy)),
        ..Default::default()
    })
}

/// `U(y) = ∂_μX(y)` along pivot paths and along the law paths (coupled copies).
///
/// The expectations are empirical means: over `M` auxiliary pivots started at
/// `y` (streams from [`AUX_STREAM_BASE`]) for `E[∂ₓX^{y}]`, and over the law
/// particles for `E[U^{ξ}(y)]`.
pub fn simulate_dmu(
    c: &CoefficientSet,
    ensemble: &ParticleEnsemble,
    pivots: &PivotPaths,
    y: &[f64],
    levy: &LevyModel,
    seed: u64,
) -> Result<VariationPaths> {
    require_smooth(c)?;
    let d = c.dim;
    if y.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: y.len() });
    }
    let dd = d * d;
    let grid = *ensemble.grid();
    let nn = grid.n_nodes();
    let m = ensemble.m();
    let quad = levy.quadrature();
    let delta = grid.delta();
    let stats = &ensemble.law_stats;

    let aux_drv = Arc::new(drivers(&grid, d, levy, m, AUX_STREAM_BASE, seed));
    let aux_starts: Vec<f64> = (0..m).flat_map(|_| y.iter().copied()).collect();
    let aux = simulate_pivot_with(c, &aux_starts, aux_drv, stats.clone(), levy)?;
    let aux_dx = dx_along(c, &aux.paths, stats, levy);
    let mut a_mean = vec![0.0; nn * dd];
    for p in 0..m {
        for k in 0..nn {
            for q in 0..dd {
                a_mean[k * dd + q] += aux_dx[(p * nn + k) * dd + q];
            }
        }
    }
    a_mean.iter_mut().for_each(|v| *v /= m as f64);

    // coupled copies on the law ensemble, node-synchronous because of E[U^ξ]
    let law = &ensemble.law;
    let mut law_u = vec![0.0; m * nn * dd];
    let mut forcing = vec![0.0; nn * dd];
    let mut u_cur = vec![0.0; m * dd];
    for k in 0..grid.n_steps() {
        let mut u_bar = vec![0.0; dd];
        for p in 0..m {
            for q in 0..dd {
                u_bar[q] += u_cur[p * dd + q];
            }
        }
        for q in 0..dd {
            forcing[k * dd + q] = a_mean[k * dd + q] + u_bar[q] / m as f64;
        }
        let g = &forcing[k * dd..(k + 1) * dd];
        let law_stats = &stats[k];
        u_cur.par_chunks_mut(dd).enumerate().for_each(|(p, u)| {
            let x = law.state(k, p);
            let drv = &law.drivers()[p];
            let db = drv.db(k);
            let ev = drv.events_in_step(k);
            for r in 0..d {
                for col in 0..d {
                    u[r * d + col] = variation_component(
                        c,
                        x[r],
                        law_stats.mean[r],
                        db[r],
                        ev,
                        quad,
                        delta,
                        u[r * d + col],
                        g[r * d + col],
                    );
                }
            }
        });
        for p in 0..m {
            let o = (p * nn + k + 1) * dd;
            law_u[o..o + dd].copy_from_slice(&u_cur[p * dd..(p + 1) * dd]);
        }
    }

    let pv = &pivots.paths;
    let mut piv_u = vec![0.0; pv.m * nn * dd];
    piv_u.par_chunks_mut(nn * dd).enumerate().for_each(|(p, buf)| {
        let drv = &pv.drivers()[p];
        for k in 0..grid.n_steps() {
            let x = pv.state(k, p);
            let db = drv.db(k);
            let ev = drv.events_in_step(k);
            let g = &forcing[k * dd..(k + 1) * dd];
            let (cur, next) = buf[k * dd..(k + 2) * dd].split_at_mut(dd);
            for r in 0..d {
                for col in 0..d {
                    next[r * d + col] = variation_component(
                        c,
                        x[r],
                        pivots.law_stats[k].mean[r],
                        db[r],
                        ev,
                        quad,
                        delta,
                        cur[r * d + col],
                        g[r * d + col],
                    );
                }
            }
        }
    });

    Ok(VariationPaths {
        dim: d,
        n_nodes: nn,
        dx_paths: None,
        dmu_paths: Some(piv_u),
        dmu_law_paths: Some(law_u),
        aux_dx_mean: Some(a_mean),
        y: Some(y.to_vec()),
    })
}

/// Lifted finite-difference oracle for `∂_μX(ξ^j)` along the pivot paths:
/// perturb law sample `j` in coordinate `coord` by `±h`, re-simulate law and
/// pivots with the same drivers, and return `M·(X⁺ − X⁻)/(2h)`, path-major
/// `[(path * n_nodes + node) * d + i]`.
pub fn lifted_dmu_oracle(
    c: &CoefficientSet,
    ensemble: &ParticleEnsemble,
    pivots: &PivotPaths,
    j: usize,
    coord: usize,
    h: f64,
    levy: &LevyModel,
) -> Result<Vec<f64>> {
    let d = c.dim;
    let m = ensemble.m();
    if j >= m {
        return Err(Error::IndexOutOfRange { index: j, len: m });
    }
    if coord >= d {
        return Err(Error::IndexOutOfRange { index: coord, len: d });
    }
    let base = ensemble.law.node_states(0).to_vec();
    let starts = pivots.paths.node_states(0).to_vec();
    let run = |sign: f64| -> Result<PivotPaths> {
        let mut init = base.clone();
        init[j * d + coord] += sign * h;
        let e = simulate_law_with(c, &init, ensemble.law.drivers().clone(), levy, &ensemble.initial_sampler_name)?;
        simulate_pivot_with(c, &starts, pivots.paths.drivers().clone(), e.law_stats.clone(), levy)
    };
    let plus = run(1.0)?;
    let minus = run(-1.0)?;
    let nn = ensemble.grid().n_nodes();
    let mp = pivots.paths.m;
    let mut out = vec![0.0; mp * nn * d];
    for p in 0..mp {
        for k in 0..nn {
            let a = plus.paths.state(k, p);
            let b = minus.paths.state(k, p);
            for i in 0..d {
                out[(p * nn + k) * d + i] = m as f64 * (a[i] - b[i]) / (2.0 * h);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{simulate_law_ensemble, simulate_pivot};
    use super::*;
    use crate::grid::TimeGrid;
    use crate::randomness::InitialSampler;

    fn setup(c: &CoefficientSet, levy: &LevyModel, n: usize, m: usize) -> (ParticleEnsemble, PivotPaths) {
        let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
        let xi = InitialSampler::Normal { mean: 0.2, std: 0.5 };
        let e = simulate_law_ensemble(c, &xi, &grid, m, levy, 9).unwrap();
        let p = simulate_pivot(c, &vec![0.4; c.dim], &e, m, levy, 9).unwrap();
        (e, p)
    }

    #[test]
    fn zero_family_dx_is_identity() {
        let c = CoefficientSet::instantiate("zero", &[("dim", 2.0)]).unwrap();
        let (_, p) = setup(&c, &LevyModel::none(), 10, 5);
        let v = simulate_dx(&c, &p, &LevyModel::none()).unwrap();
        for k in 0..11 {
            assert_eq!(v.dx(3, k), &[1.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn linear_drift_dx_is_the_product_formula() {
        let a = 0.7;
        let c = CoefficientSet::instantiate("zero", &[("drift.linear", a)]).unwrap();
        let n = 50;
        let (_, p) = setup(&c, &LevyModel::none(), n, 4);
        let v = simulate_dx(&c, &p, &LevyModel::none()).unwrap();
        let expect = (1.0 + a / n as f64).powi(n as i32);
        assert!((v.dx(0, n)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn dx_matches_common_random_number_difference() {
        let c = CoefficientSet::instantiate(
            "mean_reverting_to_law_mean",
            &[("s", 0.3), ("drift.sine", 0.5), ("diffusion.sine", 0.2), ("jump.sine", 0.3), ("jump", 0.2)],
        )
        .unwrap();
        let levy = LevyModel::uniform(2.0, 0.2, 0.8, 4).unwrap();
        let (e, p) = setup(&c, &levy, 40, 30);
        let v = simulate_dx(&c, &p, &levy).unwrap();
        let h = 1e-5;
        let run = |x: f64| {
            let starts = vec![x; p.paths.m];
            simulate_pivot_with(&c, &starts, p.paths.drivers().clone(), e.law_stats.clone(), &levy).unwrap()
        };
        let (up, dn) = (run(0.4 + h), run(0.4 - h));
        for i in 0..p.paths.m {
            let fd = (up.paths.state(40, i)[0] - dn.paths.state(40, i)[0]) / (2.0 * h);
            assert!((fd - v.dx(i, 40)[0]).abs() < 1e-8, "{fd} vs {}", v.dx(i, 40)[0]);
        }
    }

    #[test]
    fn law_free_coefficients_have_zero_dmu() {
        let c = CoefficientSet::instantiate("constant_drift", &[("s", 0.2)]).unwrap();
        let (e, p) = setup(&c, &LevyModel::none(), 10, 20);
        let v = simulate_dmu(&c, &e, &p, &[0.1], &LevyModel::none(), 3).unwrap();
        assert!(v.dmu_paths.unwrap().iter().all(|u| *u == 0.0));
        assert!(v.dmu_law_paths.unwrap().iter().all(|u| *u == 0.0));
    }

    #[test]
    fn dmu_matches_lifted_oracle_for_additive_noise() {
        let c = CoefficientSet::instantiate("mean_reverting_to_law_mean", &[("kappa", 1.0), ("s", 0.3)]).unwrap();
        let (e, p) = setup(&c, &LevyModel::none(), 20, 200);
        let j = 17;
        let y = e.law.state(0, j).to_vec();
        let v = simulate_dmu(&c, &e, &p, &y, &LevyModel::none(), 3).unwrap();
        let fd = lifted_dmu_oracle(&c, &e, &p, j, 0, 1e-4, &LevyModel::none()).unwrap();
        let nn = 21;
        for i in 0..p.paths.m {
            let a = v.dmu(i, 20)[0];
            let b = fd[i * nn + 20];
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
