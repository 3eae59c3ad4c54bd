//! Pathwise check of the Itô formula for `F(t, U_t, P_{X_t})` along
//! simulated jump-Itô processes.
//!
//! Test functionals are cylindrical, `F = G(t, x, ⟨φ_1, μ⟩, …, ⟨φ_n, μ⟩)`, so
//! `∂_μF(y) = Σ_j ∂_{m_j}G ∇φ_j(y)` and every expectation over the independent
//! copy `X̂` reduces to per-half feature statistics.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{drivers, sample_initial};
use crate::grid::TimeGrid;
use crate::measures::EmpiricalMeasure;
use crate::quadrature::gauss_legendre_on;
use crate::randomness::{stream_rng, DriverPath, InitialSampler, LevyModel};
use crate::report::{mean_and_se, CheckMode, StatCheckReport};

pub const FUNCTIONALS: [&str; 5] = ["linear_x", "quadratic", "mean", "second_moment", "mixed"];
pub const PROCESSES: [&str; 4] = ["drift", "diffusion", "jumps", "full"];

/// Measure feature `φ(y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Feature {
    /// `y_i`
    Coord(usize),
    /// `|y|²`
    SquaredNorm,
}

impl Feature {
    fn value(&self, y: &[f64]) -> f64 {
        match *self {
            Feature::Coord(i) => y[i],
            Feature::SquaredNorm => y.iter().map(|v| v * v).sum(),
        }
    }

    fn grad(&self, y: &[f64], out: &mut [f64]) {
        match *self {
            Feature::Coord(i) => {
                out.iter_mut().for_each(|v| *v = 0.0);
                out[i] = 1.0;
            }
            Feature::SquaredNorm => out.iter_mut().zip(y).for_each(|(o, v)| *o = 2.0 * v),
        }
    }

    /// Diagonal of `∇²φ` (both features have diagonal Hessians).
    fn hess_diag(&self) -> f64 {
        match *self {
            Feature::Coord(_) => 0.0,
            Feature::SquaredNorm => 2.0,
        }
    }
}

/// Derivatives of `G` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct GDerivs {
    pub value: f64,
    pub dt: f64,
    pub dx: Vec<f64>,
    /// Diagonal of `∂²ₓG`; every registry functional has a diagonal x-Hessian.
    pub dxx_diag: Vec<f64>,
    pub dm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItoTestFunction {
    pub registry_name: String,
    pub dim: usize,
    pub features: Vec<Feature>,
}

impl ItoTestFunction {
    pub fn registry(name: &str, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::ParameterOutOfRange { name: "dim".into(), reason: "must be >= 1".into() });
        }
        let features = match name {
            "linear_x" | "quadratic" => Vec::new(),
            "mean" => (0..dim).map(Feature::Coord).collect(),
            "second_moment" => vec![Feature::SquaredNorm],
            "mixed" => (0..dim).map(Feature::Coord).chain([Feature::SquaredNorm]).collect(),
            _ => return Err(Error::UnknownRegistryName(name.into())),
        };
        Ok(Self { registry_name: name.into(), dim, features })
    }

    pub fn measure_free(&self) -> bool {
        self.features.is_empty()
    }

    /// Feature moments `⟨φ_j, μ⟩`.
    pub fn moments(&self, mu: &EmpiricalMeasure) -> Vec<f64> {
        self.features.iter().map(|f| mu.integrate(|y| f.value(y))).collect()
    }

    fn moments_of_rows(&self, rows: &[f64]) -> Vec<f64> {
        let n = rows.len() / self.dim;
        self.features
            .iter()
            .map(|f| rows.chunks_exact(self.dim).map(|y| f.value(y)).sum::<f64>() / n as f64)
            .collect()
    }

    /// `G` and its derivatives at `(t, x, m)`.
    pub fn g(&self, t: f64, x: &[f64], m: &[f64]) -> GDerivs {
        let d = self.dim;
        let mut r = GDerivs { value: 0.0, dt: 0.0, dx: vec![0.0; d], dxx_diag: vec![0.0; d], dm: vec![0.0; m.len()] };
        match self.registry_name.as_str() {
            "linear_x" => {
                r.value = x.iter().sum();
                r.dx = vec![1.0; d];
            }
            "quadratic" => {
                r.value = x.iter().map(|v| v * v).sum();
                r.dx = x.iter().map(|v| 2.0 * v).collect();
                r.dxx_diag = vec![2.0; d];
            }
            "mean" => {
                r.value = m.iter().sum();
                r.dm = vec![1.0; d];
            }
            "second_moment" => {
                r.value = m[0];
                r.dm = vec![1.0];
            }
            "mixed" => {
                // sin t + Σ x_i m_i + ½ ⟨|y|², μ⟩
                r.value = t.sin() + x.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() + 0.5 * m[d];
                r.dt = t.cos();
                r.dx = m[..d].to_vec();
                r.dm = x.iter().copied().chain([0.5]).collect();
            }
            _ => unreachable!("validated at construction"),
        }
        r
    }

    pub fn value(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> f64 {
        self.g(t, x, &self.moments(mu)).value
    }

    /// `∂_μF(t, x, μ)(y)`.
    pub fn dmu(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, y: &[f64]) -> Vec<f64> {
        let g = self.g(t, x, &self.moments(mu));
        let mut out = vec![0.0; self.dim];
        let mut buf = vec![0.0; self.dim];
        for (f, w) in self.features.iter().zip(&g.dm) {
            f.grad(y, &mut buf);
            out.iter_mut().zip(&buf).for_each(|(o, b)| *o += w * b);
        }
        out
    }

    /// Diagonal of `∂_y∂_μF(t, x, μ)(y)`.
    /// Registry features have `y`-independent Hessians.
    pub fn dy_dmu_diag(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, _y: &[f64]) -> Vec<f64> {
        let g = self.g(t, x, &self.moments(mu));
        let v: f64 = self.features.iter().zip(&g.dm).map(|(f, w)| w * f.hess_diag()).sum();
        vec![v; self.dim]
    }
}

/// Gauss–Legendre value of `∫₀¹ [∂_μF(x̂ + ρ j) − ∂_μF(x̂)]·j dρ`.
pub fn rho_integral(
    f: &ItoTestFunction,
    t: f64,
    x: &[f64],
    mu: &EmpiricalMeasure,
    x_hat: &[f64],
    jump: &[f64],
    nodes: usize,
) -> Result<f64> {
    if nodes < 2 {
        return Err(Error::ParameterOutOfRange { name: "rho_nodes".into(), reason: "must be >= 2".into() });
    }
    let (rs, ws) = gauss_legendre_on(nodes, 0.0, 1.0);
    let base = f.dmu(t, x, mu, x_hat);
    let mut total = 0.0;
    let mut y = vec![0.0; x_hat.len()];
    for (r, w) in rs.iter().zip(&ws) {
        y.iter_mut().zip(x_hat.iter().zip(jump)).for_each(|(o, (a, j))| *o = a + r * j);
        let at = f.dmu(t, x, mu, &y);
        total += w * at.iter().zip(&base).zip(jump).map(|((a, b), j)| (a - b) * j).sum::<f64>();
    }
    Ok(total)
}

/// Per-feature version used by the verifier: `∫₀¹ [∇φ(x̂ + ρ j) − ∇φ(x̂)]·j dρ`.
fn rho_feature(f: &Feature, x_hat: &[f64], jump: &[f64], rs: &[f64], ws: &[f64]) -> f64 {
    let d = x_hat.len();
    let mut base = vec![0.0; d];
    f.grad(x_hat, &mut base);
    let mut g = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut total = 0.0;
    for (r, w) in rs.iter().zip(ws) {
        y.iter_mut().zip(x_hat.iter().zip(jump)).for_each(|(o, (a, j))| *o = a + r * j);
        f.grad(&y, &mut g);
        total += w * g.iter().zip(&base).zip(jump).map(|((a, b), j)| (a - b) * j).sum::<f64>();
    }
    total
}

/// `constant + linear·s + sine·sin(s)`, applied componentwise.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepCoef {
    pub constant: f64,
    pub linear: f64,
    pub sine: f64,
}

impl StepCoef {
    pub const fn new(constant: f64, linear: f64, sine: f64) -> Self {
        Self { constant, linear, sine }
    }

    #[inline]
    pub fn at(&self, s: f64) -> f64 {
        self.constant + self.linear * s + self.sine * s.sin()
    }

    fn is_zero(&self) -> bool {
        self.constant == 0.0 && self.linear == 0.0 && self.sine == 0.0
    }
}

/// `dU = u dt + v dB + ∫ γ(e) Ñ(dt, de)` and `dX = b dt + σ dB + ∫ β(e) Ñ(dt, de)`,
/// componentwise with diagonal `v`, `σ`; jump coefficients are
/// `coef(state)·clip(e)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItoProcessSpec {
    pub name: String,
    pub u: StepCoef,
    pub v: StepCoef,
    pub gamma: StepCoef,
    pub b: StepCoef,
    pub sigma: StepCoef,
    pub beta: StepCoef,
    pub u0: f64,
    pub x0: InitialSampler,
}

impl ItoProcessSpec {
    pub fn registry(name: &str) -> Result<Self> {
        let z = StepCoef::default();
        let base = Self {
            name: name.into(),
            u: z,
            v: z,
            gamma: z,
            b: z,
            sigma: z,
            beta: z,
            u0: 0.5,
            x0: InitialSampler::Normal { mean: 0.0, std: 1.0 },
        };
        let spec = match name {
            "drift" => Self { u: StepCoef::new(1.0, 0.0, 0.0), b: StepCoef::new(1.0, 0.0, 0.0), ..base },
            "diffusion" => Self { v: StepCoef::new(0.5, 0.0, 0.0), sigma: StepCoef::new(0.5, 0.0, 0.0), ..base },
            "jumps" => Self { gamma: StepCoef::new(0.5, 0.0, 0.0), beta: StepCoef::new(0.5, 0.0, 0.0), ..base },
            "full" => Self {
                u: StepCoef::new(0.0, -0.5, 0.0),
                v: StepCoef::new(0.4, 0.0, 0.0),
                gamma: StepCoef::new(0.3, 0.0, 0.2),
                b: StepCoef::new(0.0, -1.0, 0.0),
                sigma: StepCoef::new(0.3, 0.0, 0.1),
                beta: StepCoef::new(0.4, 0.0, 0.0),
                ..base
            },
            _ => return Err(Error::UnknownRegistryName(name.into())),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Declared `ζ` with `|γ(e)| ≤ ζ (1 ∧ |e|)`; jump coefficients must be bounded.
    pub fn zeta(&self) -> Result<f64> {
        for (n, c) in [("gamma", &self.gamma), ("beta", &self.beta)] {
            if c.linear != 0.0 {
                return Err(Error::ParameterOutOfRange { name: n.into(), reason: "jump coefficient must be bounded".into() });
            }
        }
        Ok((self.gamma.constant.abs() + self.gamma.sine.abs()).max(self.beta.constant.abs() + self.beta.sine.abs()))
    }

    pub fn validate(&self) -> Result<()> {
        self.zeta().map(|_| ())
    }

    fn has_jumps(&self) -> bool {
        !(self.gamma.is_zero() && self.beta.is_zero())
    }
}

/// One rung of the refinement ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub delta: f64,
    pub m: usize,
    pub mean_abs_err: f64,
    pub se: f64,
    pub max_abs_err: f64,
    /// Signed mean of `LHS − RHS`.
    pub bias: f64,
    pub bias_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItoOutcome {
    pub report: StatCheckReport,
    pub ladder: Vec<LadderRow>,
    /// Per-path `LHS − RHS` of the finest rung.
    pub finest_errors: Vec<f64>,
}

/// Per-path `LHS − RHS` on one grid.
fn ito_errors(
    f: &ItoTestFunction,
    p: &ItoProcessSpec,
    drv: &[DriverPath],
    x0: &[f64],
    levy: &LevyModel,
    rho_nodes: usize,
) -> Vec<f64> {
    let d = f.dim;
    let m = drv.len();
    let grid = drv[0].grid;
    let delta = grid.delta();
    let quad = levy.quadrature();
    let (rs, ws) = gauss_legendre_on(rho_nodes, 0.0, 1.0);
    let half = m / 2;
    let nf = f.features.len();
    let mut u = vec![p.u0; m * d];
    let mut x = x0.to_vec();
    let mut rhs = vec![0.0; m];
    let m_start = f.moments_of_rows(&x);
    let lhs0: Vec<f64> = (0..m).map(|i| f.g(grid.t_start(), &u[i * d..(i + 1) * d], &m_start).value).collect();
    let clip = crate::coefficients::clip;
    for k in 0..grid.n_steps() {
        let t = grid.node(k);
        let mom = f.moments_of_rows(&x);
        // hat statistics of each half: Ê[∇φ·b + ½ tr(∇²φ σσ) + ∫∫(∇φ(X̂+ρβ̂) − ∇φ(X̂))·β̂]
        let half_stats = |range: std::ops::Range<usize>| -> Vec<f64> {
            let n = range.len() as f64;
            let per: Vec<Vec<f64>> = range
                .into_par_iter()
                .map(|q| {
                    let xq = &x[q * d..(q + 1) * d];
                    let bq: Vec<f64> = xq.iter().map(|s| p.b.at(*s)).collect();
                    let sq: Vec<f64> = xq.iter().map(|s| p.sigma.at(*s)).collect();
                    let mut g = vec![0.0; d];
                    f.features
                        .iter()
                        .map(|ft| {
                            ft.grad(xq, &mut g);
                            let drift: f64 = g.iter().zip(&bq).map(|(a, b)| a * b).sum();
                            let diff: f64 = (0..d).map(|i| 0.5 * ft.hess_diag() * sq[i] * sq[i]).sum();
                            let jumps: f64 = quad
                                .iter()
                                .map(|(e, w)| {
                                    let j: Vec<f64> = xq.iter().map(|s| p.beta.at(*s) * clip(*e)).collect();
                                    w * rho_feature(ft, xq, &j, &rs, &ws)
                                })
                                .sum();
                            drift + diff + jumps
                        })
                        .collect()
                })
                .collect();
            let mut acc = vec![0.0; nf];
            for v in &per {
                acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            }
            acc.iter().map(|a| a / n).collect()
        };
        let (hat_for_a, hat_for_b) = if nf > 0 { (half_stats(half..m), half_stats(0..half)) } else { (Vec::new(), Vec::new()) };
        let upd: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..m)
            .into_par_iter()
            .map(|i| {
                let ui = &u[i * d..(i + 1) * d];
                let xi = &x[i * d..(i + 1) * d];
                let gd = f.g(t, ui, &mom);
                let uu: Vec<f64> = ui.iter().map(|s| p.u.at(*s)).collect();
                let vv: Vec<f64> = ui.iter().map(|s| p.v.at(*s)).collect();
                let gam = |e: f64| -> Vec<f64> { ui.iter().map(|s| p.gamma.at(*s) * clip(e)).collect() };
                let fval = |y: &[f64]| f.g(t, y, &mom).value;
                let shifted = |base: &[f64], j: &[f64]| -> Vec<f64> { base.iter().zip(j).map(|(a, b)| a + b).collect() };
                let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(p, q)| p * q).sum() };
                let mut r = gd.dt + dot(&gd.dx, &uu) + (0..d).map(|j| 0.5 * gd.dxx_diag[j] * vv[j] * vv[j]).sum::<f64>();
                let mut comp_nl = 0.0;
                for (e, w) in quad {
                    let g = gam(*e);
                    let jumped = fval(&shifted(ui, &g));
                    r += w * (jumped - gd.value - dot(&gd.dx, &g));
                    comp_nl += w * (jumped - gd.value);
                }
                if nf > 0 {
                    let hat = if i < half { &hat_for_a } else { &hat_for_b };
                    r += dot(&gd.dm, hat);
                }
                let mut out = delta * r;
                let db = drv[i].db(k);
                out += (0..d).map(|j| gd.dx[j] * vv[j] * db[j]).sum::<f64>();
                // jump sum against the compensated measure, pre-jump state inside the step
                let mut pre = ui.to_vec();
                let mut jsum = 0.0;
                for ev in drv[i].events_in_step(k) {
                    let g = gam(ev.mark);
                    let next = shifted(&pre, &g);
                    jsum += fval(&next) - fval(&pre);
                    pre = next;
                }
                out += jsum - delta * comp_nl;
                // Euler step of both processes with node-frozen coefficients
                let gcomp: Vec<f64> = (0..d).map(|j| quad.iter().map(|(e, w)| w * p.gamma.at(ui[j]) * clip(*e)).sum()).collect();
                let unew: Vec<f64> = (0..d).map(|j| pre[j] + uu[j] * delta + vv[j] * db[j] - delta * gcomp[j]).collect();
                let mut xpre = xi.to_vec();
                for ev in drv[i].events_in_step(k) {
                    for j in 0..d {
                        xpre[j] += p.beta.at(xi[j]) * clip(ev.mark);
                    }
                }
                let xnew: Vec<f64> = (0..d)
                    .map(|j| {
                        let bc: f64 = quad.iter().map(|(e, w)| w * p.beta.at(xi[j]) * clip(*e)).sum();
                        xpre[j] + p.b.at(xi[j]) * delta + p.sigma.at(xi[j]) * db[j] - delta * bc
                    })
                    .collect();
                (unew, xnew, out)
            })
            .collect();
        for (i, (un, xn, inc)) in upd.into_iter().enumerate() {
            u[i * d..(i + 1) * d].copy_from_slice(&un);
            x[i * d..(i + 1) * d].copy_from_slice(&xn);
            rhs[i] += inc;
        }
    }
    let m_end = f.moments_of_rows(&x);
    (0..m).map(|i| f.g(grid.t_end(), &u[i * d..(i + 1) * d], &m_end).value - lhs0[i] - rhs[i]).collect()
}

/// Runs the verifier on `grid` refined `refinements − 1` times (common drivers,
/// sampled on the finest grid and coarsened). Pass iff the mean absolute error
/// does not increase by more than `k·SE` along the ladder; for measure-free
/// functionals the signed bias of the finest rung must also be within
/// `k·SE + Δ`.
#[allow(clippy::too_many_arguments)]
pub fn verify_ito(
    f: &ItoTestFunction,
    p: &ItoProcessSpec,
    grid: &TimeGrid,
    m: usize,
    levy: &LevyModel,
    seed: u64,
    refinements: usize,
    rho_nodes: usize,
    k: f64,
) -> Result<ItoOutcome> {
    p.validate()?;
    if m < 4 {
        return Err(Error::InvalidArgument("need at least 4 paths".into()));
    }
    if refinements < 1 {
        return Err(Error::InvalidArgument("need at least one rung".into()));
    }
    if rho_nodes < 2 {
        return Err(Error::ParameterOutOfRange { name: "rho_nodes".into(), reason: "must be >= 2".into() });
    }
    let levy_used = if p.has_jumps() { levy.clone() } else { LevyModel::none() };
    let finest = grid.refine(1 << (refinements - 1))?;
    let fine = drivers(&finest, f.dim, &levy_used, m, 0, seed);
    let x0 = sample_initial(&p.x0, f.dim, m, seed);
    let mut ladder = Vec::new();
    let mut finest_errors = Vec::new();
    for r in 0..refinements {
        let factor = 1 << (refinements - 1 - r);
        let drv: Vec<DriverPath> =
            if factor == 1 { fine.clone() } else { fine.par_iter().map(|d| d.coarsen(factor)).collect::<Result<_>>()? };
        let errs = ito_errors(f, p, &drv, &x0, &levy_used, rho_nodes);
        if let Some(i) = errs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: drv[0].grid.n_steps(), path: i });
        }
        let abs: Vec<f64> = errs.iter().map(|v| v.abs()).collect();
        let (mean_abs_err, se) = mean_and_se(&abs);
        let (bias, bias_se) = mean_and_se(&errs);
        ladder.push(LadderRow {
            delta: drv[0].grid.delta(),
            m,
            mean_abs_err,
            se,
            max_abs_err: abs.iter().fold(0.0, |a: f64, b| a.max(*b)),
            bias,
            bias_se,
        });
        finest_errors = errs;
    }
    let mut monotone = true;
    for w in ladder.windows(2) {
        // the absolute floor absorbs rounding when both rungs are exact
        let tol = k * (w[0].se * w[0].se + w[1].se * w[1].se).sqrt() + 1e-12;
        if w[1].mean_abs_err > w[0].mean_abs_err + tol {
            monotone = false;
        }
    }
    let first = &ladder[0];
    let last = ladder.last().unwrap();
    let order = if ladder.len() > 1 && last.mean_abs_err > 0.0 && first.mean_abs_err > 0.0 {
        (first.mean_abs_err / last.mean_abs_err).log2() / (ladder.len() - 1) as f64
    } else {
        f64::NAN
    };
    let mut pass = monotone;
    let classical_ok = !f.measure_free() || last.bias.abs() <= k * last.bias_se + last.delta;
    pass &= classical_ok;
    let name = format!("ito_{}_{}", f.registry_name, p.name);
    let mut report = StatCheckReport::with_verdict(name, CheckMode::ConvergenceOrder, order, 0.0, pass, (m * refinements) as u64);
    report.std_error = last.se;
    report.note(format!(
        "monotone={monotone}; finest mean|err|={:.3e}; finest bias={:.3e}±{:.1e}; k={k}; rho_nodes={rho_nodes}",
        last.mean_abs_err, last.bias, last.bias_se
    ));
    if f.measure_free() {
        report.note(format!("classical_within_delta={classical_ok}"));
    }
    Ok(ItoOutcome { report, ladder, finest_errors })
}

/// Gaussian integration by parts, `E[φ(ζ)ζ] = E[φ′(ζ)]`, with `φ = sin`.
pub fn gaussian_ibp_selftest(n: usize, seed: u64, k: f64) -> StatCheckReport {
    let mut rng = stream_rng(seed, 0, 0);
    let diffs: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z.sin() * z - z.cos()
        })
        .collect();
    let (est, se) = mean_and_se(&diffs);
    StatCheckReport::equality("gaussian_integration_by_parts", est, se, 0.0, k, 0.0, n as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(1, vec![-1.0, 0.5, 2.0]).unwrap()
    }

    #[test]
    fn rho_integral_closed_forms() {
        let mu = cloud();
        let mean = ItoTestFunction::registry("mean", 1).unwrap();
        assert_eq!(rho_integral(&mean, 0.0, &[0.3], &mu, &[0.2], &[0.7], 8).unwrap(), 0.0);
        let sm = ItoTestFunction::registry("second_moment", 1).unwrap();
        let j = 0.7;
        let v = rho_integral(&sm, 0.0, &[0.3], &mu, &[0.2], &[j], 8).unwrap();
        assert!((v - j * j).abs() < 1e-14);
        assert_eq!(rho_integral(&sm, 0.0, &[0.3], &mu, &[0.2], &[0.0], 8).unwrap(), 0.0);
        assert!(rho_integral(&sm, 0.0, &[0.3], &mu, &[0.2], &[j], 1).is_err());
    }

    #[test]
    fn lions_derivatives_match_lifted_differences() {
        let mu = cloud();
        for name in ["mean", "second_moment", "mixed"] {
            let f = ItoTestFunction::registry(name, 1).unwrap();
            let x = [0.4];
            let lifted = crate::measures::lifted_grad(|m| f.value(0.3, &x, m), &mu, 1, 1e-5).unwrap();
            let an = f.dmu(0.3, &x, &mu, mu.sample(1));
            assert!((lifted[0] - an[0]).abs() < 1e-6, "{name}: {lifted:?} vs {an:?}");
        }
    }

    #[test]
    fn drift_only_is_exact() {
        let f = ItoTestFunction::registry("linear_x", 1).unwrap();
        let p = ItoProcessSpec::registry("drift").unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let out = verify_ito(&f, &p, &grid, 20, &LevyModel::none(), 1, 2, 8, 3.0).unwrap();
        assert!(out.ladder.iter().all(|r| r.max_abs_err < 1e-13), "{:?}", out.ladder);
        assert!(out.report.passed());
    }

    #[test]
    fn mean_functional_under_drift_is_exact() {
        let f = ItoTestFunction::registry("mean", 1).unwrap();
        let p = ItoProcessSpec::registry("drift").unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let out = verify_ito(&f, &p, &grid, 50, &LevyModel::none(), 1, 3, 8, 3.0).unwrap();
        assert_eq!(out.ladder.len(), 3);
        assert!(out.ladder.iter().all(|r| r.max_abs_err < 1e-12));
    }

    #[test]
    fn quadratic_with_jumps_decays() {
        let f = ItoTestFunction::registry("quadratic", 1).unwrap();
        let p = ItoProcessSpec::registry("full").unwrap();
        let levy = LevyModel::single_atom(2.0, 0.8).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let out = verify_ito(&f, &p, &grid, 2000, &levy, 3, 3, 8, 3.0).unwrap();
        let l = &out.ladder;
        assert!(l[2].mean_abs_err < l[0].mean_abs_err, "{l:?}");
        assert!(out.report.estimate >= 0.4, "{:?}", out.report);
        assert!(out.report.passed(), "{:?}", out.report);
    }

    #[test]
    fn measure_terms_under_full_dynamics() {
        let levy = LevyModel::single_atom(2.0, 0.8).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        for name in ["mean", "second_moment", "mixed"] {
            let f = ItoTestFunction::registry(name, 1).unwrap();
            let p = ItoProcessSpec::registry("full").unwrap();
            let out = verify_ito(&f, &p, &grid, 4000, &levy, 5, 3, 8, 3.0).unwrap();
            assert!(out.report.passed(), "{name}: {:?} {:?}", out.report, out.ladder);
        }
    }

    #[test]
    fn ibp_selftest_passes() {
        assert!(gaussian_ibp_selftest(100_000, 9, 3.0).passed());
    }

    #[test]
    fn unknown_names() {
        assert!(ItoTestFunction::registry("nope", 1).is_err());
        assert!(ItoProcessSpec::registry("nope").is_err());
    }
}
