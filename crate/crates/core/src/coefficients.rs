//! Closed registry of coefficient families `(b, σ, β, f, Φ, l)`.
//!
//! Every family is an instance of one parametric template. All state dependence
//! is componentwise, the diffusion matrix is diagonal, and the law enters only
//! through its mean, so every measure derivative is constant in the sample
//! variable. Marks are scalar; jump and mark-weight coefficients carry the
//! factor `clip(e) = sign(e)·min(|e|, 1)`, which makes the `(1 ∧ |e|)` growth
//! bound hold by construction.
//!
//! Several oracle families have an unbounded (linear or quadratic) terminal
//! function. That violates the boundedness normally required of `Φ` and `f`;
//! those families exist because their solutions are known in closed form.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{w2, EmpiricalMeasure, MeasureStats};
use crate::report::StatCheckReport;

pub const FAMILIES: [&str; 7] = [
    "zero",
    "constant_drift",
    "mean_reverting_to_law_mean",
    "linear_terminal_plus_law_mean",
    "bsde_law_mean_driver",
    "quadratic_terminal",
    "jump_only_compensated",
];

pub type Params = BTreeMap<String, f64>;

pub fn clip(e: f64) -> f64 {
    e.signum() * e.abs().min(1.0)
}

/// `b_i = constant + linear·x_i + law_mean·m_i + sine·sin(x_i)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    pub constant: f64,
    pub linear: f64,
    pub law_mean: f64,
    pub sine: f64,
}

/// Diagonal `σ_ii = constant + sine·sin(x_i) + law_sine·sin(m_i)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Diffusion {
    pub constant: f64,
    pub sine: f64,
    pub law_sine: f64,
}

/// `β_i = clip(e)·(constant + sine·sin(x_i) + law_sine·sin(m_i))`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Jump {
    pub constant: f64,
    pub sine: f64,
    pub law_sine: f64,
}

/// `f = constant + x·Σx_i + y·y + z·Σz_i + h·h + law_mean_y·E_ν[Y] + sine·sin(Σx_i + y)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Driver {
    pub constant: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub h: f64,
    pub law_mean_y: f64,
    pub sine: f64,
}

/// `Φ = constant + linear·Σx_i + quadratic·|x|² + law_mean·Σm_i + sine·sin(Σx_i)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Terminal {
    pub constant: f64,
    pub linear: f64,
    pub quadratic: f64,
    pub law_mean: f64,
    pub sine: f64,
}

/// Mean of the law of `Π = (X, Y, Z, Γ)`, laid out as `[x (d), y, z (d), γ]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiStats {
    pub mean: Vec<f64>,
}

impl PiStats {
    pub fn zeros(dim: usize) -> Self {
        Self { mean: vec![0.0; 2 * dim + 2] }
    }

    pub fn mean_y(&self) -> f64 {
        self.mean[(self.mean.len() - 2) / 2]
    }
}

/// Declared Lipschitz / growth constants, honored on the probe domain
/// `|x_i| ≤ PROBE_RADIUS`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Declared {
    pub drift_x: f64,
    pub drift_mu: f64,
    pub diffusion_x: f64,
    pub diffusion_mu: f64,
    pub jump_x: f64,
    pub jump_mu: f64,
    pub jump_growth: f64,
    pub weight_growth: f64,
    pub driver_x: f64,
    pub driver_y: f64,
    pub driver_z: f64,
    pub driver_h: f64,
    pub driver_law: f64,
    pub terminal_x: f64,
    pub terminal_mu: f64,
}

pub const PROBE_RADIUS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub registry_name: String,
    pub params: Params,
    pub dim: usize,
    pub drift: Drift,
    pub diffusion: Diffusion,
    pub jump: Jump,
    pub driver: Driver,
    pub terminal: Terminal,
    /// `l(e) = weight_scale·clip(e)`.
    pub weight_scale: f64,
}

const KEYS: [&str; 27] = [
    "dim",
    "drift.constant",
    "drift.linear",
    "drift.law_mean",
    "drift.sine",
    "diffusion.constant",
    "diffusion.sine",
    "diffusion.law_sine",
    "jump.constant",
    "jump.sine",
    "jump.law_sine",
    "driver.constant",
    "driver.x",
    "driver.y",
    "driver.z",
    "driver.h",
    "driver.law_mean_y",
    "driver.sine",
    "terminal.constant",
    "terminal.linear",
    "terminal.quadratic",
    "terminal.law_mean",
    "terminal.sine",
    "weight.scale",
    // family shorthands handled below
    "s",
    "jump",
    "c",
];

fn family_keys(name: &str) -> &'static [&'static str] {
    match name {
        "constant_drift" => &["b0"],
        "mean_reverting_to_law_mean" => &["kappa"],
        "linear_terminal_plus_law_mean" => &["b0"],
        "bsde_law_mean_driver" => &["k"],
        _ => &[],
    }
}

/// Instantiate a built-in family. `params` holds family shorthands (e.g. `b0`,
/// `kappa`, `s`, `jump`, `c`, `k`) and/or dotted overrides such as
/// `terminal.linear`, applied after the family defaults.
pub fn registry_instantiate(name: &str, params: &Params) -> Result<CoefficientSet> {
    if !FAMILIES.contains(&name) {
        return Err(Error::UnknownRegistryName(name.to_string()));
    }
    for k in params.keys() {
        if !KEYS.contains(&k.as_str()) && !family_keys(name).contains(&k.as_str()) {
            return Err(Error::ParameterOutOfRange {
                name: k.clone(),
                reason: format!("not a parameter of family `{name}`"),
            });
        }
    }
    for (k, v) in params {
        if !v.is_finite() {
            return Err(Error::ParameterOutOfRange { name: k.clone(), reason: "must be finite".into() });
        }
    }
    let get = |k: &str, default: f64| params.get(k).copied().unwrap_or(default);
    let dim_f = get("dim", 1.0);
    if dim_f < 1.0 || dim_f.fract() != 0.0 || dim_f > 64.0 {
        return Err(Error::ParameterOutOfRange { name: "dim".into(), reason: "integer in 1..=64".into() });
    }
    let s = get("s", 0.0);
    let jump = get("jump", 0.0);
    let c = get("c", 0.0);
    let mut set = CoefficientSet {
        registry_name: name.to_string(),
        params: params.clone(),
        dim: dim_f as usize,
        drift: Drift::default(),
        diffusion: Diffusion { constant: s, ..Default::default() },
        jump: Jump { constant: jump, ..Default::default() },
        driver: Driver::default(),
        terminal: Terminal { constant: c, ..Default::default() },
        weight_scale: 1.0,
    };
    match name {
        "zero" => set.weight_scale = 0.0,
        "constant_drift" => {
            set.drift.constant = get("b0", 1.0);
            set.terminal.linear = 1.0;
        }
        "mean_reverting_to_law_mean" => {
            let kappa = get("kappa", 1.0);
            if kappa < 0.0 {
                return Err(Error::ParameterOutOfRange { name: "kappa".into(), reason: "must be >= 0".into() });
            }
            set.drift.linear = -kappa;
            set.drift.law_mean = kappa;
            set.terminal.linear = 1.0;
        }
        "linear_terminal_plus_law_mean" => {
            set.drift.constant = get("b0", 0.0);
            set.diffusion.constant = get("s", 0.3);
            set.terminal.linear = 1.0;
            set.terminal.law_mean = 1.0;
        }
        "bsde_law_mean_driver" => {
            set.driver.law_mean_y = get("k", 1.0);
            set.terminal.constant = get("c", 1.0);
        }
        "quadratic_terminal" => {
            set.terminal.quadratic = 1.0;
        }
        "jump_only_compensated" => {
            set.jump.constant = get("jump", 1.0);
            set.terminal.linear = 1.0;
        }
        _ => unreachable!(),
    }
    for (k, v) in params {
        let v = *v;
        match k.as_str() {
            "drift.constant" => set.drift.constant = v,
            "drift.linear" => set.drift.linear = v,
            "drift.law_mean" => set.drift.law_mean = v,
            "drift.sine" => set.drift.sine = v,
            "diffusion.constant" => set.diffusion.constant = v,
            "diffusion.sine" => set.diffusion.sine = v,
            "diffusion.law_sine" => set.diffusion.law_sine = v,
            "jump.constant" => set.jump.constant = v,
            "jump.sine" => set.jump.sine = v,
            "jump.law_sine" => set.jump.law_sine = v,
            "driver.constant" => set.driver.constant = v,
            "driver.x" => set.driver.x = v,
            "driver.y" => set.driver.y = v,
            "driver.z" => set.driver.z = v,
            "driver.h" => set.driver.h = v,
            "driver.law_mean_y" => set.driver.law_mean_y = v,
            "driver.sine" => set.driver.sine = v,
            "terminal.constant" => set.terminal.constant = v,
            "terminal.linear" => set.terminal.linear = v,
            "terminal.quadratic" => set.terminal.quadratic = v,
            "terminal.law_mean" => set.terminal.law_mean = v,
            "terminal.sine" => set.terminal.sine = v,
            "weight.scale" => set.weight_scale = v,
            _ => {}
        }
    }
    if set.diffusion.constant < 0.0 {
        return Err(Error::ParameterOutOfRange {
            name: "diffusion scale".into(),
            reason: "must be >= 0".into(),
        });
    }
    Ok(set)
}

impl CoefficientSet {
    pub fn instantiate(name: &str, params: &[(&str, f64)]) -> Result<Self> {
        let p: Params = params.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        registry_instantiate(name, &p)
    }

    /// True when the law enters neither `b`, `σ` nor `β`.
    pub fn forward_law_free(&self) -> bool {
        self.drift.law_mean == 0.0 && self.diffusion.law_sine == 0.0 && self.jump.law_sine == 0.0
    }

    pub fn has_jumps(&self) -> bool {
        self.jump.constant != 0.0 || self.jump.sine != 0.0 || self.jump.law_sine != 0.0
    }

    // --- forward coefficients, component i ---

    pub fn b(&self, x: f64, m: f64) -> f64 {
        let d = &self.drift;
        d.constant + d.linear * x + d.law_mean * m + d.sine * x.sin()
    }

    pub fn sigma(&self, x: f64, m: f64) -> f64 {
        let s = &self.diffusion;
        s.constant + s.sine * x.sin() + s.law_sine * m.sin()
    }

    pub fn beta(&self, x: f64, m: f64, e: f64) -> f64 {
        let j = &self.jump;
        clip(e) * (j.constant + j.sine * x.sin() + j.law_sine * m.sin())
    }

    pub fn db_dx(&self, x: f64) -> f64 {
        self.drift.linear + self.drift.sine * x.cos()
    }

    pub fn dsigma_dx(&self, x: f64) -> f64 {
        self.diffusion.sine * x.cos()
    }

    pub fn dbeta_dx(&self, x: f64, e: f64) -> f64 {
        clip(e) * self.jump.sine * x.cos()
    }

    /// `(∂_μ b_i)_i`; the other components vanish and there is no dependence on the sample variable.
    pub fn db_dmu(&self, _m: f64) -> f64 {
        self.drift.law_mean
    }

    pub fn dsigma_dmu(&self, m: f64) -> f64 {
        self.diffusion.law_sine * m.cos()
    }

    pub fn dbeta_dmu(&self, m: f64, e: f64) -> f64 {
        clip(e) * self.jump.law_sine * m.cos()
    }

    /// Vector drift `b(x, μ)`.
    pub fn drift_vec(&self, x: &[f64], law: &MeasureStats) -> Vec<f64> {
        x.iter().zip(&law.mean).map(|(xi, mi)| self.b(*xi, *mi)).collect()
    }

    /// Full `σ(x, μ)` matrix (row-major, diagonal).
    pub fn diffusion_matrix(&self, x: &[f64], law: &MeasureStats) -> Vec<f64> {
        let d = x.len();
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            out[i * d + i] = self.sigma(x[i], law.mean[i]);
        }
        out
    }

    pub fn jump_vec(&self, x: &[f64], law: &MeasureStats, e: f64) -> Vec<f64> {
        x.iter().zip(&law.mean).map(|(xi, mi)| self.beta(*xi, *mi, e)).collect()
    }

    pub fn l(&self, e: f64) -> f64 {
        self.weight_scale * clip(e)
    }

    // --- backward coefficients ---

    pub fn f(&self, x: &[f64], y: f64, z: &[f64], h: f64, law: &PiStats) -> f64 {
        let d = &self.driver;
        let sx: f64 = x.iter().sum();
        let sz: f64 = z.iter().sum();
        d.constant + d.x * sx + d.y * y + d.z * sz + d.h * h + d.law_mean_y * law.mean_y()
            + d.sine * (sx + y).sin()
    }

    /// `(∂_{x_i} f, ∂_y f, ∂_{z_i} f, ∂_h f)`; the x- and z-parts are equal across components.
    pub fn df(&self, x: &[f64], y: f64) -> (f64, f64, f64, f64) {
        let d = &self.driver;
        let c = d.sine * (x.iter().sum::<f64>() + y).cos();
        (d.x + c, d.y + c, d.z, d.h)
    }

    pub fn phi(&self, x: &[f64], law: &MeasureStats) -> f64 {
        let t = &self.terminal;
        let sx: f64 = x.iter().sum();
        let q: f64 = x.iter().map(|v| v * v).sum();
        let sm: f64 = law.mean.iter().sum();
        t.constant + t.linear * sx + t.quadratic * q + t.law_mean * sm + t.sine * sx.sin()
    }

    pub fn dphi_dx(&self, x: &[f64]) -> Vec<f64> {
        let t = &self.terminal;
        let c = t.sine * x.iter().sum::<f64>().cos();
        x.iter().map(|xi| t.linear + 2.0 * t.quadratic * xi + c).collect()
    }

    /// `∂_μ Φ(x, μ)(y)`, constant in `y`.
    pub fn dphi_dmu(&self) -> Vec<f64> {
        vec![self.terminal.law_mean; self.dim]
    }

    pub fn declared(&self) -> Declared {
        let sd = (self.dim as f64).sqrt();
        let b = &self.drift;
        let s = &self.diffusion;
        let j = &self.jump;
        let f = &self.driver;
        let t = &self.terminal;
        let r = PROBE_RADIUS;
        Declared {
            drift_x: b.linear.abs() + b.sine.abs(),
            drift_mu: b.law_mean.abs(),
            diffusion_x: s.sine.abs(),
            diffusion_mu: s.law_sine.abs(),
            jump_x: j.sine.abs(),
            jump_mu: j.law_sine.abs(),
            jump_growth: sd * (j.constant.abs() + j.sine.abs() + j.law_sine.abs()),
            weight_growth: self.weight_scale.abs(),
            driver_x: sd * (f.x.abs() + f.sine.abs()),
            driver_y: f.y.abs() + f.sine.abs(),
            driver_z: sd * f.z.abs(),
            driver_h: f.h.abs(),
            driver_law: f.law_mean_y.abs(),
            terminal_x: sd * (t.linear.abs() + t.sine.abs()) + 2.0 * t.quadratic.abs() * r * sd,
            terminal_mu: sd * t.law_mean.abs(),
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Probe random point pairs and compare observed difference quotients with the
/// declared constants. The report estimate is the worst normalized ratio
/// (observed / declared, bound 1); raw worst ratios are returned alongside.
pub fn validate_coefficients_detailed(
    c: &CoefficientSet,
    probe_count: usize,
    rng_seed: u64,
) -> Result<(StatCheckReport, BTreeMap<String, f64>)> {
    if probe_count < 2 {
        return Err(Error::InvalidArgument("probe_count must be >= 2".into()));
    }
    let d = c.dim;
    let decl = c.declared();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let r = PROBE_RADIUS;
    let point = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..d).map(|_| rng.random_range(-r..r)).collect() };
    let mut raw: BTreeMap<String, f64> = BTreeMap::new();
    let bump = |raw: &mut BTreeMap<String, f64>, key: &str, num: f64, den: f64| {
        let ratio = if den > 0.0 { num / den } else { 0.0 };
        let e = raw.entry(key.to_string()).or_insert(0.0);
        if ratio > *e {
            *e = ratio;
        }
    };
    let cloud_size = 8;
    for _ in 0..probe_count {
        let x1 = point(&mut rng);
        let x2 = point(&mut rng);
        let c1 = EmpiricalMeasure::uniform(d, (0..cloud_size).flat_map(|_| point(&mut rng)).collect())?;
        let c2 = EmpiricalMeasure::uniform(d, (0..cloud_size).flat_map(|_| point(&mut rng)).collect())?;
        let (m1, m2) = (c1.stats(), c2.stats());
        let dx = diff_norm(&x1, &x2);
        let dw = w2(&c1, &c2)?.distance;
        let e = {
            let v: f64 = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) { v } else { -v }
        };

        bump(&mut raw, "drift_x", diff_norm(&c.drift_vec(&x1, &m1), &c.drift_vec(&x2, &m1)), dx);
        bump(&mut raw, "drift_mu", diff_norm(&c.drift_vec(&x1, &m1), &c.drift_vec(&x1, &m2)), dw);
        let sig = |x: &[f64], m: &MeasureStats| c.diffusion_matrix(x, m);
        bump(&mut raw, "diffusion_x", diff_norm(&sig(&x1, &m1), &sig(&x2, &m1)), dx);
        bump(&mut raw, "diffusion_mu", diff_norm(&sig(&x1, &m1), &sig(&x1, &m2)), dw);
        let ce = clip(e).abs();
        bump(&mut raw, "jump_x", diff_norm(&c.jump_vec(&x1, &m1, e), &c.jump_vec(&x2, &m1, e)), dx * ce);
        bump(&mut raw, "jump_mu", diff_norm(&c.jump_vec(&x1, &m1, e), &c.jump_vec(&x1, &m2, e)), dw * ce);
        bump(&mut raw, "jump_growth", norm(&c.jump_vec(&x1, &m1, e)), e.abs().min(1.0));
        bump(&mut raw, "weight_growth", c.l(e).abs(), e.abs().min(1.0));

        let y1: f64 = rng.random_range(-r..r);
        let y2: f64 = rng.random_range(-r..r);
        let z1 = point(&mut rng);
        let z2 = point(&mut rng);
        let h1: f64 = rng.random_range(-r..r);
        let h2: f64 = rng.random_range(-r..r);
        let mut p1 = PiStats::zeros(d);
        let mut p2 = PiStats::zeros(d);
        for v in p1.mean.iter_mut().chain(p2.mean.iter_mut()) {
            *v = rng.random_range(-r..r);
        }
        let f0 = c.f(&x1, y1, &z1, h1, &p1);
        bump(&mut raw, "driver_x", (f0 - c.f(&x2, y1, &z1, h1, &p1)).abs(), dx);
        bump(&mut raw, "driver_y", (f0 - c.f(&x1, y2, &z1, h1, &p1)).abs(), (y1 - y2).abs());
        bump(&mut raw, "driver_z", (f0 - c.f(&x1, y1, &z2, h1, &p1)).abs(), diff_norm(&z1, &z2));
        bump(&mut raw, "driver_h", (f0 - c.f(&x1, y1, &z1, h2, &p1)).abs(), (h1 - h2).abs());
        // |mean difference| is a lower bound for W₂ of the Π-laws
        bump(&mut raw, "driver_law", (f0 - c.f(&x1, y1, &z1, h1, &p2)).abs(), diff_norm(&p1.mean, &p2.mean));
        bump(&mut raw, "terminal_x", (c.phi(&x1, &m1) - c.phi(&x2, &m1)).abs(), dx);
        bump(&mut raw, "terminal_mu", (c.phi(&x1, &m1) - c.phi(&x1, &m2)).abs(), dw);
    }
    let declared: BTreeMap<&str, f64> = [
        ("drift_x", decl.drift_x),
        ("drift_mu", decl.drift_mu),
        ("diffusion_x", decl.diffusion_x),
        ("diffusion_mu", decl.diffusion_mu),
        ("jump_x", decl.jump_x),
        ("jump_mu", decl.jump_mu),
        ("jump_growth", decl.jump_growth),
        ("weight_growth", decl.weight_growth),
        ("driver_x", decl.driver_x),
        ("driver_y", decl.driver_y),
        ("driver_z", decl.driver_z),
        ("driver_h", decl.driver_h),
        ("driver_law", decl.driver_law),
        ("terminal_x", decl.terminal_x),
        ("terminal_mu", decl.terminal_mu),
    ]
    .into_iter()
    .collect();
    let mut worst = 0.0f64;
    let mut worst_key = "none";
    for (k, obs) in &raw {
        let dcl = declared[k.as_str()];
        // rounding slack relative to the declared constant
        let norm = if dcl > 0.0 {
            obs / (dcl * (1.0 + 1e-12))
        } else if *obs > 1e-14 {
            f64::INFINITY
        } else {
            0.0
        };
        if norm > worst {
            worst = norm;
            worst_key = declared.keys().find(|kk| **kk == k.as_str()).copied().unwrap_or("none");
        }
    }
    let samples = probe_count as u64;
    let mut rep = StatCheckReport::upper_bound(
        &format!("validate_coefficients/{}", c.registry_name),
        worst,
        0.0,
        1.0,
        3.0,
        0.0,
        samples,
    );
    rep.note(&format!("worst={worst_key}"));
    for (k, v) in &raw {
        rep.note(&format!("{k}={v:.6e}"));
    }
    Ok((rep, raw))
}

pub fn validate_coefficients(c: &CoefficientSet, probe_count: usize, rng_seed: u64) -> Result<StatCheckReport> {
    Ok(validate_coefficients_detailed(c, probe_count, rng_seed)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(name: &str, p: &[(&str, f64)]) -> CoefficientSet {
        CoefficientSet::instantiate(name, p).unwrap()
    }

    #[test]
    fn registry_examples() {
        let z = inst("zero", &[]);
        let m = MeasureStats { mean: vec![0.7] };
        assert_eq!(z.b(1.3, 0.7), 0.0);
        assert_eq!(z.sigma(1.3, 0.7), 0.0);
        assert_eq!(z.beta(1.3, 0.7, 0.5), 0.0);
        assert_eq!(z.phi(&[1.3], &m), 0.0);
        assert_eq!(z.f(&[1.0], 2.0, &[3.0], 4.0, &PiStats::zeros(1)), 0.0);

        let c = inst("constant_drift", &[("b0", 1.0)]);
        assert_eq!(c.b(-5.0, 2.0), 1.0);
        assert_eq!(c.sigma(-5.0, 2.0), 0.0);
        assert_eq!(c.phi(&[2.5], &m), 2.5);

        let r = inst("mean_reverting_to_law_mean", &[("kappa", 1.0)]);
        assert!((r.b(2.0, 0.5) - (-(2.0 - 0.5))).abs() < 1e-15);
        assert!(!r.has_jumps());
    }

    #[test]
    fn registry_errors() {
        assert!(matches!(registry_instantiate("nope", &Params::new()), Err(Error::UnknownRegistryName(_))));
        assert!(matches!(
            CoefficientSet::instantiate("constant_drift", &[("s", -0.1)]),
            Err(Error::ParameterOutOfRange { .. })
        ));
        assert!(CoefficientSet::instantiate("zero", &[("kappa", 1.0)]).is_err());
        assert!(CoefficientSet::instantiate("mean_reverting_to_law_mean", &[("kappa", -1.0)]).is_err());
    }

    #[test]
    fn deterministic_instantiation() {
        let a = inst("quadratic_terminal", &[("s", 0.2), ("terminal.sine", 0.3)]);
        let b = inst("quadratic_terminal", &[("s", 0.2), ("terminal.sine", 0.3)]);
        assert_eq!(a, b);
    }

    #[test]
    fn validation_examples() {
        let (rep, raw) = validate_coefficients_detailed(&inst("zero", &[]), 50, 1).unwrap();
        assert!(rep.passed());
        assert_eq!(rep.estimate, 0.0);
        let (rep, raw_c) = validate_coefficients_detailed(&inst("constant_drift", &[]), 50, 1).unwrap();
        assert!(rep.passed());
        assert_eq!(raw_c["drift_x"], 0.0);
        let (rep, raw_r) =
            validate_coefficients_detailed(&inst("mean_reverting_to_law_mean", &[("kappa", 1.0)]), 50, 1).unwrap();
        assert!(rep.passed());
        assert!((raw_r["drift_x"] - 1.0).abs() < 1e-12, "{}", raw_r["drift_x"]);
        assert!(raw.values().all(|v| *v == 0.0));
    }

    #[test]
    fn every_family_validates_with_defaults() {
        for name in FAMILIES {
            let rep = validate_coefficients(&inst(name, &[]), 200, 7).unwrap();
            assert!(rep.passed(), "{name}: {rep}");
        }
        let rich = inst(
            "quadratic_terminal",
            &[
                ("dim", 2.0),
                ("drift.sine", 0.4),
                ("diffusion.sine", 0.2),
                ("diffusion.law_sine", 0.1),
                ("jump.sine", 0.3),
                ("jump.law_sine", 0.2),
                ("driver.sine", 0.5),
                ("terminal.sine", 0.5),
            ],
        );
        assert!(validate_coefficients(&rich, 200, 3).unwrap().passed());
    }

    #[test]
    fn analytic_derivatives_match_differences() {
        let c = inst(
            "quadratic_terminal",
            &[("drift.sine", 0.4), ("diffusion.sine", 0.2), ("jump.sine", 0.3), ("terminal.sine", 0.5)],
        );
        let h = 1e-6;
        for &x in &[-1.3, 0.2, 0.9] {
            let fd = |g: &dyn Fn(f64) -> f64| (g(x + h) - g(x - h)) / (2.0 * h);
            assert!((fd(&|v| c.b(v, 0.1)) - c.db_dx(x)).abs() < 1e-8);
            assert!((fd(&|v| c.sigma(v, 0.1)) - c.dsigma_dx(x)).abs() < 1e-8);
            assert!((fd(&|v| c.beta(v, 0.1, 0.7)) - c.dbeta_dx(x, 0.7)).abs() < 1e-8);
            let m = MeasureStats { mean: vec![0.1] };
            assert!((fd(&|v| c.phi(&[v], &m)) - c.dphi_dx(&[x])[0]).abs() < 1e-7);
        }
    }
}
