use serde::{Deserialize, Serialize};

use crate::backward::RegressionSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub n_particles: usize,
    pub seed: u64,
    pub picard_max_iters: usize,
    /// Stop once the iterate distance drops below `picard_tol · max(1, d₁)`,
    /// with `d₁` the norm of the first iterate.
    pub picard_tol: f64,
    /// Exponential weight of the Picard norm.
    pub beta_weight: f64,
    pub regression: RegressionSpec,
    pub k_sigma: f64,
    pub fd_step_x: f64,
    /// `None` means two grid steps.
    pub fd_step_t: Option<f64>,
    pub fd_step_mu: f64,
    pub rho_nodes: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_particles: 10_000,
            seed: 1,
            picard_max_iters: 20,
            picard_tol: 1e-6,
            beta_weight: 2.0,
            regression: RegressionSpec::default(),
            k_sigma: 3.0,
            fd_step_x: 0.05,
            fd_step_t: None,
            fd_step_mu: 0.05,
            rho_nodes: 8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, reason: &str| {
            Err(Error::ParameterOutOfRange { name: name.into(), reason: reason.into() })
        };
        if self.n_particles < 2 {
            return bad("n_particles", "must be >= 2");
        }
        if self.picard_max_iters < 1 {
            return bad("picard_max_iters", "must be >= 1");
        }
        for (n, v) in [
            ("picard_tol", self.picard_tol),
            ("k_sigma", self.k_sigma),
            ("fd_step_x", self.fd_step_x),
            ("fd_step_mu", self.fd_step_mu),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(n, "must be finite and > 0");
            }
        }
        if let Some(h) = self.fd_step_t {
            if !(h > 0.0 && h.is_finite()) {
                return bad("fd_step_t", "must be finite and > 0");
            }
        }
        if !(self.beta_weight >= 0.0 && self.beta_weight.is_finite()) {
            return bad("beta_weight", "must be >= 0");
        }
        if self.rho_nodes < 2 {
            return bad("rho_nodes", "must be >= 2");
        }
        self.regression.validate()
    }

    pub fn fd_step_t_for(&self, delta: f64) -> f64 {
        self.fd_step_t.unwrap_or(2.0 * delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        SolverConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_fields() {
        let c = SolverConfig { picard_tol: 0.0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = SolverConfig { n_particles: 1, ..Default::default() };
        assert!(c.validate().is_err());
        let c = SolverConfig { picard_max_iters: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = SolverConfig { seed: 42, ..Default::default() };
        let s = toml::to_string(&c).unwrap();
        let back: SolverConfig = toml::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
