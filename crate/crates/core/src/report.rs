use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMode {
    Equality,
    UpperBound,
    ConvergenceOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }
}

/// Outcome of one statistical check.
///
/// Verdict rules, with `k` and `abs_tol` recorded in `notes`:
/// * equality: `|estimate - target| <= k * std_error + abs_tol`
/// * upper bound: `estimate <= bound + k * std_error + abs_tol`
/// * convergence order: `estimate >= target - k * std_error - abs_tol`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatCheckReport {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub target_or_bound: f64,
    pub mode: CheckMode,
    pub verdict: Verdict,
    pub samples_used: u64,
    pub notes: String,
}

impl StatCheckReport {
    fn build(
        name: impl Into<String>,
        mode: CheckMode,
        estimate: f64,
        std_error: f64,
        target: f64,
        k: f64,
        abs_tol: f64,
        samples_used: u64,
    ) -> Self {
        let se = if std_error.is_finite() { std_error.max(0.0) } else { f64::INFINITY };
        let ok = estimate.is_finite()
            && match mode {
                CheckMode::Equality => (estimate - target).abs() <= k * se + abs_tol,
                CheckMode::UpperBound => estimate <= target + k * se + abs_tol,
                CheckMode::ConvergenceOrder => estimate >= target - k * se - abs_tol,
            };
        Self {
            name: name.into(),
            estimate,
            std_error: se,
            target_or_bound: target,
            mode,
            verdict: Verdict::from_bool(ok),
            samples_used,
            notes: format!("k={k}; abs_tol={abs_tol:e}"),
        }
    }

    pub fn equality(
        name: impl Into<String>,
        estimate: f64,
        std_error: f64,
        target: f64,
        k: f64,
        abs_tol: f64,
        samples_used: u64,
    ) -> Self {
        Self::build(name, CheckMode::Equality, estimate, std_error, target, k, abs_tol, samples_used)
    }

    pub fn upper_bound(
        name: impl Into<String>,
        estimate: f64,
        std_error: f64,
        bound: f64,
        k: f64,
        abs_tol: f64,
        samples_used: u64,
    ) -> Self {
        Self::build(name, CheckMode::UpperBound, estimate, std_error, bound, k, abs_tol, samples_used)
    }

    pub fn convergence_order(
        name: impl Into<String>,
        estimate: f64,
        std_error: f64,
        target: f64,
        k: f64,
        abs_tol: f64,
        samples_used: u64,
    ) -> Self {
        Self::build(
            name,
            CheckMode::ConvergenceOrder,
            estimate,
            std_error,
            target,
            k,
            abs_tol,
            samples_used,
        )
    }

    /// Equality check for membership of `estimate` in `[lo, hi]`, widened by `k * std_error`.
    pub fn within_range(
        name: impl Into<String>,
        estimate: f64,
        std_error: f64,
        lo: f64,
        hi: f64,
        k: f64,
        samples_used: u64,
    ) -> Self {
        let mut r = Self::equality(
            name,
            estimate,
            std_error,
            0.5 * (lo + hi),
            k,
            0.5 * (hi - lo),
            samples_used,
        );
        r.note(format!("range=[{lo}, {hi}]"));
        r
    }

    /// Report whose verdict is decided by the caller (e.g. exact identities).
    pub fn with_verdict(
        name: impl Into<String>,
        mode: CheckMode,
        estimate: f64,
        target: f64,
        pass: bool,
        samples_used: u64,
    ) -> Self {
        Self {
            name: name.into(),
            estimate,
            std_error: 0.0,
            target_or_bound: target,
            mode,
            verdict: Verdict::from_bool(pass),
            samples_used,
            notes: String::new(),
        }
    }

    pub fn note(&mut self, text: impl AsRef<str>) -> &mut Self {
        if !self.notes.is_empty() {
            self.notes.push_str("; ");
        }
        self.notes.push_str(text.as_ref());
        self
    }

    pub fn with_note(mut self, text: impl AsRef<str>) -> Self {
        self.note(text);
        self
    }

    /// Forces a failing verdict, keeping the reason in `notes`.
    pub fn fail_because(&mut self, reason: impl AsRef<str>) -> &mut Self {
        self.verdict = Verdict::Fail;
        self.note(format!("FAIL: {}", reason.as_ref()))
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for StatCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: estimate={:.6e} se={:.3e} target={:.6e} ({:?}) n={}",
            match self.verdict {
                Verdict::Pass => "PASS",
                Verdict::Fail => "FAIL",
            },
            self.name,
            self.estimate,
            self.std_error,
            self.target_or_bound,
            self.mode,
            self.samples_used
        )
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_rules() {
        assert!(StatCheckReport::equality("a", 1.0, 0.1, 1.25, 3.0, 0.0, 10).passed());
        assert!(!StatCheckReport::equality("a", 1.0, 0.1, 1.35, 3.0, 0.0, 10).passed());
        assert!(StatCheckReport::upper_bound("b", 1.2, 0.1, 1.0, 3.0, 0.0, 10).passed());
        assert!(!StatCheckReport::upper_bound("b", 1.4, 0.1, 1.0, 3.0, 0.0, 10).passed());
        assert!(StatCheckReport::convergence_order("c", 0.9, 0.05, 1.0, 3.0, 0.0, 10).passed());
        assert!(!StatCheckReport::equality("nan", f64::NAN, 0.1, 0.0, 3.0, 1.0, 1).passed());
        assert!(StatCheckReport::within_range("r", 2.65, 0.02, 1.6, 2.6, 3.0, 1).passed());
        assert!(!StatCheckReport::within_range("r", 2.7, 0.02, 1.6, 2.6, 3.0, 1).passed());
    }

    #[test]
    fn json_schema_is_stable() {
        let r = StatCheckReport::equality("x", 0.5, 0.0, 0.5, 3.0, 1e-12, 4);
        let text = r.to_json();
        let keys = [
            "name",
            "estimate",
            "std_error",
            "target_or_bound",
            "mode",
            "verdict",
            "samples_used",
            "notes",
        ];
        let pos: Vec<usize> = keys.iter().map(|k| text.find(&format!("\"{k}\"")).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["mode"], "equality");
        assert_eq!(v["verdict"], "pass");
        assert!(r.notes.contains("k=3"));
    }

    #[test]
    fn mean_se_basic() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (1.6666666666666667f64 / 4.0).sqrt()).abs() < 1e-15);
    }
}
