use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time grid on `[t_start, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite()) || t_start < 0.0 || t_start >= t_end {
            return Err(Error::InvalidGrid(format!(
                "need 0 <= t_start < t_end, got [{t_start}, {t_end}]"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be >= 1".into()));
        }
        Ok(Self { t_start, t_end, n_steps })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn delta(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    pub fn horizon(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Node `i`, computed as `t_start + i * delta` (the last node is `t_end` exactly).
    pub fn node(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.t_end
        } else {
            self.t_start + i as f64 * self.delta()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.node(i)).collect()
    }

    /// Index of the step containing `t`, with steps taken as `(t_i, t_{i+1}]`.
    pub fn step_of(&self, t: f64) -> usize {
        let raw = ((t - self.t_start) / self.delta()).ceil() as isize - 1;
        let mut k = raw.clamp(0, self.n_steps as isize - 1) as usize;
        // guard against rounding at node boundaries
        while k > 0 && t <= self.node(k) {
            k -= 1;
        }
        while k + 1 < self.n_steps && t > self.node(k + 1) {
            k += 1;
        }
        k
    }

    /// Grid with `factor` times fewer steps over the same interval.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.n_steps % factor != 0 {
            return Err(Error::InvalidGrid(format!(
                "cannot coarsen {} steps by factor {factor}",
                self.n_steps
            )));
        }
        Self::new(self.t_start, self.t_end, self.n_steps / factor)
    }

    pub fn refine(&self, factor: usize) -> Result<Self> {
        Self::new(self.t_start, self.t_end, self.n_steps * factor.max(1))
    }

    /// Sub-grid starting at node `from`.
    pub fn tail(&self, from: usize) -> Result<Self> {
        if from >= self.n_steps {
            return Err(Error::InvalidGrid(format!(
                "tail start {from} must be < n_steps {}",
                self.n_steps
            )));
        }
        Self::new(self.node(from), self.t_end, self.n_steps - from)
    }

    /// Index of the node equal to `t` (within a relative tolerance), if any.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let x = (t - self.t_start) / self.delta();
        let i = x.round();
        if i < 0.0 || i > self.n_steps as f64 {
            return None;
        }
        ((x - i).abs() < 1e-9).then_some(i as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_grids() {
        assert!(TimeGrid::new(1.0, 1.0, 4).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::new(-0.5, 1.0, 4).is_err());
    }

    #[test]
    fn node_spacing_is_uniform() {
        let g = TimeGrid::new(0.3, 1.7, 37).unwrap();
        let d = g.delta();
        for i in 0..g.n_steps() {
            assert!((g.node(i + 1) - g.node(i) - d).abs() < 8.0 * f64::EPSILON * g.t_end());
        }
        assert_eq!(g.node(37), 1.7);
    }

    #[test]
    fn step_lookup_uses_left_open_steps() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        assert_eq!(g.step_of(0.25), 0);
        assert_eq!(g.step_of(0.2500001), 1);
        assert_eq!(g.step_of(1.0), 3);
        assert_eq!(g.step_of(1e-9), 0);
    }

    #[test]
    fn tail_and_coarsen() {
        let g = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let t = g.tail(2).unwrap();
        assert_eq!(t.n_steps(), 6);
        assert!((t.delta() - g.delta()).abs() < 1e-15);
        assert_eq!(g.coarsen(2).unwrap().n_steps(), 4);
        assert!(g.coarsen(3).is_err());
        assert_eq!(g.node_index(0.25), Some(2));
        assert_eq!(g.node_index(0.3), None);
    }
}
