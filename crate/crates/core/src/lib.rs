//! Particle-system toolkit for mean-field forward–backward SDEs driven by a
//! Brownian motion and a compensated Poisson random measure.

pub mod backward;
pub mod cli;
pub mod coefficients;
pub mod config;
pub mod error;
pub mod forward;
pub mod grid;
pub mod itocalc;
pub mod measures;
pub mod pde;
pub mod quadrature;
pub mod randomness;
pub mod report;
pub mod suite;

pub use config::SolverConfig;
pub use error::{Error, Result};
pub use grid::TimeGrid;
pub use measures::{EmpiricalMeasure, MeasureStats};
pub use report::{CheckMode, StatCheckReport, Verdict};
