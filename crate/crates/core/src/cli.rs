//! Configuration-driven runner behind the `mfjump` executable.
//!
//! Every run writes into `<output_dir>/<config-hash-12>-<unix-millis>/`: the
//! effective configuration (`config.toml`, whose SHA-256 is the config hash),
//! one JSON report file per check group, CSV tables, and `manifest.json`
//! listing all of them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backward::checks::{check_apriori_bounds, check_picard_contraction};
use crate::backward::{solve_mkv_bsde, solve_pivot_bsde, Basis};
use crate::coefficients::{registry_instantiate, validate_coefficients, CoefficientSet};
use crate::config::SolverConfig;
use crate::error::{Error, Result};
use crate::forward::checks::{check_flow_property, check_moment_estimates, FlowOptions, MomentOptions};
use crate::forward::{simulate_law_ensemble, simulate_pivot};
use crate::grid::TimeGrid;
use crate::itocalc::{verify_ito, ItoProcessSpec, ItoTestFunction, LadderRow};
use crate::measures::EmpiricalMeasure;
use crate::pde::{check_regularity, check_representation, pde_residual, RegularityProbes, RepresentationOptions, ValueFunctionHandle};
use crate::randomness::{InitialSampler, LevyModel, MarkDistribution};
use crate::report::{mean_and_se, CheckMode, StatCheckReport};
use crate::suite::{run_all, SuiteConfig};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NON_CONVERGENCE: i32 = 3;

/// Worker-count environment variable.
pub const WORKERS_ENV: &str = "MFJ_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default)]
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { t_start: 0.0, t_end: 1.0, steps: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevySection {
    pub rate: f64,
    pub marks: MarkDistribution,
    #[serde(default = "default_quadrature_nodes")]
    pub quadrature_nodes: usize,
}

fn default_quadrature_nodes() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsSection {
    pub family: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl Default for CoefficientsSection {
    fn default() -> Self {
        Self { family: "zero".into(), params: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChecksSection {
    /// Pivot start / probe point.
    pub x: Vec<f64>,
    /// Probe time for the residual.
    pub t: f64,
    /// Cloud for value-function probes; empty means a draw from `[initial]`.
    pub cloud: Vec<f64>,
    pub cloud_size: usize,
    pub functional: String,
    pub process: String,
    pub refinements: usize,
    /// Paths of the Itô ladder (defaults to the solver's particle count).
    pub ito_paths: Option<usize>,
    /// Extra seeds for the multi-seed checks; empty means the run seed only.
    pub seeds: Vec<u64>,
    pub probe_paths: usize,
}

impl Default for ChecksSection {
    fn default() -> Self {
        Self {
            x: vec![0.0],
            t: 0.0,
            cloud: vec![],
            cloud_size: 8,
            functional: "mean".into(),
            process: "drift".into(),
            refinements: 3,
            ito_paths: None,
            seeds: vec![],
            probe_paths: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Where runs go; not part of the serialized (hashed) configuration.
    #[serde(skip_serializing)]
    pub dir: PathBuf,
    pub format: OutputFormat,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs"), format: OutputFormat::Json }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSection {
    pub quick: bool,
}

/// The whole configuration file. `seed` is mandatory and overrides `[solver].seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub levy: Option<LevySection>,
    #[serde(default)]
    pub coefficients: CoefficientsSection,
    #[serde(default = "default_initial")]
    pub initial: InitialSampler,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub checks: ChecksSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub suite: SuiteSection,
}

fn default_initial() -> InitialSampler {
    InitialSampler::Normal { mean: 0.0, std: 1.0 }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.solver.seed = c.seed;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.t_start, self.grid.t_end, self.grid.steps)
    }

    pub fn levy(&self) -> Result<LevyModel> {
        match &self.levy {
            None => Ok(LevyModel::none()),
            Some(l) => LevyModel::new(l.rate, l.marks.clone(), l.quadrature_nodes),
        }
    }

    pub fn coefficients(&self) -> Result<CoefficientSet> {
        registry_instantiate(&self.coefficients.family, &self.coefficients.params)
    }

    /// Everything that can be checked without running anything.
    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.levy()?;
        let c = self.coefficients()?;
        self.solver.validate()?;
        if self.checks.x.len() != c.dim {
            return Err(Error::Config(format!("[checks].x has {} entries, the family has dim {}", self.checks.x.len(), c.dim)));
        }
        if !self.checks.cloud.is_empty() && self.checks.cloud.len() % c.dim != 0 {
            return Err(Error::Config("[checks].cloud length must be a multiple of dim".into()));
        }
        Ok(())
    }

    fn seeds(&self) -> Vec<u64> {
        if self.checks.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.checks.seeds.clone()
        }
    }

    fn cloud(&self, dim: usize) -> Result<EmpiricalMeasure> {
        if self.checks.cloud.is_empty() {
            let pts = crate::forward::sample_initial(&self.initial, dim, self.checks.cloud_size.max(1), self.seed);
            EmpiricalMeasure::uniform(dim, pts)
        } else {
            EmpiricalMeasure::uniform(dim, self.checks.cloud.clone())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BasisArg {
    Polynomial,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    SimulateForward,
    SolveBsde,
    CheckIto,
    PdeResidual,
    CheckRepresentation,
    CheckFlow,
    CheckEstimates,
    CheckRegularity,
    FullSuite,
}

#[derive(Debug, Clone, Parser)]
#[command(name = "mfjump", version, about = "Mean-field FBSDE-with-jumps toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub picard_tol: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub basis: Option<BasisArg>,
    /// Polynomial degree, or cells per axis for the local basis.
    #[arg(long, global = true)]
    pub degree: Option<usize>,
    #[arg(long, global = true)]
    pub ridge: Option<f64>,
    #[arg(long, global = true)]
    pub dump_paths: bool,
    #[arg(long, global = true)]
    pub functional: Option<String>,
    #[arg(long, global = true)]
    pub process: Option<String>,
    #[arg(long, global = true)]
    pub refinements: Option<usize>,
}

impl Cli {
    /// Applies the command-line overrides to `cfg`.
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.solver.seed = s;
        }
        if let Some(t) = self.picard_tol {
            cfg.solver.picard_tol = t;
        }
        if let Some(d) = &self.output_dir {
            cfg.output.dir = d.clone();
        }
        let r = &mut cfg.solver.regression;
        match (self.basis, self.degree) {
            (Some(BasisArg::Polynomial), d) => r.basis = Basis::Polynomial { degree: d.unwrap_or(2) },
            (Some(BasisArg::Local), d) => r.basis = Basis::LocalPartition { bins: d.unwrap_or(8) },
            (None, Some(d)) => match &mut r.basis {
                Basis::Polynomial { degree } => *degree = d,
                Basis::LocalPartition { bins } => *bins = d,
            },
            (None, None) => {}
        }
        if let Some(x) = self.ridge {
            r.ridge = x;
        }
        if let Some(f) = &self.functional {
            cfg.checks.functional = f.clone();
        }
        if let Some(p) = &self.process {
            cfg.checks.process = p.clone();
        }
        if let Some(n) = self.refinements {
            cfg.checks.refinements = n;
        }
    }
}

/// One plot-ready table row: `(Δ, M, estimate, SE, error)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub delta: f64,
    pub m: usize,
    pub estimate: f64,
    pub se: f64,
    pub error: f64,
}

impl From<&LadderRow> for ConvergenceRow {
    fn from(r: &LadderRow) -> Self {
        Self { delta: r.delta, m: r.m, estimate: r.bias, se: r.se, error: r.mean_abs_err }
    }
}

/// CSV with columns `delta,m,estimate,se,error,order`, where the order on row
/// `k + 1` is `log₂(error_k / error_{k+1})`; the first row's order is empty.
pub fn emit_convergence_table(rows: &[ConvergenceRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["delta", "m", "estimate", "se", "error", "order"]).expect("in-memory write");
    for (k, r) in rows.iter().enumerate() {
        let order = if k == 0 { String::new() } else { format!("{}", (rows[k - 1].error / r.error).log2()) };
        w.write_record([
            format!("{}", r.delta),
            r.m.to_string(),
            format!("{}", r.estimate),
            format!("{}", r.se),
            format!("{}", r.error),
            order,
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub toolkit_version: String,
    pub seed: u64,
    pub command: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub files: Vec<String>,
    pub exit_code: i32,
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

pub fn config_hash(serialized: &str) -> String {
    Sha256::digest(serialized.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Run directory and the files written into it so far.
pub struct RunDir {
    pub path: PathBuf,
    pub files: Vec<String>,
    format: OutputFormat,
}

impl RunDir {
    pub fn create(root: &Path, hash: &str, started: u128, format: OutputFormat) -> Result<Self> {
        let mut path = root.join(format!("{}-{started}", &hash[..12]));
        let mut k = 1;
        while path.exists() {
            path = root.join(format!("{}-{started}-{k}", &hash[..12]));
            k += 1;
        }
        fs::create_dir_all(&path)?;
        Ok(Self { path, files: vec![], format })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.path.join(name), bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Reports in the configured format.
    pub fn write_reports(&mut self, stem: &str, reports: &[StatCheckReport]) -> Result<()> {
        match self.format {
            OutputFormat::Json => {
                let body = serde_json::to_string_pretty(reports)?;
                self.write(&format!("{stem}.json"), (body + "\n").as_bytes())
            }
            OutputFormat::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                for r in reports {
                    w.serialize(r)?;
                }
                let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
                self.write(&format!("{stem}.csv"), &bytes)
            }
        }
    }
}

/// Outcome of one subcommand: reports grouped by file stem, extra tables.
#[derive(Default)]
struct Outcome {
    groups: Vec<(String, Vec<StatCheckReport>)>,
    tables: Vec<(String, Vec<u8>)>,
    non_convergence: bool,
}

impl Outcome {
    fn all_passed(&self) -> bool {
        self.groups.iter().all(|(_, rs)| rs.iter().all(|r| r.passed()))
    }
}

fn failure_report(name: &str, e: &Error) -> StatCheckReport {
    let mut r = StatCheckReport::with_verdict(name, CheckMode::Equality, f64::NAN, 0.0, false, 0);
    r.fail_because(e.to_string());
    r
}

/// Installs the global worker pool from [`WORKERS_ENV`] (ignored when unset or invalid).
pub fn init_workers() {
    if let Some(n) = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_PASS };
        }
    };
    let mut cfg = match &cli.config {
        Some(p) => match ExperimentConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("configuration error: {e}");
                return EXIT_CONFIG;
            }
        },
        None => {
            eprintln!("configuration error: --config <file> is required");
            return EXIT_CONFIG;
        }
    };
    cli.apply(&mut cfg);
    if cli.command != Command::FullSuite {
        if let Err(e) = cfg.validate() {
            eprintln!("configuration error: {e}");
            return EXIT_CONFIG;
        }
    }
    match execute(cli.command, &cfg, cli.dump_paths) {
        Ok((code, dir)) => {
            println!("{}", dir.display());
            code
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::UnknownRegistryName(_) | Error::ParameterOutOfRange { .. } => EXIT_CONFIG,
                _ => EXIT_CHECK_FAILED,
            }
        }
    }
}

fn command_name(c: Command) -> &'static str {
    match c {
        Command::SimulateForward => "simulate-forward",
        Command::SolveBsde => "solve-bsde",
        Command::CheckIto => "check-ito",
        Command::PdeResidual => "pde-residual",
        Command::CheckRepresentation => "check-representation",
        Command::CheckFlow => "check-flow",
        Command::CheckEstimates => "check-estimates",
        Command::CheckRegularity => "check-regularity",
        Command::FullSuite => "full-suite",
    }
}

/// Runs `command` under `cfg`, writing the run directory; returns the exit code and the directory.
pub fn execute(command: Command, cfg: &ExperimentConfig, dump_paths: bool) -> Result<(i32, PathBuf)> {
    let started = unix_ms();
    let serialized = cfg.to_toml();
    let hash = config_hash(&serialized);
    let mut dir = RunDir::create(&cfg.output.dir, &hash, started, cfg.output.format)?;
    dir.write("config.toml", serialized.as_bytes())?;

    let name = command_name(command);
    let outcome = match dispatch(command, cfg, dump_paths) {
        Ok(o) => o,
        Err(e) => {
            let non_convergence = matches!(e, Error::PicardNotConverged { .. });
            if !non_convergence && matches!(e, Error::Config(_) | Error::UnknownRegistryName(_)) {
                return Err(e);
            }
            Outcome { groups: vec![(name.replace('-', "_"), vec![failure_report(name, &e)])], tables: vec![], non_convergence }
        }
    };
    for (stem, reports) in &outcome.groups {
        dir.write_reports(stem, reports)?;
    }
    for (file, bytes) in &outcome.tables {
        dir.write(file, bytes)?;
    }
    let code = if outcome.non_convergence {
        EXIT_NON_CONVERGENCE
    } else if outcome.all_passed() {
        EXIT_PASS
    } else {
        EXIT_CHECK_FAILED
    };
    let mut files = dir.files.clone();
    files.push("manifest.json".into());
    let manifest = RunManifest {
        config_hash: hash,
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        command: name.into(),
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
        files,
        exit_code: code,
    };
    dir.write("manifest.json", serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok((code, dir.path))
}

fn dispatch(command: Command, cfg: &ExperimentConfig, dump_paths: bool) -> Result<Outcome> {
    if command == Command::FullSuite {
        return full_suite(cfg);
    }
    let c = cfg.coefficients()?;
    let levy = cfg.levy()?;
    let grid = cfg.grid()?;
    let s = &cfg.solver;
    let m = s.n_particles;
    let mut out = Outcome::default();
    match command {
        Command::SimulateForward => {
            let mut reports = vec![validate_coefficients(&c, 64, cfg.seed)?];
            let e = simulate_law_ensemble(&c, &cfg.initial, &grid, m, &levy, cfg.seed)?;
            let pv = simulate_pivot(&c, &cfg.checks.x, &e, m, &levy, cfg.seed)?;
            for (label, paths) in [("law", &e.law), ("pivot", &pv.paths)] {
                let col: Vec<f64> = paths.terminal().chunks(c.dim).map(|r| r[0]).collect();
                let (mean, se) = mean_and_se(&col);
                let mut r = StatCheckReport::with_verdict(
                    format!("forward_terminal_mean/{label}"),
                    CheckMode::Equality,
                    mean,
                    mean,
                    mean.is_finite(),
                    paths.m as u64,
                );
                r.std_error = se;
                r.note("first coordinate of X_T; finite-state check");
                reports.push(r);
            }
            out.groups.push(("simulate_forward".into(), reports));
            if dump_paths {
                out.tables.push(("law_paths.csv".into(), paths_csv(&e.law)?));
                out.tables.push(("pivot_paths.csv".into(), paths_csv(&pv.paths)?));
            }
        }
        Command::SolveBsde => {
            let e = simulate_law_ensemble(&c, &cfg.initial, &grid, m, &levy, cfg.seed)?;
            let (law_sol, cloud) = solve_mkv_bsde(&c, &e, &levy, &s.regression, s)?;
            let pv = simulate_pivot(&c, &cfg.checks.x, &e, m, &levy, cfg.seed)?;
            let sol = solve_pivot_bsde(&c, &pv, &cloud, &levy, &s.regression, s)?;
            let (y0, se) = sol.y0();
            let mut r = StatCheckReport::with_verdict("bsde_y0", CheckMode::Equality, y0, y0, y0.is_finite(), m as u64);
            r.std_error = se;
            r.note(format!("x={:?}; regression spread of Y_0={:e}", cfg.checks.x, sol.y0_spread()));
            let mut reports = vec![r, check_picard_contraction(&law_sol.picard_history, 1.0)];
            reports.extend(check_apriori_bounds(&sol, &c, s));
            out.groups.push(("solve_bsde".into(), reports));
            if dump_paths {
                let tmp = std::env::temp_dir().join(format!("mfjump-solution-{}.csv", std::process::id()));
                sol.write_csv(&tmp)?;
                let bytes = fs::read(&tmp)?;
                let _ = fs::remove_file(&tmp);
                out.tables.push(("pivot_solution.csv".into(), bytes));
            }
        }
        Command::CheckIto => {
            let f = ItoTestFunction::registry(&cfg.checks.functional, c.dim)?;
            let p = ItoProcessSpec::registry(&cfg.checks.process)?;
            let paths = cfg.checks.ito_paths.unwrap_or(m);
            let o = verify_ito(&f, &p, &grid, paths, &levy, cfg.seed, cfg.checks.refinements, s.rho_nodes, s.k_sigma)?;
            let rows: Vec<ConvergenceRow> = o.ladder.iter().map(ConvergenceRow::from).collect();
            out.tables.push(("ito_ladder.csv".into(), emit_convergence_table(&rows).into_bytes()));
            out.groups.push(("check_ito".into(), vec![o.report]));
        }
        Command::PdeResidual => {
            let h = ValueFunctionHandle::new(&c, &levy, grid, s)?;
            let r = pde_residual(&h, cfg.checks.t, &cfg.checks.x, &cfg.cloud(c.dim)?)?;
            let mut rep = StatCheckReport::with_verdict(
                "pde_residual",
                CheckMode::UpperBound,
                r.residual.abs(),
                r.budget,
                r.within_budget(),
                m as u64,
            );
            rep.std_error = r.std_error;
            rep.note(format!("t={}; x={:?}; V={:e}", r.t, r.x, r.bundle.v));
            for t in &r.terms {
                rep.note(format!("{}: value={:e} se={:e} bias={:e}", t.term, t.value, t.std_error, t.bias));
            }
            out.groups.push(("pde_residual".into(), vec![rep]));
            out.tables.push(("pde_bundle.json".into(), serde_json::to_string_pretty(&r.bundle)?.into_bytes()));
        }
        Command::CheckRepresentation => {
            let opts = RepresentationOptions {
                initial: cfg.initial.clone(),
                x0: cfg.checks.x.clone(),
                probe_paths: cfg.checks.probe_paths,
            };
            out.groups.push(("check_representation".into(), check_representation(&c, &levy, grid, s, &opts, &cfg.seeds())?));
        }
        Command::CheckFlow => {
            let opts = FlowOptions {
                xi: cfg.initial.clone(),
                x: cfg.checks.x.clone(),
                m,
                levy: levy.clone(),
                seed: cfg.seed,
                c_declared: f64::INFINITY,
                k_sigma: s.k_sigma,
            };
            let mut reports = Vec::new();
            let mut rows = Vec::new();
            for k in 0..cfg.checks.refinements.max(1) {
                let g = grid.refine(1 << k)?;
                let o = check_flow_property(&c, &g, g.n_steps() / 2, &opts)?;
                rows.push(ConvergenceRow { delta: o.delta, m, estimate: o.discrepancy / o.delta, se: 0.0, error: o.discrepancy });
                reports.push(o.report);
            }
            out.tables.push(("flow_ladder.csv".into(), emit_convergence_table(&rows).into_bytes()));
            out.groups.push(("check_flow".into(), reports));
        }
        Command::CheckEstimates => {
            let o = MomentOptions {
                xi: cfg.initial.clone(),
                xi_hat: shifted_sampler(&cfg.initial, 0.25),
                x: cfg.checks.x.clone(),
                x_hat: cfg.checks.x.iter().map(|v| v + 0.25).collect(),
                m,
                h: 0.1 * grid.horizon(),
                window_steps: 32,
                levy: levy.clone(),
                seed: cfg.seed,
                k_sigma: s.k_sigma,
                stability: 0.25,
            };
            let mut reports = check_moment_estimates(&c, &grid, &o)?;
            let e = simulate_law_ensemble(&c, &cfg.initial, &grid, m, &levy, cfg.seed)?;
            let (_, cloud) = solve_mkv_bsde(&c, &e, &levy, &s.regression, s)?;
            let pv = simulate_pivot(&c, &cfg.checks.x, &e, m, &levy, cfg.seed)?;
            let sol = solve_pivot_bsde(&c, &pv, &cloud, &levy, &s.regression, s)?;
            reports.extend(check_apriori_bounds(&sol, &c, s));
            out.groups.push(("check_estimates".into(), reports));
        }
        Command::CheckRegularity => {
            let mut probes = RegularityProbes::standard(cfg.cloud(c.dim)?, grid.horizon());
            probes.steps = grid.n_steps();
            probes.xs = vec![cfg.checks.x.clone()];
            out.groups.push(("check_regularity".into(), check_regularity(&c, &levy, s, &probes, &cfg.seeds())?));
        }
        Command::FullSuite => unreachable!(),
    }
    Ok(out)
}

fn shifted_sampler(xi: &InitialSampler, by: f64) -> InitialSampler {
    match xi.clone() {
        InitialSampler::Point { value } => InitialSampler::Point { value: value + by },
        InitialSampler::Normal { mean, std } => InitialSampler::Normal { mean: mean + by, std },
        InitialSampler::Uniform { lo, hi } => InitialSampler::Uniform { lo: lo + by, hi: hi + by },
    }
}

fn paths_csv(p: &crate::forward::Paths) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["path".to_string(), "node".to_string(), "t".to_string()];
    header.extend((0..p.dim).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for i in 0..p.m {
        for k in 0..p.grid.n_nodes() {
            let mut row = vec![i.to_string(), k.to_string(), format!("{}", p.grid.node(k))];
            row.extend(p.state(k, i).iter().map(|v| format!("{v}")));
            w.write_record(&row)?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn full_suite(cfg: &ExperimentConfig) -> Result<Outcome> {
    let suite = SuiteConfig { seed: cfg.seed, quick: cfg.suite.quick };
    let mut out = Outcome::default();
    for c in run_all(&suite) {
        out.non_convergence |= c.non_convergence;
        for (name, ladder) in &c.ladders {
            let rows: Vec<ConvergenceRow> = ladder.iter().map(ConvergenceRow::from).collect();
            out.tables.push((format!("criterion_{:02}_{name}.csv", c.id), emit_convergence_table(&rows).into_bytes()));
        }
        out.groups.push((format!("criterion_{:02}_{}", c.id, c.title), c.reports));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(error: f64) -> ConvergenceRow {
        ConvergenceRow { delta: 0.1, m: 10, estimate: 0.0, se: 0.0, error }
    }

    #[test]
    fn convergence_table_orders() {
        let t = emit_convergence_table(&[row(0.4), row(0.2)]);
        let last = t.lines().last().unwrap();
        assert!(last.ends_with(",1"), "{t}");
        let t = emit_convergence_table(&[row(0.4), row(0.1)]);
        assert!(t.lines().last().unwrap().ends_with(",2"), "{t}");
        let t = emit_convergence_table(&[row(0.4)]);
        assert_eq!(t.lines().count(), 2);
        assert!(t.lines().last().unwrap().ends_with(','));
        assert_eq!(t.lines().next().unwrap(), "delta,m,estimate,se,error,order");
    }

    #[test]
    fn config_requires_seed_and_reports_location() {
        let e = ExperimentConfig::parse("[grid]\nt_end = 1.0\nsteps = 4\n").unwrap_err();
        assert!(e.to_string().contains("seed"), "{e}");
        let e = ExperimentConfig::parse("seed = 1\n[grid]\nt_end = 1.0\nstepz = 4\n").unwrap_err();
        assert!(e.to_string().contains("line"), "{e}");
    }

    #[test]
    fn hash_matches_serialized_config() {
        let cfg = ExperimentConfig::parse("seed = 3\n").unwrap();
        let a = cfg.to_toml();
        assert_eq!(config_hash(&a), config_hash(&ExperimentConfig::parse(&a).unwrap().to_toml()));
        assert_eq!(config_hash("").len(), 64);
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = ExperimentConfig::parse("seed = 3\n").unwrap();
        let cli = Cli::try_parse_from(["mfjump", "solve-bsde", "--seed", "9", "--basis", "local", "--degree", "5", "--ridge", "0.1"]).unwrap();
        cli.apply(&mut cfg);
        assert_eq!(cfg.solver.seed, 9);
        assert_eq!(cfg.solver.regression.basis, Basis::LocalPartition { bins: 5 });
        assert_eq!(cfg.solver.regression.ridge, 0.1);
    }

    #[test]
    fn unknown_family_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "seed = 1\n[coefficients]\nfamily = \"nope\"\n").unwrap();
        let code = run(["mfjump", "solve-bsde", "--config", p.to_str().unwrap()]);
        assert_eq!(code, EXIT_CONFIG);
    }

    #[test]
    fn zero_family_solve_reports_phi() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        let body = format!(
            "seed = 1\n[grid]\nt_end = 1.0\nsteps = 5\n[coefficients]\nfamily = \"zero\"\nparams = {{ \"terminal.constant\" = 0.7 }}\n[solver]\nn_particles = 50\n[output]\ndir = {:?}\n",
            dir.path().join("out")
        );
        fs::write(&p, body).unwrap();
        let cfg = ExperimentConfig::load(&p).unwrap();
        let (code, run_dir) = execute(Command::SolveBsde, &cfg, true).unwrap();
        assert_eq!(code, EXIT_PASS);
        let reports: Vec<StatCheckReport> = serde_json::from_slice(&fs::read(run_dir.join("solve_bsde.json")).unwrap()).unwrap();
        assert!((reports[0].estimate - 0.7).abs() < 1e-12);
        let manifest: RunManifest = serde_json::from_slice(&fs::read(run_dir.join("manifest.json")).unwrap()).unwrap();
        let mut listed = manifest.files.clone();
        listed.sort();
        let mut present: Vec<String> =
            fs::read_dir(&run_dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
        present.sort();
        assert_eq!(listed, present);
        assert_eq!(manifest.config_hash, config_hash(&fs::read_to_string(run_dir.join("config.toml")).unwrap()));
    }

    #[test]
    fn ito_ladder_has_one_row_per_rung() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::parse(&format!(
            "seed = 2\n[grid]\nt_end = 1.0\nsteps = 4\n[solver]\nn_particles = 200\n[output]\ndir = {:?}\n",
            dir.path()
        ))
        .unwrap();
        let (code, run_dir) = execute(Command::CheckIto, &cfg, false).unwrap();
        assert_eq!(code, EXIT_PASS);
        let table = fs::read_to_string(run_dir.join("ito_ladder.csv")).unwrap();
        assert_eq!(table.lines().count(), 4);
    }
}
