//! Batch front end: parses an experiment config, dispatches to the library,
//! and writes CSV/JSON artifacts plus a manifest into the configured output
//! directory. Artifacts are deterministic for a fixed config regardless of
//! the worker count; the manifest echoes the resolved config (plus its hash
//! and the tool version) so any run can be reproduced from the manifest
//! alone. Exit codes: 0 success, 1 validation or run failure, 2 usage or
//! config error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use sidelab::coeffs::{PresetParams, PresetRegistry};
use sidelab::field::Point;
use sidelab::harness;
use sidelab::ledger::{self, SemimartingaleDriver};
use sidelab::regfun::RegParams;
use sidelab::solver::{self, Equation, SolverConfig};
use sidelab::validate;
use sidelab::{exec, Field, Grid, MarkSpace, NoiseRealization, TimeGrid};

#[derive(Parser)]
#[command(name = "sidelab", version, about = "Lévy-driven SPDE laboratory")]
struct Cli {
    /// Worker threads for path-parallel sections; results do not depend
    /// on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one path of a configured equation; records norms and jumps.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Book the pathwise positive-part identity along one path.
    Ledger {
        #[arg(long)]
        config: PathBuf,
    },
    /// Coupled two-solution comparison over a refinement ladder.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Scalar sign-flip experiment statistics.
    Counterexample {
        /// Time horizon.
        #[arg(long = "T")]
        t_end: f64,
        /// Jump intensity.
        #[arg(long)]
        intensity: f64,
        #[arg(long)]
        paths: usize,
        #[arg(long)]
        seed: u64,
        /// Run the control arm (jump coefficient removed).
        #[arg(long)]
        control: bool,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Sampling-based checks of the structural assumptions on a preset.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

impl From<sidelab::Error> for Failure {
    fn from(e: sidelab::Error) -> Failure {
        let code = match e {
            sidelab::Error::Config(_) => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match exec::with_workers(cli.workers, || dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Simulate { config } => cmd_simulate(&config),
        Command::Ledger { config } => cmd_ledger(&config),
        Command::Compare { config } => cmd_compare(&config),
        Command::Counterexample {
            t_end,
            intensity,
            paths,
            seed,
            control,
            out_dir,
        } => cmd_counterexample(t_end, intensity, paths, seed, control, &out_dir),
        Command::Validate { config } => cmd_validate(&config),
    }
}

// ---------------------------------------------------------------- plumbing

fn load_config<C: DeserializeOwned>(path: &Path) -> Result<C, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| usage(format!("config {} violates the schema: {e}", path.display())))
}

fn check_version(version: u32) -> Result<(), Failure> {
    if version != 1 {
        return Err(usage(format!(
            "unsupported config version {version}; this build reads version 1"
        )));
    }
    Ok(())
}

/// Output directory plus the list of data artifacts written into it.
struct OutDir {
    dir: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    fn create(dir: &Path) -> Result<OutDir, Failure> {
        fs::create_dir_all(dir).map_err(|e| {
            usage(format!(
                "cannot create output directory {}: {e}",
                dir.display()
            ))
        })?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        fs::write(self.dir.join(name), bytes).map_err(|e| {
            usage(format!(
                "cannot write {name} in {}: {e}",
                self.dir.display()
            ))
        })?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value)
            .map_err(|e| usage(format!("cannot encode {name}: {e}")))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn config_hash<C: Serialize>(config: &C) -> Result<String, Failure> {
    let canonical =
        serde_json::to_vec(config).map_err(|e| usage(format!("cannot encode config: {e}")))?;
    Ok(format!("fnv1a64:{:016x}", fnv1a64(&canonical)))
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    tool: Tool,
    command: &'a str,
    config: &'a C,
    config_hash: &'a str,
    seed: u64,
    /// Wall time of this run; the only manifest field that varies between
    /// identical runs.
    wall_time_s: f64,
    artifacts: &'a [String],
}

#[derive(Serialize)]
struct Tool {
    name: &'static str,
    version: &'static str,
}

fn write_manifest<C: Serialize>(
    out: &OutDir,
    command: &str,
    config: &C,
    hash: &str,
    seed: u64,
    started: Instant,
) -> Result<(), Failure> {
    let manifest = Manifest {
        tool: Tool {
            name: "sidelab",
            version: env!("CARGO_PKG_VERSION"),
        },
        command,
        config,
        config_hash: hash,
        seed,
        wall_time_s: started.elapsed().as_secs_f64(),
        artifacts: &out.files,
    };
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| usage(format!("cannot encode manifest: {e}")))?;
    text.push('\n');
    fs::write(out.dir.join("manifest.json"), text).map_err(|e| {
        usage(format!(
            "cannot write manifest.json in {}: {e}",
            out.dir.display()
        ))
    })
}

// ----------------------------------------------------------- shared config

#[derive(Deserialize, Serialize, Clone)]
#[serde(deny_unknown_fields)]
struct GridConfig {
    /// One [lo, hi] pair per axis (one or two axes).
    extent: Vec<[f64; 2]>,
    /// Interior node count per axis.
    n: Vec<usize>,
}

impl GridConfig {
    fn build(&self) -> Result<Arc<Grid>, Failure> {
        if self.extent.len() != self.n.len() {
            return Err(usage("grid extent and n must list the same axes"));
        }
        let extents: Vec<(f64, f64)> = self.extent.iter().map(|e| (e[0], e[1])).collect();
        Ok(Grid::boxed(&extents, &self.n)?)
    }
}

#[derive(Deserialize, Serialize, Clone, Copy)]
#[serde(deny_unknown_fields)]
struct TimeConfig {
    t_end: f64,
    steps: usize,
}

impl TimeConfig {
    fn build(&self) -> Result<TimeGrid, Failure> {
        Ok(TimeGrid::new(self.t_end, self.steps)?)
    }
}

#[derive(Deserialize, Serialize, Clone, Copy)]
#[serde(rename_all = "lowercase")]
enum EquationConfig {
    First,
    Second,
}

impl From<EquationConfig> for Equation {
    fn from(e: EquationConfig) -> Equation {
        match e {
            EquationConfig::First => Equation::First,
            EquationConfig::Second => Equation::Second,
        }
    }
}

/// Initial state profile; `sine` tapers to zero on the boundary of every
/// axis, matching the homogeneous Dirichlet setting.
#[derive(Deserialize, Serialize, Clone, Copy)]
#[serde(tag = "profile", rename_all = "lowercase")]
enum InitConfig {
    Sine { amplitude: f64 },
    Constant { value: f64 },
}

impl InitConfig {
    fn field(&self, grid: &Arc<Grid>) -> Result<Field, Failure> {
        let f = match *self {
            InitConfig::Sine { amplitude } => {
                let g = grid.clone();
                Field::from_fn(grid, move |x: Point| {
                    let mut v = amplitude;
                    for ax in 0..g.dim() {
                        let s = (x[ax] - g.lo(ax)) / (g.hi(ax) - g.lo(ax));
                        v *= (std::f64::consts::PI * s).sin();
                    }
                    v
                })?
            }
            InitConfig::Constant { value } => Field::from_fn(grid, move |_| value)?,
        };
        Ok(f)
    }
}

// --------------------------------------------------------------- simulate

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct SimulateConfig {
    version: u32,
    seed: u64,
    preset: String,
    #[serde(default)]
    params: PresetParams,
    equation: EquationConfig,
    grid: GridConfig,
    time: TimeConfig,
    init: InitConfig,
    #[serde(default)]
    path: u64,
    #[serde(default = "default_theta")]
    theta: f64,
    out_dir: PathBuf,
}

fn default_theta() -> f64 {
    1.0
}

#[derive(Serialize)]
struct SimulateSummary {
    config_hash: String,
    preset: String,
    seed: u64,
    path: u64,
    transitions: usize,
    jumps: usize,
    final_l2: f64,
    final_h1: f64,
    final_pos_l2: f64,
}

fn cmd_simulate(config_path: &Path) -> Result<(), Failure> {
    let started = Instant::now();
    let cfg: SimulateConfig = load_config(config_path)?;
    check_version(cfg.version)?;
    let hash = config_hash(&cfg)?;

    let co = PresetRegistry::with_builtins().build(&cfg.preset, &cfg.params)?;
    let grid = cfg.grid.build()?;
    let time = cfg.time.build()?;
    let psi = cfg.init.field(&grid)?;
    let equation: Equation = cfg.equation.into();
    let mark_spaces: Vec<MarkSpace> = match equation {
        Equation::First => (!co.nu.is_empty()).then(|| co.nu.clone()).into_iter().collect(),
        Equation::Second => (!co.pi2.is_empty())
            .then(|| co.pi2.clone())
            .into_iter()
            .collect(),
    };
    let noise =
        NoiseRealization::sample(time.clone(), co.modes, &mark_spaces, cfg.seed, cfg.path)?;
    let mut solver_cfg = SolverConfig::new(equation, time);
    solver_cfg.theta_implicit = cfg.theta;
    let record = solver::solve(&solver_cfg, &co, &psi, &noise)?;

    let mut out = OutDir::create(&cfg.out_dir)?;
    let mut norms = Vec::new();
    record.write_norms_csv(&mut norms)?;
    out.write("norms.csv", &norms)?;
    let mut jumps = Vec::new();
    record.write_jumps_csv(&mut jumps)?;
    out.write("jumps.csv", &jumps)?;
    let last = record.rows.last().expect("at least the initial row");
    out.write_json(
        "summary.json",
        &SimulateSummary {
            config_hash: hash.clone(),
            preset: cfg.preset.clone(),
            seed: cfg.seed,
            path: cfg.path,
            transitions: record.rows.len() - 1,
            jumps: record.jumps.len(),
            final_l2: last.l2,
            final_h1: last.h1,
            final_pos_l2: last.pos_l2,
        },
    )?;
    write_manifest(&out, "simulate", &cfg, &hash, cfg.seed, started)
}

// ----------------------------------------------------------------- ledger

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct LedgerConfig {
    version: u32,
    seed: u64,
    driver: LedgerDriverConfig,
    /// Interior nodes on (0, 1).
    n: usize,
    time: TimeConfig,
    #[serde(default)]
    path: u64,
    /// When set, book the regularized identity at this delta instead of
    /// the sharp one.
    delta: Option<f64>,
    out_dir: PathBuf,
}

/// Named driver families for the ledger subcommand.
#[derive(Deserialize, Serialize, Clone, Copy)]
#[serde(tag = "family", rename_all = "kebab-case")]
enum LedgerDriverConfig {
    /// v* equals the jump compensator density, so accrual increments are
    /// purely martingale and the booking is exact while no node changes
    /// sign.
    MartingaleIncrement {
        #[serde(default = "default_rate")]
        rate: f64,
    },
    /// Smooth drift plus one sampled Wiener mode.
    Smooth,
    /// psi = 1, v* = -2, no noise: |u+_t|^2 / |psi+|^2 = ((1 - 2t)+)^2.
    Deterministic,
}

fn default_rate() -> f64 {
    1.0
}

fn build_ledger_driver(
    cfg: &LedgerConfig,
    time: &TimeGrid,
) -> Result<(SemimartingaleDriver, NoiseRealization), Failure> {
    use std::f64::consts::PI;
    let grid = Grid::line(0.0, 1.0, cfg.n)?;
    match cfg.driver {
        LedgerDriverConfig::MartingaleIncrement { rate } => {
            let psi = Field::from_fn(&grid, |x| 1.0 + 0.2 * (2.0 * PI * x[0]).sin())?;
            let kf = |_t: f64, x: Point, _z: usize| -0.01 * (1.0 + 0.5 * (PI * x[0]).sin());
            let driver = SemimartingaleDriver::tabulate(
                psi,
                time,
                1,
                1,
                |t, x| rate * kf(t, x, 0),
                |t, x, _m| 0.1 * (PI * x[0]).cos() * (1.0 + 0.3 * t),
                kf,
            )?;
            let noise = NoiseRealization::sample(
                time.clone(),
                1,
                &[MarkSpace::uniform(1, rate)?],
                cfg.seed,
                cfg.path,
            )?;
            Ok((driver, noise))
        }
        LedgerDriverConfig::Smooth => {
            let psi = Field::from_fn(&grid, |x| 0.6 + 0.1 * (PI * x[0]).sin())?;
            let driver = SemimartingaleDriver::tabulate(
                psi,
                time,
                1,
                0,
                |t, x| (0.2 + 0.3 * t) * (1.0 + 0.5 * (PI * x[0]).sin()),
                |_, x, _| 0.15 * (PI * x[0]).cos(),
                |_, _, _| 0.0,
            )?;
            let noise = NoiseRealization::sample(time.clone(), 1, &[], cfg.seed, cfg.path)?;
            Ok((driver, noise))
        }
        LedgerDriverConfig::Deterministic => {
            let psi = Field::from_fn(&grid, |_| 1.0)?;
            let driver = SemimartingaleDriver::tabulate(
                psi,
                time,
                0,
                0,
                |_, _| -2.0,
                |_, _, _| 0.0,
                |_, _, _| 0.0,
            )?;
            let noise = NoiseRealization::sample(time.clone(), 0, &[], cfg.seed, cfg.path)?;
            Ok((driver, noise))
        }
    }
}

#[derive(Serialize)]
struct LedgerSummary {
    config_hash: String,
    seed: u64,
    path: u64,
    delta: Option<f64>,
    initial: f64,
    rows: usize,
    max_abs_residual: f64,
}

fn cmd_ledger(config_path: &Path) -> Result<(), Failure> {
    let started = Instant::now();
    let cfg: LedgerConfig = load_config(config_path)?;
    check_version(cfg.version)?;
    let hash = config_hash(&cfg)?;

    let time = cfg.time.build()?;
    let (driver, noise) = build_ledger_driver(&cfg, &time)?;
    let path = ledger::build_path(&driver, &noise)?;
    let report = match cfg.delta {
        Some(delta) => ledger::ito_residual_delta(&path, &driver, &noise, RegParams::new(delta)?)?,
        None => ledger::ito_residual(&path, &driver, &noise)?,
    };

    let mut out = OutDir::create(&cfg.out_dir)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    out.write("ledger.csv", &csv)?;
    out.write_json(
        "summary.json",
        &LedgerSummary {
            config_hash: hash.clone(),
            seed: cfg.seed,
            path: cfg.path,
            delta: cfg.delta,
            initial: report.initial,
            rows: report.rows.len(),
            max_abs_residual: report.max_abs_residual,
        },
    )?;
    write_manifest(&out, "ledger", &cfg, &hash, cfg.seed, started)
}

// ---------------------------------------------------------------- compare

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct CompareConfig {
    version: u32,
    seed: u64,
    preset: String,
    paths: usize,
    levels: usize,
    #[serde(default)]
    params: PresetParams,
    out_dir: PathBuf,
}

#[derive(Serialize)]
struct CompareSummary<'a> {
    config_hash: String,
    preset: &'a str,
    paths: usize,
    levels: usize,
    report: &'a harness::ComparisonReport,
}

fn cmd_compare(config_path: &Path) -> Result<(), Failure> {
    let started = Instant::now();
    let cfg: CompareConfig = load_config(config_path)?;
    check_version(cfg.version)?;
    let hash = config_hash(&cfg)?;

    let spec =
        harness::comparison_preset(&cfg.preset, cfg.paths, cfg.levels, cfg.seed, &cfg.params)?;
    let report = harness::run_comparison(&spec)?;

    let mut out = OutDir::create(&cfg.out_dir)?;
    let mut csv = Vec::new();
    report.write_levels_csv(&mut csv)?;
    out.write("compare.csv", &csv)?;
    out.write_json(
        "summary.json",
        &CompareSummary {
            config_hash: hash.clone(),
            preset: &cfg.preset,
            paths: cfg.paths,
            levels: cfg.levels,
            report: &report,
        },
    )?;
    write_manifest(&out, "compare", &cfg, &hash, cfg.seed, started)
}

// --------------------------------------------------------- counterexample

/// Synthesized config echo so the manifest stays self-contained even though
/// this subcommand takes plain flags.
#[derive(Serialize)]
struct CounterexampleEcho {
    version: u32,
    t_end: f64,
    intensity: f64,
    paths: usize,
    seed: u64,
    control: bool,
    out_dir: PathBuf,
}

#[derive(Serialize)]
struct CounterexampleSummary {
    config_hash: String,
    t_end: f64,
    intensity: f64,
    paths: usize,
    seed: u64,
    control: bool,
    negative_fraction: f64,
    expected_fraction: f64,
    fraction_sigma: f64,
    mean_tau: f64,
    mean_first_exponent: f64,
    all_flips_exact: bool,
}

fn cmd_counterexample(
    t_end: f64,
    intensity: f64,
    paths: usize,
    seed: u64,
    control: bool,
    out_dir: &Path,
) -> Result<(), Failure> {
    let started = Instant::now();
    let echo = CounterexampleEcho {
        version: 1,
        t_end,
        intensity,
        paths,
        seed,
        control,
        out_dir: out_dir.to_path_buf(),
    };
    let hash = config_hash(&echo)?;

    let report = if control {
        harness::run_counterexample_control(t_end, intensity, paths, seed)?
    } else {
        harness::run_counterexample(t_end, intensity, paths, seed)?
    };

    let mut out = OutDir::create(out_dir)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    out.write("counterexample.csv", &csv)?;
    out.write_json(
        "summary.json",
        &CounterexampleSummary {
            config_hash: hash.clone(),
            t_end,
            intensity,
            paths,
            seed,
            control,
            negative_fraction: report.negative_fraction,
            expected_fraction: report.expected_fraction,
            fraction_sigma: report.fraction_sigma,
            mean_tau: report.mean_tau,
            mean_first_exponent: report.mean_first_exponent,
            all_flips_exact: report.all_flips_exact,
        },
    )?;
    write_manifest(&out, "counterexample", &echo, &hash, seed, started)
}

// --------------------------------------------------------------- validate

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ValidateConfig {
    version: u32,
    seed: u64,
    preset: String,
    #[serde(default)]
    params: PresetParams,
    grid: GridConfig,
    t_end: f64,
    samples: usize,
    out_dir: PathBuf,
}

fn cmd_validate(config_path: &Path) -> Result<(), Failure> {
    let started = Instant::now();
    let cfg: ValidateConfig = load_config(config_path)?;
    check_version(cfg.version)?;
    let hash = config_hash(&cfg)?;

    let co = PresetRegistry::with_builtins().build(&cfg.preset, &cfg.params)?;
    let grid = cfg.grid.build()?;
    let report = validate::validate(&co, &grid, cfg.t_end, cfg.samples, cfg.seed);

    let mut out = OutDir::create(&cfg.out_dir)?;
    out.write_json("validation.json", &report)?;
    write_manifest(&out, "validate", &cfg, &hash, cfg.seed, started)?;

    if !report.passed {
        let failing: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        return Err(Failure {
            code: 1,
            message: format!(
                "preset '{}' fails validation: {}",
                cfg.preset,
                failing.join(", ")
            ),
        });
    }
    Ok(())
}
