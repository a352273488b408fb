//! Command-line front end: configuration loading and the `qi` subcommands.
//!
//! Every command reads an optional JSON [`ExperimentConfig`]; without one the
//! reference family at `delta = 0.02` is used. Tables go to `--out` or stdout,
//! diagnostics to stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_solver::{extract_thresholds, solve_grid, ExtractedThresholds, GridConfig, GridSolution};
use crate::local_approx::{
    approx_grid_config, approx_total_cost_saturating, cost_deltas, solve_approx, threshold_bounds,
    ThresholdBounds,
};
use crate::model::{
    local_regime_report, make_paper_family, validate_spec, ProblemSpec, Strictness,
    DEFAULT_LAMBDA, DEFAULT_RHO,
};
use crate::policies::{low_complexity_policy, PolicyName};
use crate::simulator::{
    anomaly_experiment, default_qcd_h_grid, regret_sweep, AnomalySettings, ExperimentTable,
    HorizonMode, SimOptions, SpecFamily, Sweep, SweepSettings,
};

/// Largest `delta` the reference family accepts in sweeps; larger values are clamped.
pub const DELTA_CAP: f64 = 0.03;

/// Exit status of a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    ValidationFailed = 1,
    /// Parse, I/O or solver failure.
    Failure = 2,
}

#[derive(Debug, Parser)]
#[command(name = "qi", version, about = "Quickest intervention for change-point processes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for the simulator.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file (stdout when absent).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Monte Carlo runs per policy.
    #[arg(long, global = true)]
    pub runs: Option<usize>,
    /// Number of belief-grid cells.
    #[arg(long = "grid-n", global = true)]
    pub grid_n: Option<usize>,
    /// Let policies change level arbitrarily between steps.
    #[arg(long, global = true)]
    pub unconstrained: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Check the modeling assumptions of the configured spec.
    Validate,
    /// Solve the belief MDP on a grid and print the solution as JSON.
    Solve,
    /// Solve the small-perturbation approximation and report thresholds and bounds.
    Approx,
    /// Print the low-complexity thresholds and their closed-form bounds.
    Thresholds,
    /// Estimate the cost of each configured policy.
    Simulate,
    /// Regret sweep over rho, lambda or delta as CSV.
    Sweep,
    /// Fixed-horizon experiment with unrestricted level changes as CSV.
    Anomaly,
}

/// Either an inline spec or the reference family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpecSource {
    Family(FamilyRef),
    Inline(ProblemSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyRef {
    pub family: String,
    pub delta: f64,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub lambda: Option<f64>,
}

impl Default for SpecSource {
    fn default() -> Self {
        SpecSource::Family(FamilyRef {
            family: "paper".into(),
            delta: 0.02,
            rho: None,
            lambda: None,
        })
    }
}

/// Values of a sweep: explicit, or log-spaced between `from` and `to`.
///
/// For `rho` the log spacing applies to `1 - rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub param: String,
    #[serde(default)]
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub from: Option<f64>,
    #[serde(default)]
    pub to: Option<f64>,
    #[serde(default = "default_per_decade")]
    pub per_decade: usize,
}

fn default_per_decade() -> usize {
    20
}

impl SweepConfig {
    fn default_for(param: &str) -> Self {
        let (from, to) = match param {
            "delta" => (1e-4, DELTA_CAP),
            _ => (1e-4, 1.0),
        };
        SweepConfig {
            param: param.into(),
            values: None,
            from: Some(from),
            to: Some(to),
            per_decade: default_per_decade(),
        }
    }

    pub fn to_sweep(&self) -> Result<Sweep> {
        let values = match &self.values {
            Some(v) => v.clone(),
            None => {
                let (from, to) = match (self.from, self.to) {
                    (Some(f), Some(t)) => (f, t),
                    _ => {
                        return Err(Error::Config(
                            "sweep needs either values or from/to".into(),
                        ))
                    }
                };
                let pts = log_space(from, to, self.per_decade)?;
                if self.param == "rho" {
                    pts.into_iter().map(|x| 1.0 - x).collect()
                } else {
                    pts
                }
            }
        };
        match self.param.as_str() {
            "rho" => Ok(Sweep::Rho(values)),
            "lambda" => Ok(Sweep::Lambda(values)),
            "delta" => Ok(Sweep::Delta(values)),
            other => Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
        }
    }
}

/// Log-spaced points from `from` to `to` inclusive with `per_decade` points per factor of ten.
pub fn log_space(from: f64, to: f64, per_decade: usize) -> Result<Vec<f64>> {
    if !(from > 0.0 && to >= from && per_decade > 0) {
        return Err(Error::Config(format!(
            "bad log range from={from} to={to} per_decade={per_decade}"
        )));
    }
    let (lo, hi) = (from.log10(), to.log10());
    let steps = ((hi - lo) * per_decade as f64).round() as usize;
    if steps == 0 {
        return Ok(vec![from]);
    }
    Ok((0..=steps)
        .map(|i| {
            if i == steps {
                to
            } else {
                10f64.powf(lo + (hi - lo) * i as f64 / steps as f64)
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub spec: SpecSource,
    pub strictness: Strictness,
    pub grid: GridConfig,
    pub sim: SimOptions,
    pub sweep: Option<SweepConfig>,
    pub policies: Vec<PolicyName>,
    pub qcd_h_grid: Vec<f64>,
    pub anomaly: AnomalySettings,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            spec: SpecSource::default(),
            strictness: Strictness::Strict,
            grid: GridConfig::default(),
            sim: SimOptions::default(),
            sweep: None,
            policies: PolicyName::ALL.to_vec(),
            qcd_h_grid: default_qcd_h_grid(),
            anomaly: AnomalySettings::default(),
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Applies command-line overrides.
    pub fn apply(&mut self, cli: &Cli) {
        if let Some(seed) = cli.seed {
            self.sim.seed = seed;
            self.anomaly.seed = seed;
        }
        if let Some(n) = cli.runs {
            self.sim.n_runs = n;
            self.anomaly.n_runs = n;
        }
        if let Some(n) = cli.grid_n {
            self.grid.num_cells = n;
            self.anomaly.grid.num_cells = n;
        }
        if cli.unconstrained {
            self.sim.constrained = false;
        }
        if let Some(out) = &cli.out {
            self.output = Some(out.clone());
        }
    }

    /// Spec family with `delta` clamped to [`DELTA_CAP`]; clamping adds a warning.
    pub fn family(&self, warnings: &mut Vec<String>) -> Result<SpecFamily> {
        match &self.spec {
            SpecSource::Inline(s) => Ok(SpecFamily::Fixed(s.clone())),
            SpecSource::Family(f) => {
                if f.family != "paper" {
                    return Err(Error::Config(format!("unknown family {:?}", f.family)));
                }
                let delta = if f.delta > DELTA_CAP {
                    warnings.push(format!(
                        "delta={} exceeds the positivity range of the family; clamped to {DELTA_CAP}",
                        f.delta
                    ));
                    DELTA_CAP
                } else {
                    f.delta
                };
                Ok(SpecFamily::Paper {
                    delta,
                    rho: f.rho.unwrap_or(DEFAULT_RHO),
                    lambda: f.lambda.unwrap_or(DEFAULT_LAMBDA),
                })
            }
        }
    }

    pub fn build_spec(&self, warnings: &mut Vec<String>) -> Result<ProblemSpec> {
        match self.family(warnings)? {
            SpecFamily::Fixed(s) => Ok(s),
            SpecFamily::Paper { delta, rho, lambda } => {
                Ok(make_paper_family(delta)?.with_rho(rho).with_lambda(lambda))
            }
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { Status::Failure as i32 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    match execute(&cli, &mut stdout.lock(), &mut stderr.lock()) {
        Ok(status) => status as i32,
        Err(e) => {
            eprintln!("error: {e}");
            Status::Failure as i32
        }
    }
}

/// Runs one command, writing results to `out` (unless `--out` is set) and diagnostics to `err`.
pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<Status> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(cli);
    let mut warnings = Vec::new();
    let status = match cli.command {
        Command::Validate => cmd_validate(&cfg, &mut warnings, err)?,
        Command::Solve => emit_json(&cfg, out, &cmd_solve(&cfg, &mut warnings)?)?,
        Command::Approx => emit_json(&cfg, out, &cmd_approx(&cfg, &mut warnings)?)?,
        Command::Thresholds => emit_json(&cfg, out, &cmd_thresholds(&cfg, &mut warnings)?)?,
        Command::Simulate => emit_table(&cfg, out, err, &cmd_simulate(&cfg, &mut warnings)?)?,
        Command::Sweep => emit_table(&cfg, out, err, &cmd_sweep(&cfg, &mut warnings)?)?,
        Command::Anomaly => emit_table(&cfg, out, err, &cmd_anomaly(&cfg))?,
    };
    for w in warnings {
        writeln!(err, "warning: {w}")?;
    }
    Ok(status)
}

fn write_output(cfg: &ExperimentConfig, out: &mut dyn Write, bytes: &[u8]) -> Result<()> {
    match &cfg.output {
        Some(path) => fs::write(path, bytes)?,
        None => out.write_all(bytes)?,
    }
    Ok(())
}

fn emit_json<T: Serialize>(cfg: &ExperimentConfig, out: &mut dyn Write, value: &T) -> Result<Status> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_output(cfg, out, &text)?;
    Ok(Status::Ok)
}

fn emit_table(
    cfg: &ExperimentConfig,
    out: &mut dyn Write,
    err: &mut dyn Write,
    table: &ExperimentTable,
) -> Result<Status> {
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    write_output(cfg, out, &buf)?;
    for n in &table.notes {
        writeln!(err, "{n}")?;
    }
    Ok(Status::Ok)
}

pub fn cmd_validate(
    cfg: &ExperimentConfig,
    warnings: &mut Vec<String>,
    err: &mut dyn Write,
) -> Result<Status> {
    let spec = cfg.build_spec(warnings)?;
    let report = validate_spec(&spec, cfg.strictness)?;
    let regime = local_regime_report(&spec);
    for v in &report.violations {
        writeln!(err, "{:?} {:?}: {}", v.severity, v.rule, v.message)?;
    }
    writeln!(
        err,
        "local regime: delta_eff={:.6} gamma_eff={:.6}",
        regime.delta_eff, regime.gamma_eff
    )?;
    writeln!(err, "{}", if report.passed { "passed" } else { "failed" })?;
    Ok(if report.passed {
        Status::Ok
    } else {
        Status::ValidationFailed
    })
}

#[derive(Debug, Serialize)]
pub struct SolveOutput {
    pub solution: GridSolution,
    pub thresholds: ExtractedThresholds,
}

pub fn cmd_solve(cfg: &ExperimentConfig, warnings: &mut Vec<String>) -> Result<SolveOutput> {
    let spec = cfg.build_spec(warnings)?;
    let solution = solve_grid(&spec, &cfg.grid)?;
    let thresholds = extract_thresholds(&solution);
    if thresholds.violations() > 0 {
        warnings.push(format!(
            "grid policy is not of threshold form ({} violations)",
            thresholds.violations()
        ));
    }
    Ok(SolveOutput {
        solution,
        thresholds,
    })
}

#[derive(Debug, Serialize)]
pub struct ApproxOutput {
    pub thresholds: crate::grid_solver::ThresholdPolicy,
    pub value_at_zero: f64,
    pub bounds: Option<ThresholdBounds>,
    pub sweeps: usize,
}

pub fn cmd_approx(cfg: &ExperimentConfig, warnings: &mut Vec<String>) -> Result<ApproxOutput> {
    let spec = cfg.build_spec(warnings)?;
    // the approximate system is cheap per sweep; only --grid-n changes its default grid
    let grid = match cfg.grid.num_cells {
        n if n != GridConfig::default().num_cells => cfg.grid,
        _ => approx_grid_config(),
    };
    let sol = solve_approx(&spec, &grid)?;
    let bounds = bounds_or_warn(&spec, warnings);
    Ok(ApproxOutput {
        thresholds: sol.thresholds,
        value_at_zero: sol.value_at_zero,
        bounds,
        sweeps: sol.tables.sweeps_used,
    })
}

fn bounds_or_warn(spec: &ProblemSpec, warnings: &mut Vec<String>) -> Option<ThresholdBounds> {
    match threshold_bounds(spec, &cost_deltas(spec)) {
        Ok(b) => {
            for a in b.inversions() {
                warnings.push(format!("closed-form bounds for level {a} are inverted"));
            }
            Some(b)
        }
        Err(e) => {
            warnings.push(format!("no closed-form bounds: {e}"));
            None
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ThresholdsOutput {
    pub low_complexity: crate::grid_solver::ThresholdPolicy,
    pub bounds: Option<ThresholdBounds>,
    /// Closed-form approximated cost of the low-complexity policy.
    pub approx_cost: f64,
}

pub fn cmd_thresholds(cfg: &ExperimentConfig, warnings: &mut Vec<String>) -> Result<ThresholdsOutput> {
    let spec = cfg.build_spec(warnings)?;
    let low = low_complexity_policy(&spec)?;
    let approx_cost = approx_total_cost_saturating(&spec, &low)?;
    Ok(ThresholdsOutput {
        bounds: bounds_or_warn(&spec, warnings),
        low_complexity: low,
        approx_cost,
    })
}

fn sweep_settings(cfg: &ExperimentConfig) -> SweepSettings {
    SweepSettings {
        policies: cfg.policies.clone(),
        grid: cfg.grid,
        qcd_h_grid: cfg.qcd_h_grid.clone(),
        opts: cfg.sim,
        approx_row: cfg.sim.horizon_mode == HorizonMode::GeometricT,
    }
}

/// Evaluates the configured policies on the configured spec, as a one-point `rho` sweep.
pub fn cmd_simulate(cfg: &ExperimentConfig, warnings: &mut Vec<String>) -> Result<ExperimentTable> {
    let spec = cfg.build_spec(warnings)?;
    let sweep = Sweep::Rho(vec![spec.rho]);
    Ok(regret_sweep(&SpecFamily::Fixed(spec), &sweep, &sweep_settings(cfg)))
}

pub fn cmd_sweep(cfg: &ExperimentConfig, warnings: &mut Vec<String>) -> Result<ExperimentTable> {
    let sweep_cfg = cfg
        .sweep
        .clone()
        .unwrap_or_else(|| SweepConfig::default_for("rho"));
    let mut sweep = sweep_cfg.to_sweep()?;
    if let Sweep::Delta(values) = &mut sweep {
        for v in values.iter_mut().filter(|v| **v > DELTA_CAP) {
            warnings.push(format!("swept delta={v} clamped to {DELTA_CAP}"));
            *v = DELTA_CAP;
        }
    }
    let family = cfg.family(warnings)?;
    Ok(regret_sweep(&family, &sweep, &sweep_settings(cfg)))
}

pub fn cmd_anomaly(cfg: &ExperimentConfig) -> ExperimentTable {
    anomaly_experiment(&cfg.anomaly)
}
