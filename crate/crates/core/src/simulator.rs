//! Seeded Monte Carlo evaluation of policies.
//!
//! Every episode draws its horizon, change-point and observations from three
//! independent ChaCha streams keyed by `(seed, episode, purpose)`. Results do
//! not depend on scheduling, and policies evaluated with the same seed see
//! the same horizon, change-point and observation uniforms (common random
//! numbers).

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::belief::update;
use crate::error::{Error, Result};
use crate::grid_solver::{solve_finite_horizon, solve_grid, GridConfig};
use crate::local_approx::approx_total_cost_saturating;
use crate::model::{kl_divergence, make_paper_family, ProblemSpec};
use crate::policies::{
    decide, low_complexity_policy, oracle_cost_closed_form, oracle_cost_fixed_horizon,
    HiddenInfo, PolicyKind, PolicyName, PolicyState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonMode {
    /// `Pr(T = k) = rho^(k-1) (1 - rho)`.
    GeometricT,
    FixedT(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimOptions {
    pub horizon_mode: HorizonMode,
    pub constrained: bool,
    pub n_runs: usize,
    pub seed: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            horizon_mode: HorizonMode::GeometricT,
            constrained: true,
            n_runs: 20_000,
            seed: 0,
        }
    }
}

impl SimOptions {
    pub fn new(n_runs: usize, seed: u64) -> Self {
        SimOptions {
            n_runs,
            seed,
            ..Default::default()
        }
    }

    pub fn fixed_horizon(mut self, horizon: u64) -> Self {
        self.horizon_mode = HorizonMode::FixedT(horizon);
        self
    }

    pub fn unconstrained(mut self) -> Self {
        self.constrained = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::InvalidParameter("n_runs must be at least 1".into()));
        }
        if self.horizon_mode == HorizonMode::FixedT(0) {
            return Err(Error::InvalidParameter("fixed horizon must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub hidden_t: u64,
    pub hidden_tau: u64,
    /// `a_0 .. a_{T-1}`.
    pub actions: Vec<usize>,
    /// `z_1 .. z_{T-1}` as 0-based indices.
    pub observations: Vec<usize>,
    pub total_cost: f64,
}

impl EpisodeResult {
    /// Cost recomputed from the recorded sequences in the order the simulator accumulates it.
    pub fn recompute_cost(&self, spec: &ProblemSpec) -> f64 {
        let mut total = spec.c_i[self.actions[0]];
        for (z, a) in self.observations.iter().zip(&self.actions[1..]) {
            total += spec.c_p[*z] + spec.c_i[*a];
        }
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub n_runs: usize,
    pub mean_cost: f64,
    pub std_err: f64,
    pub ci95: (f64, f64),
    /// Mean cost minus the oracle's expected cost.
    pub regret: f64,
    pub seed: u64,
}

impl CostReport {
    pub fn from_samples(costs: &[f64], oracle_cost: f64, seed: u64) -> Self {
        let n = costs.len();
        let mean = costs.iter().sum::<f64>() / n as f64;
        let std_err = if n > 1 {
            let ss: f64 = costs.iter().map(|c| (c - mean) * (c - mean)).sum();
            (ss / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        CostReport {
            n_runs: n,
            mean_cost: mean,
            std_err,
            ci95: (mean - 1.96 * std_err, mean + 1.96 * std_err),
            regret: mean - oracle_cost,
            seed,
        }
    }

    pub fn overlaps(&self, other: &CostReport) -> bool {
        self.ci95.0 <= other.ci95.1 && other.ci95.0 <= self.ci95.1
    }
}

#[derive(Clone, Copy)]
enum Purpose {
    Horizon = 0,
    ChangePoint = 1,
    Observation = 2,
}

fn substream(seed: u64, episode: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode * 4 + purpose as u64);
    rng
}

/// Inverse-CDF draw of `K >= 1` with `Pr(K = k) = stay^(k-1) (1 - stay)`.
pub fn sample_geometric(u: f64, stay: f64) -> u64 {
    if stay <= 0.0 {
        return 1;
    }
    if stay >= 1.0 {
        return u64::MAX;
    }
    let k = ((1.0 - u).ln() / stay.ln()).floor();
    (k as u64).saturating_add(1)
}

fn sample_index(dist: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}

/// Expected cost of the clairvoyant policy under the given horizon model.
pub fn oracle_reference(spec: &ProblemSpec, mode: HorizonMode) -> f64 {
    match mode {
        HorizonMode::GeometricT => oracle_cost_closed_form(spec),
        HorizonMode::FixedT(n) => oracle_cost_fixed_horizon(spec, n),
    }
}

fn simulate(
    spec: &ProblemSpec,
    kind: &PolicyKind,
    opts: &SimOptions,
    episode: u64,
    mut record: impl FnMut(usize, Option<usize>),
) -> Result<(u64, u64, f64)> {
    let horizon = match opts.horizon_mode {
        HorizonMode::GeometricT => {
            sample_geometric(substream(opts.seed, episode, Purpose::Horizon).gen(), spec.rho)
        }
        HorizonMode::FixedT(n) => n,
    };
    let tau = sample_geometric(
        substream(opts.seed, episode, Purpose::ChangePoint).gen(),
        1.0 - spec.lambda,
    );
    let mut obs_rng = substream(opts.seed, episode, Purpose::Observation);
    let check = opts.constrained && kind.respects_increment_constraint();

    let mut state = PolicyState {
        hidden: Some(HiddenInfo { tau, horizon }),
        ..PolicyState::initial()
    };
    let mut a = decide(kind, &state, opts.constrained)?;
    state.qcd_declared = kind.declared_after(&state);
    record(a, None);
    let mut total = spec.c_i[a];
    for t in 1..horizon {
        let dist = if t < tau { &spec.alpha } else { &spec.betas[a] };
        let z = sample_index(dist, obs_rng.gen());
        state.pi = update(spec, state.pi, a, z);
        state.level = a;
        state.t = t;
        let next = decide(kind, &state, opts.constrained)?;
        debug_assert!(!check || (a..=a + 1).contains(&next));
        state.qcd_declared = kind.declared_after(&state);
        total += spec.c_p[z] + spec.c_i[next];
        a = next;
        record(a, Some(z));
    }
    Ok((horizon, tau, total))
}

/// Simulates one episode; `episode` selects the random substreams.
pub fn run_episode(
    spec: &ProblemSpec,
    kind: &PolicyKind,
    opts: &SimOptions,
    episode: u64,
) -> Result<EpisodeResult> {
    let mut actions = Vec::new();
    let mut observations = Vec::new();
    let (hidden_t, hidden_tau, total_cost) = simulate(spec, kind, opts, episode, |a, z| {
        actions.push(a);
        observations.extend(z);
    })?;
    Ok(EpisodeResult {
        hidden_t,
        hidden_tau,
        actions,
        observations,
        total_cost,
    })
}

/// Per-episode costs for episodes `0..n_runs`, in episode order.
pub fn episode_costs(spec: &ProblemSpec, kind: &PolicyKind, opts: &SimOptions) -> Result<Vec<f64>> {
    opts.validate()?;
    (0..opts.n_runs as u64)
        .into_par_iter()
        .map(|e| simulate(spec, kind, opts, e, |_, _| {}).map(|r| r.2))
        .collect()
}

pub fn estimate_cost(spec: &ProblemSpec, kind: &PolicyKind, opts: &SimOptions) -> Result<CostReport> {
    let costs = episode_costs(spec, kind, opts)?;
    Ok(CostReport::from_samples(
        &costs,
        oracle_reference(spec, opts.horizon_mode),
        opts.seed,
    ))
}

/// `n` evenly spaced points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Default declare thresholds searched when tuning the detection baselines.
pub fn default_qcd_h_grid() -> Vec<f64> {
    linspace(0.05, 0.95, 25)
}

/// Picks the declare threshold with the lowest mean cost; ties go to the smaller `h`.
pub fn tune_qcd(
    spec: &ProblemSpec,
    direct: bool,
    h_grid: &[f64],
    opts: &SimOptions,
) -> Result<(f64, CostReport)> {
    if h_grid.is_empty() {
        return Err(Error::InvalidParameter("QCD h grid is empty".into()));
    }
    let mut best: Option<(f64, CostReport)> = None;
    for &h in h_grid {
        let report = estimate_cost(spec, &PolicyKind::qcd(spec, h, direct)?, opts)?;
        let better = match &best {
            None => true,
            Some((bh, br)) => {
                report.mean_cost < br.mean_cost || (report.mean_cost == br.mean_cost && h < *bh)
            }
        };
        if better {
            best = Some((h, report));
        }
    }
    Ok(best.expect("nonempty grid"))
}

/// One line of an experiment table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub param_name: String,
    #[serde(serialize_with = "sig9")]
    pub param_value: f64,
    #[serde(serialize_with = "sig9")]
    pub kl_alpha_beta0: f64,
    pub policy: String,
    pub n_runs: usize,
    #[serde(serialize_with = "sig9")]
    pub mean_cost: f64,
    #[serde(serialize_with = "sig9")]
    pub stderr: f64,
    #[serde(serialize_with = "sig9")]
    pub ci_lo: f64,
    #[serde(serialize_with = "sig9")]
    pub ci_hi: f64,
    #[serde(serialize_with = "sig9")]
    pub regret: f64,
    pub seed: u64,
}

impl ResultRow {
    fn from_report(param: (&str, f64), kl: f64, policy: &str, r: &CostReport) -> Self {
        ResultRow {
            param_name: param.0.to_string(),
            param_value: param.1,
            kl_alpha_beta0: kl,
            policy: policy.to_string(),
            n_runs: r.n_runs,
            mean_cost: r.mean_cost,
            stderr: r.std_err,
            ci_lo: r.ci95.0,
            ci_hi: r.ci95.1,
            regret: r.regret,
            seed: r.seed,
        }
    }

    fn failed(param: (&str, f64), kl: f64, policy: &str, seed: u64) -> Self {
        ResultRow {
            param_name: param.0.to_string(),
            param_value: param.1,
            kl_alpha_beta0: kl,
            policy: policy.to_string(),
            n_runs: 0,
            mean_cost: f64::NAN,
            stderr: f64::NAN,
            ci_lo: f64::NAN,
            ci_hi: f64::NAN,
            regret: f64::NAN,
            seed,
        }
    }

    /// The row's numbers as a report, for comparisons in tests and tooling.
    pub fn report(&self) -> CostReport {
        CostReport {
            n_runs: self.n_runs,
            mean_cost: self.mean_cost,
            std_err: self.stderr,
            ci95: (self.ci_lo, self.ci_hi),
            regret: self.regret,
            seed: self.seed,
        }
    }
}

fn sig9<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format_sig(*x, 9))
}

/// `%g`-style formatting with `digits` significant digits.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -5 || exp >= digits as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mant), exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rows of an experiment plus human-readable notes (tuned thresholds, failures).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentTable {
    pub rows: Vec<ResultRow>,
    pub notes: Vec<String>,
}

impl ExperimentTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_csv(&self.rows, w)
    }

    pub fn find(&self, param_value: f64, policy: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.param_value == param_value && r.policy == policy)
    }
}

pub const CSV_HEADER: &str =
    "param_name,param_value,kl_alpha_beta0,policy,n_runs,mean_cost,stderr,ci_lo,ci_hi,regret,seed";

pub fn write_csv<W: Write>(rows: &[ResultRow], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Parameter swept by [`regret_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "param", content = "values", rename_all = "lowercase")]
pub enum Sweep {
    Rho(Vec<f64>),
    Lambda(Vec<f64>),
    Delta(Vec<f64>),
}

impl Sweep {
    pub fn name(&self) -> &'static str {
        match self {
            Sweep::Rho(_) => "rho",
            Sweep::Lambda(_) => "lambda",
            Sweep::Delta(_) => "delta",
        }
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Sweep::Rho(v) | Sweep::Lambda(v) | Sweep::Delta(v) => v,
        }
    }
}

/// Specs indexed by the swept parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum SpecFamily {
    Paper { delta: f64, rho: f64, lambda: f64 },
    /// A fixed spec; only `rho` and `lambda` can be swept.
    Fixed(ProblemSpec),
}

impl SpecFamily {
    pub fn instantiate(&self, sweep: &Sweep, value: f64) -> Result<ProblemSpec> {
        match (self, sweep) {
            (SpecFamily::Paper { delta, rho, lambda }, _) => {
                let (d, r, l) = match sweep {
                    Sweep::Rho(_) => (*delta, value, *lambda),
                    Sweep::Lambda(_) => (*delta, *rho, value),
                    Sweep::Delta(_) => (value, *rho, *lambda),
                };
                Ok(make_paper_family(d)?.with_rho(r).with_lambda(l))
            }
            (SpecFamily::Fixed(s), Sweep::Rho(_)) => Ok(s.clone().with_rho(value)),
            (SpecFamily::Fixed(s), Sweep::Lambda(_)) => Ok(s.clone().with_lambda(value)),
            (SpecFamily::Fixed(_), Sweep::Delta(_)) => Err(Error::Config(
                "a delta sweep needs the \"paper\" family".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub policies: Vec<PolicyName>,
    pub grid: GridConfig,
    pub qcd_h_grid: Vec<f64>,
    pub opts: SimOptions,
    /// Adds the closed-form approximated cost of the low-complexity policy as an `approx` row.
    pub approx_row: bool,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            policies: PolicyName::ALL.to_vec(),
            grid: GridConfig::default(),
            qcd_h_grid: default_qcd_h_grid(),
            opts: SimOptions::default(),
            approx_row: true,
        }
    }
}

fn evaluate_named(
    spec: &ProblemSpec,
    name: PolicyName,
    settings: &SweepSettings,
) -> Result<(CostReport, Option<f64>)> {
    let opts = &settings.opts;
    match name {
        PolicyName::Low => {
            let kind = PolicyKind::LowComplexity(low_complexity_policy(spec)?);
            Ok((estimate_cost(spec, &kind, opts)?, None))
        }
        PolicyName::Grid => {
            let kind = PolicyKind::GridOptimal(Arc::new(solve_grid(spec, &settings.grid)?));
            Ok((estimate_cost(spec, &kind, opts)?, None))
        }
        PolicyName::Qcd | PolicyName::Dqcd => {
            let direct = name == PolicyName::Dqcd;
            let (h, report) = tune_qcd(spec, direct, &settings.qcd_h_grid, opts)?;
            Ok((report, Some(h)))
        }
        PolicyName::Oracle => Ok((estimate_cost(spec, &PolicyKind::oracle(spec), opts)?, None)),
    }
}

/// Evaluates every requested policy at each swept value with common random numbers.
///
/// Failures are reported as `NaN` rows plus a note; the sweep carries on.
pub fn regret_sweep(family: &SpecFamily, sweep: &Sweep, settings: &SweepSettings) -> ExperimentTable {
    let mut table = ExperimentTable::default();
    let seed = settings.opts.seed;
    for &value in sweep.values() {
        let param = (sweep.name(), value);
        let spec = match family.instantiate(sweep, value) {
            Ok(s) => s,
            Err(e) => {
                table.notes.push(format!("{}={value}: {e}", sweep.name()));
                for name in &settings.policies {
                    table.rows.push(ResultRow::failed(param, f64::NAN, name.as_str(), seed));
                }
                if settings.approx_row {
                    table.rows.push(ResultRow::failed(param, f64::NAN, "approx", seed));
                }
                continue;
            }
        };
        let kl = kl_divergence(&spec.alpha, &spec.betas[0]).unwrap_or(f64::NAN);
        for &name in &settings.policies {
            match evaluate_named(&spec, name, settings) {
                Ok((report, h)) => {
                    if let Some(h) = h {
                        table
                            .notes
                            .push(format!("{}={value}: {name} tuned h={h}", sweep.name()));
                    }
                    table
                        .rows
                        .push(ResultRow::from_report(param, kl, name.as_str(), &report));
                }
                Err(e) => {
                    table.notes.push(format!("{}={value}: {name}: {e}", sweep.name()));
                    table.rows.push(ResultRow::failed(param, kl, name.as_str(), seed));
                }
            }
        }
        if settings.approx_row {
            let cost = low_complexity_policy(&spec)
                .and_then(|th| approx_total_cost_saturating(&spec, &th));
            match cost {
                Ok(c) => {
                    let oracle = oracle_cost_closed_form(&spec);
                    table.rows.push(ResultRow {
                        n_runs: 0,
                        mean_cost: c,
                        stderr: 0.0,
                        ci_lo: c,
                        ci_hi: c,
                        regret: c - oracle,
                        ..ResultRow::failed(param, kl, "approx", seed)
                    });
                }
                Err(e) => {
                    table.notes.push(format!("{}={value}: approx: {e}", sweep.name()));
                    table.rows.push(ResultRow::failed(param, kl, "approx", seed));
                }
            }
        }
    }
    table
}

/// Fixed-horizon comparison with unrestricted level changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalySettings {
    pub delta: f64,
    pub lambdas: Vec<f64>,
    pub horizon: u64,
    pub n_runs: usize,
    /// Discount used only to build the low-complexity thresholds.
    pub policy_rho: f64,
    pub fixed_h: f64,
    pub qcd_h_grid: Vec<f64>,
    /// Detection baselines jump straight to the top level once they declare.
    pub direct_qcd: bool,
    pub grid: GridConfig,
    pub seed: u64,
}

impl Default for AnomalySettings {
    fn default() -> Self {
        AnomalySettings {
            delta: 0.02,
            lambdas: vec![0.01, 0.03, 0.1, 0.3],
            horizon: 50,
            n_runs: 20_000,
            policy_rho: 0.98,
            fixed_h: 0.95,
            qcd_h_grid: default_qcd_h_grid(),
            direct_qcd: true,
            grid: GridConfig::default(),
            seed: 0,
        }
    }
}

pub const ANOMALY_POLICIES: [&str; 4] = ["low", "dp", "qcd_fixed", "qcd_tuned"];

fn anomaly_rows(
    spec: &ProblemSpec,
    s: &AnomalySettings,
    opts: &SimOptions,
) -> Result<Vec<(&'static str, CostReport, Option<f64>)>> {
    let low = PolicyKind::LowComplexity(low_complexity_policy(&spec.clone().with_rho(s.policy_rho))?);
    let dp = PolicyKind::FiniteHorizon(Arc::new(solve_finite_horizon(
        spec,
        s.horizon as usize,
        &s.grid,
        false,
    )?));
    let fixed = PolicyKind::qcd(spec, s.fixed_h, s.direct_qcd)?;
    let (h, tuned) = tune_qcd(spec, s.direct_qcd, &s.qcd_h_grid, opts)?;
    Ok(vec![
        ("low", estimate_cost(spec, &low, opts)?, None),
        ("dp", estimate_cost(spec, &dp, opts)?, None),
        ("qcd_fixed", estimate_cost(spec, &fixed, opts)?, None),
        ("qcd_tuned", tuned, Some(h)),
    ])
}

pub fn anomaly_experiment(s: &AnomalySettings) -> ExperimentTable {
    let opts = SimOptions {
        horizon_mode: HorizonMode::FixedT(s.horizon),
        constrained: false,
        n_runs: s.n_runs,
        seed: s.seed,
    };
    let mut table = ExperimentTable::default();
    for &lambda in &s.lambdas {
        let param = ("lambda", lambda);
        let result = make_paper_family(s.delta)
            .map(|f| f.with_lambda(lambda))
            .and_then(|spec| {
                let kl = kl_divergence(&spec.alpha, &spec.betas[0])?;
                Ok((kl, anomaly_rows(&spec, s, &opts)?))
            });
        match result {
            Ok((kl, rows)) => {
                for (name, report, h) in rows {
                    if let Some(h) = h {
                        table.notes.push(format!("lambda={lambda}: {name} h={h}"));
                    }
                    table.rows.push(ResultRow::from_report(param, kl, name, &report));
                }
            }
            Err(e) => {
                table.notes.push(format!("lambda={lambda}: {e}"));
                for name in ANOMALY_POLICIES {
                    table.rows.push(ResultRow::failed(param, f64::NAN, name, s.seed));
                }
            }
        }
    }
    table
}
