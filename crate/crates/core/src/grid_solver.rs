//! Grid-approximated value iteration for the belief MDP.
//!
//! The belief interval is split into `N` uniform cells with one representative
//! each. Action values are
//!
//! ```text
//! J_a(pi) = c_i[a] + rho * sum_z sigma_a(pi, z) * (c_p[z] + V_a(T_a(pi, z)))
//! V_k(pi) = min(J_k(pi), J_{min(k+1, A)}(pi))
//! ```
//!
//! evaluated on the representatives, with `V` at the off-grid successor
//! beliefs read back through the configured interpolation. Sweeps are Jacobi
//! style (every `J` from the previous `V`), so parallel evaluation is
//! bit-identical to the sequential order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{observation_likelihood, posterior, predict};
use crate::error::{Error, Result};
use crate::model::ProblemSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RepresentativeRule {
    #[default]
    CellMidpoint,
    CellLeftEdge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Linear,
    NearestCell,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub num_cells: usize,
    pub representative_rule: RepresentativeRule,
    pub epsilon: f64,
    pub interpolation: Interpolation,
    pub max_sweeps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            num_cells: 1000,
            representative_rule: RepresentativeRule::CellMidpoint,
            epsilon: 1e-8,
            interpolation: Interpolation::Linear,
            max_sweeps: 100_000,
        }
    }
}

impl GridConfig {
    pub fn with_cells(mut self, n: usize) -> Self {
        self.num_cells = n;
        self
    }

    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.epsilon = eps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_cells < 2 {
            return Err(Error::InvalidParameter(format!(
                "grid needs at least 2 cells, got {}",
                self.num_cells
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_sweeps == 0 {
            return Err(Error::InvalidParameter("max_sweeps must be positive".into()));
        }
        Ok(())
    }
}

/// Uniform partition of `[0, 1]` with one representative per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefGrid {
    points: Vec<f64>,
    rule: RepresentativeRule,
    interpolation: Interpolation,
}

/// Interpolation stencil: `(1 - w) * v[lo] + w * v[lo + 1]` (or `v[lo]` when `w == 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Stencil {
    pub lo: usize,
    pub w: f64,
}

impl BeliefGrid {
    pub fn new(n: usize, rule: RepresentativeRule, interpolation: Interpolation) -> Self {
        let offset = rule.offset();
        let points = (0..n).map(|j| (j as f64 + offset) / n as f64).collect();
        BeliefGrid {
            points,
            rule,
            interpolation,
        }
    }

    pub fn from_config(cfg: &GridConfig) -> Self {
        Self::new(cfg.num_cells, cfg.representative_rule, cfg.interpolation)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the cell containing `pi`.
    pub fn cell_of(&self, pi: f64) -> usize {
        cell_index(self.points.len(), pi)
    }

    pub(crate) fn stencil(&self, pi: f64) -> Stencil {
        match self.interpolation {
            Interpolation::NearestCell => Stencil {
                lo: self.cell_of(pi),
                w: 0.0,
            },
            Interpolation::Linear => {
                let n = self.points.len();
                let u = pi * n as f64 - self.rule.offset();
                let r = u.round();
                // Snap to a representative when pi lands on one up to rounding.
                let u = if (u - r).abs() < 1e-9 { r } else { u };
                if u <= 0.0 {
                    return Stencil { lo: 0, w: 0.0 };
                }
                if u >= (n - 1) as f64 {
                    return Stencil { lo: n - 1, w: 0.0 };
                }
                let lo = u.floor() as usize;
                Stencil { lo, w: u - lo as f64 }
            }
        }
    }

    pub fn interpolate(&self, values: &[f64], pi: f64) -> f64 {
        read(values, self.stencil(pi))
    }
}

impl RepresentativeRule {
    fn offset(self) -> f64 {
        match self {
            RepresentativeRule::CellMidpoint => 0.5,
            RepresentativeRule::CellLeftEdge => 0.0,
        }
    }
}

#[inline]
fn cell_index(n: usize, pi: f64) -> usize {
    ((pi * n as f64).floor().max(0.0) as usize).min(n - 1)
}

#[inline]
pub(crate) fn read(values: &[f64], s: Stencil) -> f64 {
    if s.w == 0.0 {
        values[s.lo]
    } else {
        (1.0 - s.w) * values[s.lo] + s.w * values[s.lo + 1]
    }
}

/// One successor term of a Bellman backup: `coef * V(stencil)`.
#[derive(Debug, Clone, Copy)]
struct Branch {
    stencil: Stencil,
    coef: f64,
}

/// Precomputed backups for every (action, representative) pair.
///
/// `J_a(pi_j) = base[a][j] + sum_z branches[a][j*Z + z].coef * V_a(stencil)`.
struct Backups {
    base: Vec<Vec<f64>>,
    branches: Vec<Vec<Branch>>,
    z: usize,
}

impl Backups {
    fn build(spec: &ProblemSpec, grid: &BeliefGrid, discount: f64) -> Self {
        let z_n = spec.num_obs;
        let mut base = Vec::with_capacity(spec.num_actions + 1);
        let mut branches = Vec::with_capacity(spec.num_actions + 1);
        for a in 0..=spec.num_actions {
            let mut b = Vec::with_capacity(grid.len());
            let mut br = Vec::with_capacity(grid.len() * z_n);
            for &pi in grid.points() {
                let sigma = observation_likelihood(spec, pi, a);
                let p = predict(pi, spec.lambda);
                let mut acc = spec.c_i[a];
                for z in 0..z_n {
                    acc += discount * sigma[z] * spec.c_p[z];
                    let next = posterior(p, spec.betas[a][z], spec.alpha[z]);
                    br.push(Branch {
                        stencil: grid.stencil(next),
                        coef: discount * sigma[z],
                    });
                }
                b.push(acc);
            }
            base.push(b);
            branches.push(br);
        }
        Backups {
            base,
            branches,
            z: z_n,
        }
    }

    #[inline]
    fn eval(&self, a: usize, j: usize, next_values: &[f64]) -> f64 {
        let br = &self.branches[a][j * self.z..(j + 1) * self.z];
        let mut acc = self.base[a][j];
        for b in br {
            acc += b.coef * read(next_values, b.stencil);
        }
        acc
    }
}

/// Minimum of `J_k` and `J_{k+1}`; ties keep the lower action.
#[inline]
fn escalate_or_hold(j_lo: f64, j_hi: f64, lo: usize, hi: usize) -> (f64, usize) {
    if j_hi < j_lo {
        (j_hi, hi)
    } else {
        (j_lo, lo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawGridSolution", into = "RawGridSolution")]
pub struct GridSolution {
    pub grid: Vec<f64>,
    /// `j_table[a][j]` is `J_a` at representative `j`.
    pub j_table: Vec<Vec<f64>>,
    /// `v_table[k][j]` is `V_k` at representative `j` for current level `k`.
    pub v_table: Vec<Vec<f64>>,
    /// `policy[k][j]` is the chosen action for current level `k`.
    pub policy: Vec<Vec<usize>>,
    pub sweeps_used: usize,
    pub final_residual: f64,
    pub representative_rule: RepresentativeRule,
    pub interpolation: Interpolation,
    /// Sup-norm change of `V` after every sweep.
    pub residual_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawGridSolution {
    grid: Vec<f64>,
    #[serde(rename = "J")]
    j: Vec<Vec<f64>>,
    #[serde(rename = "V")]
    v: Vec<Vec<f64>>,
    policy: Vec<Vec<usize>>,
    residual: f64,
    sweeps: usize,
}

impl From<RawGridSolution> for GridSolution {
    fn from(r: RawGridSolution) -> Self {
        let rule = if r.grid.first() == Some(&0.0) {
            RepresentativeRule::CellLeftEdge
        } else {
            RepresentativeRule::CellMidpoint
        };
        GridSolution {
            grid: r.grid,
            j_table: r.j,
            v_table: r.v,
            policy: r.policy,
            sweeps_used: r.sweeps,
            final_residual: r.residual,
            representative_rule: rule,
            interpolation: Interpolation::Linear,
            residual_history: Vec::new(),
        }
    }
}

impl From<GridSolution> for RawGridSolution {
    fn from(s: GridSolution) -> Self {
        RawGridSolution {
            grid: s.grid,
            j: s.j_table,
            v: s.v_table,
            policy: s.policy,
            residual: s.final_residual,
            sweeps: s.sweeps_used,
        }
    }
}

impl GridSolution {
    pub fn num_actions(&self) -> usize {
        self.j_table.len() - 1
    }

    pub fn belief_grid(&self) -> BeliefGrid {
        BeliefGrid::new(self.grid.len(), self.representative_rule, self.interpolation)
    }

    /// Action prescribed for belief `pi` at current level `level`, read from the containing cell.
    pub fn action(&self, pi: f64, level: usize) -> usize {
        self.policy[level][cell_index(self.grid.len(), pi)]
    }

    /// One Bellman backup at an arbitrary belief using the solved `V` tables.
    pub fn lookahead(&self, spec: &ProblemSpec, pi: f64) -> Vec<f64> {
        let grid = self.belief_grid();
        let p = predict(pi, spec.lambda);
        (0..=spec.num_actions)
            .map(|a| {
                let sigma = observation_likelihood(spec, pi, a);
                let mut acc = spec.c_i[a];
                for z in 0..spec.num_obs {
                    let next = posterior(p, spec.betas[a][z], spec.alpha[z]);
                    acc += spec.rho
                        * sigma[z]
                        * (spec.c_p[z] + grid.interpolate(&self.v_table[a], next));
                }
                acc
            })
            .collect()
    }

    /// `V_level(pi)` from one Bellman backup; exact in `pi`, unlike table interpolation.
    pub fn lookahead_value(&self, spec: &ProblemSpec, pi: f64, level: usize) -> f64 {
        let j = self.lookahead(spec, pi);
        let hi = (level + 1).min(spec.num_actions);
        escalate_or_hold(j[level], j[hi], level, hi).0
    }
}

/// Interpolated `V_level(pi)` from the solved table.
pub fn eval_value(sol: &GridSolution, pi: f64, level: usize) -> f64 {
    sol.belief_grid().interpolate(&sol.v_table[level], pi)
}

/// Value of the most stringent level, which the change can no longer affect.
pub fn closed_form_va(spec: &ProblemSpec) -> f64 {
    (spec.c_i[spec.num_actions] + spec.rho * spec.baseline_cost()) / (1.0 - spec.rho)
}

/// Runs grid value iteration until the sup-norm change of `V` drops to `cfg.epsilon`.
pub fn solve_grid(spec: &ProblemSpec, cfg: &GridConfig) -> Result<GridSolution> {
    cfg.validate()?;
    spec.check_dims()?;
    let grid = BeliefGrid::from_config(cfg);
    let backups = Backups::build(spec, &grid, spec.rho);
    let a_max = spec.num_actions;
    let n = grid.len();

    let mut v = vec![vec![0.0; n]; a_max + 1];
    let mut j_tab = vec![vec![0.0; n]; a_max + 1];
    let mut v_next = vec![vec![0.0; n]; a_max + 1];
    let mut policy = vec![vec![0usize; n]; a_max + 1];
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;

    for _ in 0..cfg.max_sweeps {
        j_tab.par_iter_mut().enumerate().for_each(|(a, row)| {
            row.par_iter_mut()
                .with_min_len(256)
                .enumerate()
                .for_each(|(j, x)| *x = backups.eval(a, j, &v[a]));
        });
        residual = 0.0;
        for k in 0..=a_max {
            let hi = (k + 1).min(a_max);
            for j in 0..n {
                let (val, act) = escalate_or_hold(j_tab[k][j], j_tab[hi][j], k, hi);
                residual = f64::max(residual, (val - v[k][j]).abs());
                v_next[k][j] = val;
                policy[k][j] = act;
            }
        }
        std::mem::swap(&mut v, &mut v_next);
        history.push(residual);
        if residual <= cfg.epsilon {
            return Ok(GridSolution {
                grid: grid.points().to_vec(),
                j_table: j_tab,
                v_table: v,
                policy,
                sweeps_used: history.len(),
                final_residual: residual,
                representative_rule: cfg.representative_rule,
                interpolation: cfg.interpolation,
                residual_history: history,
            });
        }
    }
    Err(Error::NonConvergence {
        sweeps: cfg.max_sweeps,
        residual,
    })
}

/// Sup-norm change of `V` produced by one more Bellman sweep from the stored tables.
pub fn bellman_residual(spec: &ProblemSpec, sol: &GridSolution) -> f64 {
    let grid = sol.belief_grid();
    let backups = Backups::build(spec, &grid, spec.rho);
    let a_max = spec.num_actions;
    let j_tab: Vec<Vec<f64>> = (0..=a_max)
        .map(|a| (0..grid.len()).map(|j| backups.eval(a, j, &sol.v_table[a])).collect())
        .collect();
    let mut r = 0.0_f64;
    for k in 0..=a_max {
        let hi = (k + 1).min(a_max);
        for j in 0..grid.len() {
            let (val, _) = escalate_or_hold(j_tab[k][j], j_tab[hi][j], k, hi);
            r = r.max((val - sol.v_table[k][j]).abs());
        }
    }
    r
}

/// Nondecreasing escalation thresholds `pi_1 <= ... <= pi_A`.
///
/// `f64::INFINITY` marks a level that is never reached; it serializes as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    #[serde(with = "sentinel")]
    pub thresholds: Vec<f64>,
}

mod sentinel {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let opt: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(opt.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
    }
}

impl ThresholdPolicy {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter(format!(
                "thresholds must be nondecreasing: {thresholds:?}"
            )));
        }
        if thresholds.iter().any(|t| t.is_nan() || *t < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "thresholds must be nonnegative: {thresholds:?}"
            )));
        }
        Ok(ThresholdPolicy { thresholds })
    }

    pub fn num_actions(&self) -> usize {
        self.thresholds.len()
    }

    /// Highest level whose threshold is at or below `pi`.
    pub fn target_level(&self, pi: f64) -> usize {
        self.thresholds.iter().take_while(|t| **t <= pi).count()
    }
}

/// Thresholds read off a solved grid policy, plus how far the policy is from threshold form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedThresholds {
    /// Monotone thresholds (running maximum of `raw`).
    pub policy: ThresholdPolicy,
    /// First representative where level `a - 1` escalates to `a`, before monotone repair.
    #[serde(with = "sentinel")]
    pub raw: Vec<f64>,
    /// Levels whose raw threshold is below the previous level's.
    pub order_violations: usize,
    /// Representatives above a threshold where the policy falls back to holding.
    pub switch_back_violations: usize,
}

impl ExtractedThresholds {
    pub fn violations(&self) -> usize {
        self.order_violations + self.switch_back_violations
    }
}

pub fn extract_thresholds(sol: &GridSolution) -> ExtractedThresholds {
    let a_max = sol.num_actions();
    let mut raw = Vec::with_capacity(a_max);
    let mut switch_back = 0;
    for a in 1..=a_max {
        let row = &sol.policy[a - 1];
        match row.iter().position(|&act| act == a) {
            Some(j) => {
                raw.push(sol.grid[j]);
                switch_back += row[j..].iter().filter(|&&act| act != a).count();
            }
            None => raw.push(f64::INFINITY),
        }
    }
    let mut order_violations = 0;
    let mut running = f64::NEG_INFINITY;
    let mono: Vec<f64> = raw
        .iter()
        .map(|&t| {
            if t < running {
                order_violations += 1;
            }
            running = running.max(t);
            running
        })
        .collect();
    ExtractedThresholds {
        policy: ThresholdPolicy { thresholds: mono },
        raw,
        order_violations,
        switch_back_violations: switch_back,
    }
}

/// Backward-induction solution over a fixed horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteHorizonSolution {
    pub grid: Vec<f64>,
    pub horizon: usize,
    pub constrained: bool,
    pub representative_rule: RepresentativeRule,
    pub interpolation: Interpolation,
    /// `values[t][k][j]`; the level axis has length 1 when unconstrained.
    pub values: Vec<Vec<Vec<f64>>>,
    /// `policy[t][k][j]`, same layout as `values`.
    pub policy: Vec<Vec<Vec<usize>>>,
}

impl FiniteHorizonSolution {
    fn level_index(&self, level: usize) -> usize {
        if self.constrained {
            level
        } else {
            0
        }
    }

    pub fn belief_grid(&self) -> BeliefGrid {
        BeliefGrid::new(self.grid.len(), self.representative_rule, self.interpolation)
    }

    /// Action at decision time `t` (0-based) for belief `pi` and current level `level`.
    pub fn action(&self, t: usize, pi: f64, level: usize) -> usize {
        let t = t.min(self.horizon - 1);
        self.policy[t][self.level_index(level)][cell_index(self.grid.len(), pi)]
    }

    pub fn value(&self, t: usize, pi: f64, level: usize) -> f64 {
        self.belief_grid()
            .interpolate(&self.values[t][self.level_index(level)], pi)
    }
}

/// Backward induction for a known horizon of `horizon` decision times.
///
/// The process runs for exactly `horizon` slots: actions `a_0..a_{horizon-1}` are
/// paid, observations arrive at times `1..horizon-1`, with no discounting.
/// With `constrained` the action set at level `k` is `{k, k+1}`, otherwise any
/// level may be chosen at any time.
pub fn solve_finite_horizon(
    spec: &ProblemSpec,
    horizon: usize,
    cfg: &GridConfig,
    constrained: bool,
) -> Result<FiniteHorizonSolution> {
    cfg.validate()?;
    spec.check_dims()?;
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    let grid = BeliefGrid::from_config(cfg);
    let backups = Backups::build(spec, &grid, 1.0);
    let a_max = spec.num_actions;
    let n = grid.len();
    let levels = if constrained { a_max + 1 } else { 1 };

    let mut values = vec![Vec::<Vec<f64>>::new(); horizon];
    let mut policy = vec![Vec::new(); horizon];
    for t in (0..horizon).rev() {
        let last = t + 1 == horizon;
        let j_tab: Vec<Vec<f64>> = (0..=a_max)
            .map(|a| {
                if last {
                    vec![spec.c_i[a]; n]
                } else {
                    let next: &[f64] = &values[t + 1][if constrained { a } else { 0 }];
                    (0..n)
                        .into_par_iter()
                        .with_min_len(256)
                        .map(|j| backups.eval(a, j, next))
                        .collect()
                }
            })
            .collect();
        let mut v_t = vec![vec![0.0; n]; levels];
        let mut p_t = vec![vec![0usize; n]; levels];
        for k in 0..levels {
            for j in 0..n {
                let (val, act) = if constrained {
                    let hi = (k + 1).min(a_max);
                    escalate_or_hold(j_tab[k][j], j_tab[hi][j], k, hi)
                } else {
                    (1..=a_max).fold((j_tab[0][j], 0), |(bv, ba), a| {
                        escalate_or_hold(bv, j_tab[a][j], ba, a)
                    })
                };
                v_t[k][j] = val;
                p_t[k][j] = act;
            }
        }
        values[t] = v_t;
        policy[t] = p_t;
    }
    Ok(FiniteHorizonSolution {
        grid: grid.points().to_vec(),
        horizon,
        constrained,
        representative_rule: cfg.representative_rule,
        interpolation: cfg.interpolation,
        values,
        policy,
    })
}
