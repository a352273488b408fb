//! Small-perturbation approximation of the belief MDP.
//!
//! When consecutive intervention distributions are close, the expected value
//! of the next-step value function is replaced by its value at the mean
//! belief `pi + lambda (1 - pi)`. The resulting system has deterministic
//! belief dynamics, threshold-structured optimal policies, closed-form
//! bounds on those thresholds, and a closed-form total cost.

use serde::{Deserialize, Serialize};

use crate::belief::predict;
use crate::error::{Error, Result};
use crate::grid_solver::{
    extract_thresholds, read, BeliefGrid, GridConfig, GridSolution, Stencil, ThresholdPolicy,
};
use crate::model::{dot, ProblemSpec};

/// Cost differences between consecutive levels and against the pre-change distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostDeltas {
    /// `a_p[a] = sum_z (beta_a(z) - alpha(z)) c_p(z)` for `a` in `0..=A`.
    pub a_p: Vec<f64>,
    /// `d_p[a - 1] = sum_z (beta_a(z) - beta_{a-1}(z)) c_p(z)` for `a` in `1..=A`.
    pub d_p: Vec<f64>,
    /// `d_i[a - 1] = c_i[a] - c_i[a-1]` for `a` in `1..=A`.
    pub d_i: Vec<f64>,
    /// `sum_z alpha(z) c_p(z)`.
    pub b_p: f64,
}

impl CostDeltas {
    /// `D_p^a` for `a >= 1`.
    pub fn dp(&self, a: usize) -> f64 {
        self.d_p[a - 1]
    }

    /// `D_i^a` for `a >= 1`.
    pub fn di(&self, a: usize) -> f64 {
        self.d_i[a - 1]
    }
}

pub fn cost_deltas(spec: &ProblemSpec) -> CostDeltas {
    let a_max = spec.num_actions;
    let diff_cost = |p: &[f64], q: &[f64]| -> f64 {
        p.iter()
            .zip(q)
            .zip(&spec.c_p)
            .map(|((x, y), c)| (x - y) * c)
            .sum()
    };
    CostDeltas {
        a_p: (0..=a_max)
            .map(|a| diff_cost(&spec.betas[a], &spec.alpha))
            .collect(),
        d_p: (1..=a_max)
            .map(|a| diff_cost(&spec.betas[a], &spec.betas[a - 1]))
            .collect(),
        d_i: (1..=a_max).map(|a| spec.c_i[a] - spec.c_i[a - 1]).collect(),
        b_p: dot(&spec.alpha, &spec.c_p),
    }
}

/// Default grid for the approximated system: it is cheap per sweep, so use a fine grid.
pub fn approx_grid_config() -> GridConfig {
    GridConfig {
        num_cells: 10_000,
        epsilon: 1e-10,
        ..GridConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxSolution {
    /// Escalation thresholds of the approximated optimal policy.
    pub thresholds: ThresholdPolicy,
    /// Approximated optimal cost from belief 0 at level 0.
    pub value_at_zero: f64,
    /// Value and action tables of the approximated system.
    pub tables: GridSolution,
}

/// Value iteration on the approximated Bellman system.
pub fn solve_approx(spec: &ProblemSpec, cfg: &GridConfig) -> Result<ApproxSolution> {
    cfg.validate()?;
    spec.check_dims()?;
    let deltas = cost_deltas(spec);
    let grid = BeliefGrid::from_config(cfg);
    let a_max = spec.num_actions;
    let n = grid.len();
    let rho = spec.rho;

    // deterministic successor and the per-action affine part of J~
    let next: Vec<Stencil> = grid
        .points()
        .iter()
        .map(|&pi| grid.stencil(predict(pi, spec.lambda)))
        .collect();
    let base: Vec<Vec<f64>> = (0..=a_max)
        .map(|a| {
            grid.points()
                .iter()
                .map(|&pi| {
                    spec.c_i[a] + rho * deltas.b_p + predict(pi, spec.lambda) * rho * deltas.a_p[a]
                })
                .collect()
        })
        .collect();

    let mut v = vec![vec![0.0; n]; a_max + 1];
    let mut v_next = vec![vec![0.0; n]; a_max + 1];
    let mut j_tab = vec![vec![0.0; n]; a_max + 1];
    let mut policy = vec![vec![0usize; n]; a_max + 1];
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;

    for _ in 0..cfg.max_sweeps {
        for a in 0..=a_max {
            for j in 0..n {
                j_tab[a][j] = base[a][j] + rho * read(&v[a], next[j]);
            }
        }
        residual = 0.0;
        for k in 0..=a_max {
            let hi = (k + 1).min(a_max);
            for j in 0..n {
                let (val, act) = if j_tab[hi][j] < j_tab[k][j] {
                    (j_tab[hi][j], hi)
                } else {
                    (j_tab[k][j], k)
                };
                residual = residual.max((val - v[k][j]).abs());
                v_next[k][j] = val;
                policy[k][j] = act;
            }
        }
        std::mem::swap(&mut v, &mut v_next);
        history.push(residual);
        if residual <= cfg.epsilon {
            let tables = GridSolution {
                grid: grid.points().to_vec(),
                j_table: j_tab,
                v_table: v,
                policy,
                sweeps_used: history.len(),
                final_residual: residual,
                representative_rule: cfg.representative_rule,
                interpolation: cfg.interpolation,
                residual_history: history,
            };
            let thresholds = extract_thresholds(&tables).policy;
            let value_at_zero = approx_value(spec, &deltas, &tables, 0.0, 0);
            return Ok(ApproxSolution {
                thresholds,
                value_at_zero,
                tables,
            });
        }
    }
    Err(Error::NonConvergence {
        sweeps: cfg.max_sweeps,
        residual,
    })
}

/// `J~_a(pi)` at an arbitrary belief via one backup on the solved tables.
pub fn approx_action_value(
    spec: &ProblemSpec,
    deltas: &CostDeltas,
    tables: &GridSolution,
    a: usize,
    pi: f64,
) -> f64 {
    let p = predict(pi, spec.lambda);
    let grid = tables.belief_grid();
    spec.c_i[a]
        + spec.rho * deltas.b_p
        + p * spec.rho * deltas.a_p[a]
        + spec.rho * grid.interpolate(&tables.v_table[a], p)
}

/// `V~_level(pi)` via one backup on the solved tables.
pub fn approx_value(
    spec: &ProblemSpec,
    deltas: &CostDeltas,
    tables: &GridSolution,
    pi: f64,
    level: usize,
) -> f64 {
    let hi = (level + 1).min(spec.num_actions);
    let lo_v = approx_action_value(spec, deltas, tables, level, pi);
    let hi_v = approx_action_value(spec, deltas, tables, hi, pi);
    lo_v.min(hi_v)
}

/// Approximated gain of escalating from `a` to `a + 1` at belief `pi`.
///
/// Negative values favour escalation.
pub fn approx_difference(
    spec: &ProblemSpec,
    deltas: &CostDeltas,
    tables: &GridSolution,
    a: usize,
    pi: f64,
) -> f64 {
    let p = predict(pi, spec.lambda);
    let grid = tables.belief_grid();
    deltas.di(a + 1)
        + p * spec.rho * deltas.dp(a + 1)
        + spec.rho
            * (grid.interpolate(&tables.v_table[a + 1], p) - grid.interpolate(&tables.v_table[a], p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelBounds {
    pub action: usize,
    pub lower: f64,
    pub upper: f64,
    pub raw_lower: f64,
    pub raw_upper: f64,
    /// The closed-form lower bound exceeds the upper bound.
    pub inverted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdBounds {
    pub levels: Vec<LevelBounds>,
}

impl ThresholdBounds {
    pub fn level(&self, a: usize) -> &LevelBounds {
        &self.levels[a - 1]
    }

    pub fn upper(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.upper).collect()
    }

    pub fn inversions(&self) -> Vec<usize> {
        self.levels
            .iter()
            .filter(|l| l.inverted)
            .map(|l| l.action)
            .collect()
    }
}

/// Unclamped upper bound on the approximated switching belief from `a - 1` to `a`.
pub(crate) fn raw_upper_bound(spec: &ProblemSpec, deltas: &CostDeltas, a: usize) -> Result<f64> {
    let dp = deltas.dp(a);
    if !(dp < 0.0) {
        return Err(Error::NonNegativeCostDelta { action: a, value: dp });
    }
    let l = spec.lambda;
    Ok(-deltas.di(a) / ((1.0 - l) * spec.rho * dp) - l / (1.0 - l))
}

/// Closed-form lower and upper bounds on each approximated threshold, clamped to `[0, 1]`.
pub fn threshold_bounds(spec: &ProblemSpec, deltas: &CostDeltas) -> Result<ThresholdBounds> {
    let a_max = spec.num_actions;
    let rho = spec.rho;
    let l = spec.lambda;
    let mut levels = Vec::with_capacity(a_max);
    for a in 1..=a_max {
        let upper = raw_upper_bound(spec, deltas, a)?;
        let tail: f64 = (a + 1..=a_max)
            .map(|j| rho.powi((j - a) as i32) * (deltas.di(j) + rho * deltas.dp(j)))
            .sum();
        let lower = upper + tail / (-(1.0 - l) * rho * deltas.dp(a));
        levels.push(LevelBounds {
            action: a,
            lower: lower.clamp(0.0, 1.0),
            upper: upper.clamp(0.0, 1.0),
            raw_lower: lower,
            raw_upper: upper,
            inverted: lower > upper,
        });
    }
    Ok(ThresholdBounds { levels })
}

/// Number of idle-path steps `t` until `1 - (1 - lambda)^t` reaches `threshold`.
pub fn switch_time(threshold: f64, lambda: f64) -> Result<u64> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::ThresholdOutOfRange {
            action: 0,
            value: threshold,
        });
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "lambda={lambda} outside (0,1]"
        )));
    }
    if threshold == 0.0 {
        return Ok(0);
    }
    if lambda == 1.0 {
        return Ok(1);
    }
    let x = (-threshold).ln_1p() / (-lambda).ln_1p();
    // the logarithm is only an estimate near path hits; settle on the exact path
    let mut t = x.ceil().max(1.0) as u64;
    while t > 1 && idle_belief(lambda, t - 1) >= threshold {
        t -= 1;
    }
    while idle_belief(lambda, t) < threshold {
        t += 1;
    }
    Ok(t)
}

/// Belief after `s` idle steps from 0.
pub fn idle_belief(lambda: f64, s: u64) -> f64 {
    match i32::try_from(s) {
        Ok(n) => 1.0 - (1.0 - lambda).powi(n),
        Err(_) => 1.0 - (1.0 - lambda).powf(s as f64),
    }
}

fn switch_times(spec: &ProblemSpec, thresholds: &ThresholdPolicy) -> Result<Vec<u64>> {
    thresholds
        .thresholds
        .iter()
        .enumerate()
        .map(|(i, &th)| {
            switch_time(th, spec.lambda).map_err(|e| match e {
                Error::ThresholdOutOfRange { value, .. } => Error::ThresholdOutOfRange {
                    action: i + 1,
                    value,
                },
                other => other,
            })
        })
        .collect()
}

/// Closed-form approximated total cost of the threshold policy started at belief 0.
pub fn approx_total_cost(spec: &ProblemSpec, thresholds: &ThresholdPolicy) -> Result<f64> {
    let times = switch_times(spec, thresholds)?;
    Ok(closed_form_cost(spec, times.into_iter().map(Some)))
}

/// [`approx_total_cost`] where thresholds at or above 1, which the idle belief path
/// never reaches, contribute nothing (the limit of an infinite switch time).
pub fn approx_total_cost_saturating(
    spec: &ProblemSpec,
    thresholds: &ThresholdPolicy,
) -> Result<f64> {
    let times = thresholds
        .thresholds
        .iter()
        .map(|&th| {
            if th >= 1.0 {
                Ok(None)
            } else {
                switch_time(th, spec.lambda).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(closed_form_cost(spec, times.into_iter()))
}

fn closed_form_cost(spec: &ProblemSpec, times: impl Iterator<Item = Option<u64>>) -> f64 {
    let deltas = cost_deltas(spec);
    let rho = spec.rho;
    let q = rho * (1.0 - spec.lambda);
    let mut total = rho * deltas.b_p / (1.0 - rho)
        + spec.lambda * rho * deltas.a_p[0] / ((1.0 - rho) * (1.0 - q));
    for (i, t) in times.enumerate() {
        let Some(t) = t else { continue };
        let a = i + 1;
        let t = t as i32;
        total += rho.powi(t) * deltas.di(a) / (1.0 - rho);
        total += (rho.powi(t + 1) / (1.0 - rho) - q.powi(t + 1) / (1.0 - q)) * deltas.dp(a);
    }
    total
}

/// Direct summation of the approximated cost along the idle belief path.
///
/// At step `s` the belief is `1 - (1 - lambda)^s`, the action is the highest
/// level whose threshold has been reached, and the step contributes
/// `rho^s c_i[a_s] + rho^(s+1) (B_p + pi_{s+1} A_p^{a_s})`.
pub fn approx_cost_trajectory_oracle(spec: &ProblemSpec, thresholds: &ThresholdPolicy) -> f64 {
    let deltas = cost_deltas(spec);
    let rho = spec.rho;
    let scale = spec.c_i.iter().fold(0.0_f64, |m, c| m.max(c.abs()))
        + deltas.b_p.abs()
        + deltas.a_p.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let mut disc = 1.0_f64;
    let mut total = 0.0;
    let mut s = 0;
    while disc * scale >= 1e-14 * (1.0 - rho) {
        let pi = idle_belief(spec.lambda, s);
        // the exact path stays below 1 even where the float rounds to it
        let a = thresholds
            .thresholds
            .iter()
            .take_while(|t| **t <= pi && **t < 1.0)
            .count();
        let next = idle_belief(spec.lambda, s + 1);
        total += disc * spec.c_i[a] + disc * rho * (deltas.b_p + next * deltas.a_p[a]);
        disc *= rho;
        s += 1;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_paper_family;

    fn family() -> ProblemSpec {
        make_paper_family(0.02).unwrap().with_rho(0.99).with_lambda(0.03)
    }

    #[test]
    fn deltas_of_reference_family() {
        let d = cost_deltas(&family());
        for a in 1..=3 {
            assert!((d.dp(a) + 0.2).abs() < 1e-12);
            assert!((d.dp(a) - (d.a_p[a] - d.a_p[a - 1])).abs() < 1e-12);
        }
        let di = [0.02, 0.04, 0.14];
        for (x, y) in d.d_i.iter().zip(di) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((d.a_p[0] - 0.6).abs() < 1e-12);
        assert!(d.a_p[3].abs() < 1e-12);
        assert!((d.b_p - 2.0).abs() < 1e-12);
    }

    #[test]
    fn upper_bounds_match_hand_values() {
        let s = family();
        let b = threshold_bounds(&s, &cost_deltas(&s)).unwrap();
        let expect = [0.073206, 0.177340, 0.698011];
        for (l, e) in b.levels.iter().zip(expect) {
            assert!((l.upper - e).abs() < 5e-7, "{} vs {e}", l.upper);
        }
        let hand = 0.02 / (0.97 * 0.99 * 0.2) - 0.03 / 0.97;
        assert!((b.level(1).raw_upper - hand).abs() < 1e-15);
        assert_eq!(b.level(3).raw_lower, b.level(3).raw_upper);
        assert!(b.inversions().is_empty());
    }

    #[test]
    fn bounds_clamp_and_flag() {
        let s = family().with_lambda(0.9);
        let b = threshold_bounds(&s, &cost_deltas(&s)).unwrap();
        assert!(b.level(1).raw_upper < 0.0);
        assert_eq!(b.level(1).upper, 0.0);

        let s = make_paper_family(0.01).unwrap();
        let b = threshold_bounds(&s, &cost_deltas(&s)).unwrap();
        assert_eq!(b.inversions(), vec![2]);
    }

    #[test]
    fn bounds_need_negative_propagation_delta() {
        let mut s = family();
        s.betas[1] = s.betas[0].clone();
        match threshold_bounds(&s, &cost_deltas(&s)) {
            Err(Error::NonNegativeCostDelta { action, .. }) => assert_eq!(action, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn switch_time_cases() {
        assert_eq!(switch_time(0.0, 0.03).unwrap(), 0);
        assert_eq!(switch_time(0.073206, 0.03).unwrap(), 3);
        let exact = 1.0 - 0.97_f64.powi(5);
        assert_eq!(switch_time(exact, 0.03).unwrap(), 5);
        assert_eq!(switch_time(0.4, 1.0).unwrap(), 1);
        assert!(switch_time(1.0, 0.03).is_err());
    }

    #[test]
    fn closed_form_cost_degenerate_cases() {
        let mut s = family();
        for b in s.betas.iter_mut() {
            *b = vec![0.2; 5];
        }
        let zero = ThresholdPolicy::new(vec![0.0; 3]).unwrap();
        let c = approx_total_cost(&s, &zero).unwrap();
        let expect = (0.02 + 0.04 + 0.14) / 0.01 + 0.99 * 2.0 / 0.01;
        assert!((c - expect).abs() < 1e-9);
        assert!((approx_cost_trajectory_oracle(&s, &zero) - expect).abs() < 1e-9);

        let never = ThresholdPolicy::new(vec![0.5, 1.0, 1.0]).unwrap();
        assert!(matches!(
            approx_total_cost(&s, &never),
            Err(Error::ThresholdOutOfRange { action: 2, .. })
        ));
        let sat = approx_total_cost_saturating(&s, &never).unwrap();
        assert!((sat - approx_cost_trajectory_oracle(&s, &never)).abs() < 1e-9);
    }

    #[test]
    fn closed_form_matches_oracle_at_full_hazard() {
        let s = family().with_lambda(1.0);
        let th = ThresholdPolicy::new(vec![0.0, 0.3, 0.9]).unwrap();
        let c = approx_total_cost(&s, &th).unwrap();
        let o = approx_cost_trajectory_oracle(&s, &th);
        assert!(((c - o) / o).abs() < 1e-9);
    }

    #[test]
    fn approx_system_on_no_effect_spec() {
        let mut s = family().with_rho(0.9);
        for b in s.betas.iter_mut() {
            *b = vec![0.2; 5];
        }
        let sol = solve_approx(&s, &GridConfig::default().with_cells(200)).unwrap();
        assert!(sol.thresholds.thresholds.iter().all(|t| t.is_infinite()));
        assert!((sol.value_at_zero - 0.9 * 2.0 / 0.1).abs() < 1e-6);
    }
}
