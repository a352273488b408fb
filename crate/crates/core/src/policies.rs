//! Decision rules compared in the experiments.
//!
//! Every policy maps a [`PolicyState`] to the next intervention level through
//! [`decide`]. In constrained mode levels move up by at most one per step and
//! never decrease. The direct detect-then-intervene baseline and the oracle
//! are exempt by construction: both jump straight to the top level.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_solver::{FiniteHorizonSolution, GridSolution, ThresholdPolicy};
use crate::local_approx::{cost_deltas, raw_upper_bound};
use crate::model::ProblemSpec;

/// Change-point and horizon of an episode, visible only to the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HiddenInfo {
    pub tau: u64,
    pub horizon: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyState {
    pub pi: f64,
    /// Level in force before this decision.
    pub level: usize,
    pub qcd_declared: bool,
    pub t: u64,
    pub hidden: Option<HiddenInfo>,
}

impl PolicyState {
    pub fn initial() -> Self {
        PolicyState {
            pi: 0.0,
            level: 0,
            qcd_declared: false,
            t: 0,
            hidden: None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum PolicyKind {
    LowComplexity(ThresholdPolicy),
    GridOptimal(Arc<GridSolution>),
    /// Backward-induction policy for a known fixed horizon.
    FiniteHorizon(Arc<FiniteHorizonSolution>),
    /// Shiryaev-style detection at posterior level `h`, then escalation to `top`.
    /// `direct` jumps to the top level instead of ramping.
    Qcd { h: f64, direct: bool, top: usize },
    /// Clairvoyant policy reading the hidden change-point and horizon.
    Oracle { top: usize },
}

impl PolicyKind {
    pub fn qcd(spec: &ProblemSpec, h: f64, direct: bool) -> Result<Self> {
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "QCD declare threshold h={h} must lie in (0,1)"
            )));
        }
        Ok(PolicyKind::Qcd {
            h,
            direct,
            top: spec.num_actions,
        })
    }

    pub fn oracle(spec: &ProblemSpec) -> Self {
        PolicyKind::Oracle {
            top: spec.num_actions,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            PolicyKind::LowComplexity(_) => "low",
            PolicyKind::GridOptimal(_) => "grid",
            PolicyKind::FiniteHorizon(_) => "dp",
            PolicyKind::Qcd { direct: false, .. } => "qcd",
            PolicyKind::Qcd { direct: true, .. } => "dqcd",
            PolicyKind::Oracle { .. } => "oracle",
        }
    }

    /// Whether this policy is bound by the one-step escalation constraint.
    pub fn respects_increment_constraint(&self) -> bool {
        !matches!(
            self,
            PolicyKind::Oracle { .. } | PolicyKind::Qcd { direct: true, .. }
        )
    }

    /// Detection flag after observing `state`.
    pub fn declared_after(&self, state: &PolicyState) -> bool {
        match self {
            PolicyKind::Qcd { h, .. } => state.qcd_declared || state.pi >= *h,
            _ => state.qcd_declared,
        }
    }
}

/// Policy names accepted in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyName {
    Low,
    Grid,
    Qcd,
    Dqcd,
    Oracle,
}

impl PolicyName {
    pub const ALL: [PolicyName; 5] = [
        PolicyName::Low,
        PolicyName::Grid,
        PolicyName::Qcd,
        PolicyName::Dqcd,
        PolicyName::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyName::Low => "low",
            PolicyName::Grid => "grid",
            PolicyName::Qcd => "qcd",
            PolicyName::Dqcd => "dqcd",
            PolicyName::Oracle => "oracle",
        }
    }
}

impl fmt::Display for PolicyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?}")))
    }
}

/// Thresholds from the closed-form upper bounds, made monotone from the top level down.
pub fn low_complexity_policy(spec: &ProblemSpec) -> Result<ThresholdPolicy> {
    let deltas = cost_deltas(spec);
    let a_max = spec.num_actions;
    let mut th = vec![0.0; a_max];
    let mut above = 1.0_f64;
    for a in (1..=a_max).rev() {
        above = raw_upper_bound(spec, &deltas, a)?.min(above);
        th[a - 1] = above;
    }
    ThresholdPolicy::new(th.into_iter().map(|x| x.clamp(0.0, 1.0)).collect())
}

/// Restricts a proposed level (never above the top level) to `{level, level + 1}`.
fn clamp_step(target: usize, level: usize) -> usize {
    target.clamp(level, level + 1)
}

/// Next intervention level.
pub fn decide(kind: &PolicyKind, state: &PolicyState, constrained: bool) -> Result<usize> {
    let level = state.level;
    let action = match kind {
        PolicyKind::LowComplexity(th) => {
            let target = th.target_level(state.pi);
            if constrained {
                clamp_step(target, level)
            } else {
                target
            }
        }
        PolicyKind::GridOptimal(sol) => sol.action(state.pi, level),
        PolicyKind::FiniteHorizon(sol) => {
            let a = sol.action(state.t as usize, state.pi, level);
            if constrained {
                clamp_step(a, level)
            } else {
                a
            }
        }
        PolicyKind::Qcd { direct, top, .. } => {
            if !kind.declared_after(state) {
                level
            } else if *direct {
                *top
            } else {
                (level + 1).min(*top)
            }
        }
        PolicyKind::Oracle { top } => {
            let h = state.hidden.ok_or(Error::MissingHiddenInfo)?;
            oracle_action(state.t, h, *top)
        }
    };
    Ok(action)
}

fn oracle_action(t: u64, h: HiddenInfo, top: usize) -> usize {
    if t + 1 >= h.horizon {
        0
    } else if t + 1 >= h.tau {
        top
    } else {
        0
    }
}

/// Expected cost of the clairvoyant policy under a geometric horizon.
pub fn oracle_cost_closed_form(spec: &ProblemSpec) -> f64 {
    let rho = spec.rho;
    let q = rho * (1.0 - spec.lambda);
    rho * spec.baseline_cost() / (1.0 - rho)
        + spec.c_i[spec.num_actions] * (rho / (1.0 - rho) - q / (1.0 - q))
}

/// Expected cost of the clairvoyant policy over exactly `horizon` slots.
pub fn oracle_cost_fixed_horizon(spec: &ProblemSpec, horizon: u64) -> f64 {
    if horizon == 0 {
        return 0.0;
    }
    let stay = 1.0 - spec.lambda;
    let active: f64 = (0..horizon - 1)
        .map(|t| 1.0 - stay.powi(t as i32 + 1))
        .sum();
    (horizon - 1) as f64 * spec.baseline_cost() + spec.c_i[spec.num_actions] * active
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_paper_family;

    fn family() -> ProblemSpec {
        make_paper_family(0.02).unwrap()
    }

    fn at(pi: f64, level: usize) -> PolicyState {
        PolicyState {
            pi,
            level,
            ..PolicyState::initial()
        }
    }

    #[test]
    fn low_complexity_thresholds_of_reference_family() {
        let th = low_complexity_policy(&family()).unwrap();
        let expect = [0.073206, 0.177340, 0.698011];
        for (x, e) in th.thresholds.iter().zip(expect) {
            assert!((x - e).abs() < 1e-6, "{x} vs {e}");
        }
    }

    #[test]
    fn low_complexity_min_rule_and_clamp() {
        let mut s = family();
        // cheap level 3 pulls the level-2 threshold down to it
        s.c_i = vec![0.0, 0.02, 0.15, 0.16];
        let th = low_complexity_policy(&s).unwrap().thresholds;
        assert_eq!(th[1], th[2]);
        assert!(th[0] <= th[1]);

        let th = low_complexity_policy(&family().with_lambda(0.9)).unwrap();
        assert_eq!(th.thresholds[0], 0.0);
        let mut huge = family();
        huge.c_i = vec![0.0, 10.0, 20.0, 30.0];
        assert!(low_complexity_policy(&huge)
            .unwrap()
            .thresholds
            .iter()
            .all(|&x| x == 1.0));
    }

    #[test]
    fn low_complexity_decisions() {
        let kind = PolicyKind::LowComplexity(low_complexity_policy(&family()).unwrap());
        assert_eq!(decide(&kind, &at(0.05, 0), true).unwrap(), 0);
        assert_eq!(decide(&kind, &at(0.9, 0), true).unwrap(), 1);
        assert_eq!(decide(&kind, &at(0.9, 0), false).unwrap(), 3);
        // constrained levels never fall back
        assert_eq!(decide(&kind, &at(0.0, 2), true).unwrap(), 2);
        assert_eq!(decide(&kind, &at(0.0, 2), false).unwrap(), 0);
        let mut last = 0;
        for i in 0..=1000 {
            let a = decide(&kind, &at(i as f64 / 1000.0, 1), true).unwrap();
            assert!(a >= last && (1..=2).contains(&a));
            last = a;
        }
    }

    #[test]
    fn qcd_ramps_and_direct_jumps() {
        let s = family();
        let ramp = PolicyKind::qcd(&s, 0.8, false).unwrap();
        let jump = PolicyKind::qcd(&s, 0.8, true).unwrap();
        assert_eq!(decide(&jump, &at(0.85, 0), true).unwrap(), 3);
        assert_eq!(decide(&ramp, &at(0.85, 0), true).unwrap(), 1);
        assert_eq!(decide(&ramp, &at(0.5, 0), true).unwrap(), 0);
        let declared = PolicyState {
            qcd_declared: true,
            ..at(0.1, 2)
        };
        assert_eq!(decide(&ramp, &declared, true).unwrap(), 3);
        assert_eq!(decide(&ramp, &PolicyState { level: 3, ..declared }, true).unwrap(), 3);
        assert!(ramp.declared_after(&at(0.8, 0)));
        assert!(!ramp.declared_after(&at(0.79, 0)));
        assert!(PolicyKind::qcd(&s, 1.0, false).is_err());
        assert!(PolicyKind::qcd(&s, 0.0, true).is_err());
        assert!(ramp.respects_increment_constraint() && !jump.respects_increment_constraint());
    }

    #[test]
    fn oracle_schedule() {
        let s = family();
        let kind = PolicyKind::oracle(&s);
        assert!(matches!(
            decide(&kind, &at(0.0, 0), false),
            Err(Error::MissingHiddenInfo)
        ));
        let hidden = HiddenInfo { tau: 5, horizon: 9 };
        let acts: Vec<usize> = (0..9)
            .map(|t| {
                let st = PolicyState {
                    t,
                    hidden: Some(hidden),
                    ..PolicyState::initial()
                };
                decide(&kind, &st, true).unwrap()
            })
            .collect();
        assert_eq!(acts, [0, 0, 0, 0, 3, 3, 3, 3, 0]);
    }

    #[test]
    fn oracle_closed_forms() {
        let s = family();
        assert!((oracle_cost_closed_form(&s) - 212.9622).abs() < 1e-4);
        let expect = 198.0 + 0.2 * (99.0 - 0.9603 / 0.0397);
        assert!((oracle_cost_closed_form(&s) - expect).abs() < 1e-9);
        let no_change = s.clone().with_lambda(0.0);
        assert_eq!(oracle_cost_closed_form(&no_change), 0.99 * 2.0 / (1.0 - 0.99));
        let mut free = s.clone();
        free.c_i[3] = 0.0;
        assert!((oracle_cost_closed_form(&free) - 198.0).abs() < 1e-9);

        assert_eq!(oracle_cost_fixed_horizon(&s, 1), 0.0);
        assert!((oracle_cost_fixed_horizon(&s, 3) - (4.0 + 0.2 * (0.03 + 0.0591))).abs() < 1e-12);
        assert!((oracle_cost_fixed_horizon(&s.with_lambda(1e-9), 50) - 98.0).abs() < 1e-6);
    }

    #[test]
    fn policy_names_parse() {
        for p in PolicyName::ALL {
            assert_eq!(p.as_str().parse::<PolicyName>().unwrap(), p);
        }
        assert!("cusum".parse::<PolicyName>().is_err());
        let v: Vec<PolicyName> = serde_json::from_str(r#"["low","dqcd"]"#).unwrap();
        assert_eq!(v, [PolicyName::Low, PolicyName::Dqcd]);
    }
}
