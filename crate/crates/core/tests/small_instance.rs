//! Exact enumeration on a two-symbol, single-level instance.

mod common;

use std::sync::Arc;

use quickest_intervention::grid_solver::{
    eval_value, solve_finite_horizon, solve_grid, GridConfig, RepresentativeRule,
};
use quickest_intervention::policies::PolicyKind;
use quickest_intervention::simulator::{estimate_cost, SimOptions};

#[test]
fn grid_value_at_zero_matches_truncated_tree() {
    let spec = common::tiny_spec();
    let sol = solve_grid(&spec, &GridConfig::default()).unwrap();
    // truncation error is at most rho^depth * 1.1 / (1 - rho), about 4e-7
    let tree = common::discounted_tree(&spec, 0.0, 0, 22);
    let grid = eval_value(&sol, 0.0, 0);
    assert!((grid - tree).abs() < 1e-3, "grid {grid} tree {tree}");
    assert!((sol.lookahead_value(&spec, 0.0, 0) - tree).abs() < 1e-3);
    let tree_top = common::discounted_tree(&spec, 0.3, 1, 22);
    assert!((eval_value(&sol, 0.3, 1) - tree_top).abs() < 1e-6);
}

#[test]
fn finite_horizon_matches_exhaustive_tree() {
    let spec = common::tiny_spec();
    let cfg = GridConfig {
        representative_rule: RepresentativeRule::CellLeftEdge,
        ..GridConfig::default()
    };
    for constrained in [true, false] {
        let sol = solve_finite_horizon(&spec, 3, &cfg, constrained).unwrap();
        for level in [0, 1] {
            let tree = common::finite_tree(&spec, 0.0, level, 3, constrained);
            let dp = sol.value(0, 0.0, level);
            assert!((dp - tree).abs() < 1e-12, "constrained={constrained} level={level}: {dp} vs {tree}");
        }
    }
}

#[test]
fn finite_horizon_policy_cost_matches_its_value() {
    let spec = common::tiny_spec();
    let sol = solve_finite_horizon(&spec, 3, &GridConfig::default(), false).unwrap();
    let value = sol.value(0, 0.0, 0);
    let kind = PolicyKind::FiniteHorizon(Arc::new(sol));
    let r = estimate_cost(&spec, &kind, &SimOptions::new(200_000, 4).fixed_horizon(3).unconstrained())
        .unwrap();
    assert!((r.mean_cost - value).abs() < 3.0 * r.std_err + 1e-3, "{r:?} vs {value}");
}

#[test]
fn grid_policy_cost_matches_grid_value() {
    let spec = common::tiny_spec();
    let sol = solve_grid(&spec, &GridConfig::default()).unwrap();
    let value = eval_value(&sol, 0.0, 0);
    let kind = PolicyKind::GridOptimal(Arc::new(sol));
    let r = estimate_cost(&spec, &kind, &SimOptions::new(200_000, 5)).unwrap();
    assert!((r.mean_cost - value).abs() < 3.0 * r.std_err + 1e-3, "{r:?} vs {value}");
}
