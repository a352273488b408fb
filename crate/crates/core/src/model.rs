//! Problem specification for the quickest-intervention model.
//!
//! A [`ProblemSpec`] describes a discrete-time process whose observation
//! distribution shifts from `alpha` to `betas[0]` at a geometric change-point,
//! and an agent that escalates through intervention levels `0..=A` which move
//! the post-change distribution to `betas[a]`. The horizon is geometric with
//! continuation probability `rho`, the change-point has hazard `lambda`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on probability-vector sums. Vectors within it are renormalized.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// Tolerance used for the ordering checks (MLR, dominance, equality of `beta_A` and `alpha`).
const ORDER_TOL: f64 = 1e-12;

/// Default continuation probability for the reference family.
pub const DEFAULT_RHO: f64 = 0.99;
/// Default change-point hazard for the reference family.
pub const DEFAULT_LAMBDA: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct ProblemSpec {
    /// Observation alphabet size `Z`; observations are indexed `0..Z` internally.
    pub num_obs: usize,
    /// Highest intervention level `A`; actions are `0..=A`, 0 is idle.
    pub num_actions: usize,
    pub alpha: Vec<f64>,
    /// `A + 1` post-change distributions, indexed by action.
    pub betas: Vec<Vec<f64>>,
    pub c_p: Vec<f64>,
    pub c_i: Vec<f64>,
    pub rho: f64,
    pub lambda: f64,
}

/// Wire form with the exact JSON keys of the problem-spec document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    #[serde(rename = "Z")]
    z: usize,
    #[serde(rename = "A")]
    a: usize,
    alpha: Vec<f64>,
    betas: Vec<Vec<f64>>,
    c_p: Vec<f64>,
    c_i: Vec<f64>,
    rho: f64,
    lambda: f64,
}

impl TryFrom<RawSpec> for ProblemSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        ProblemSpec::new(raw.z, raw.a, raw.alpha, raw.betas, raw.c_p, raw.c_i, raw.rho, raw.lambda)
    }
}

impl From<ProblemSpec> for RawSpec {
    fn from(spec: ProblemSpec) -> Self {
        RawSpec {
            z: spec.num_obs,
            a: spec.num_actions,
            alpha: spec.alpha,
            betas: spec.betas,
            c_p: spec.c_p,
            c_i: spec.c_i,
            rho: spec.rho,
            lambda: spec.lambda,
        }
    }
}

fn renormalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    // rounding-level drift is left alone so serialization round-trips exactly
    if s > 0.0 && (s - 1.0).abs() <= PROB_SUM_TOL && (s - 1.0).abs() > 8.0 * f64::EPSILON {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

impl ProblemSpec {
    /// Builds a spec after checking that every vector length agrees with `Z` and `A`.
    ///
    /// Probability vectors whose sum is within [`PROB_SUM_TOL`] of one are
    /// renormalized; anything further off is kept as-is and reported by
    /// [`validate_spec`].
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_obs: usize,
        num_actions: usize,
        mut alpha: Vec<f64>,
        mut betas: Vec<Vec<f64>>,
        c_p: Vec<f64>,
        c_i: Vec<f64>,
        rho: f64,
        lambda: f64,
    ) -> Result<Self> {
        check_dims(num_obs, num_actions, &alpha, &betas, &c_p, &c_i)?;
        renormalize(&mut alpha);
        betas.iter_mut().for_each(|b| renormalize(b));
        Ok(ProblemSpec {
            num_obs,
            num_actions,
            alpha,
            betas,
            c_p,
            c_i,
            rho,
            lambda,
        })
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    /// Expected propagation cost of one pre-change step, `B_p = sum_z alpha(z) c_p(z)`.
    pub fn baseline_cost(&self) -> f64 {
        dot(&self.alpha, &self.c_p)
    }

    /// Expected one-step cost after the change when action `a` is in force.
    pub fn post_change_cost(&self, a: usize) -> f64 {
        dot(&self.betas[a], &self.c_p) + self.c_i[a]
    }

    pub fn check_dims(&self) -> Result<()> {
        check_dims(
            self.num_obs,
            self.num_actions,
            &self.alpha,
            &self.betas,
            &self.c_p,
            &self.c_i,
        )
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dim(field: impl Into<String>, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension {
            field: field.into(),
            expected,
            found,
        })
    }
}

fn check_dims(
    z: usize,
    a: usize,
    alpha: &[f64],
    betas: &[Vec<f64>],
    c_p: &[f64],
    c_i: &[f64],
) -> Result<()> {
    if z == 0 {
        return Err(Error::InvalidParameter("Z must be positive".into()));
    }
    dim("alpha", z, alpha.len())?;
    dim("betas", a + 1, betas.len())?;
    for (i, b) in betas.iter().enumerate() {
        dim(format!("betas[{i}]"), z, b.len())?;
    }
    dim("c_p", z, c_p.len())?;
    dim("c_i", a + 1, c_i.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Strictness {
    #[default]
    Strict,
    Warn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    ProbabilitySum,
    Positivity,
    CpMonotone,
    CiMonotone,
    CiIdleZero,
    NegativeCost,
    MaxLevelIsAlpha,
    RhoRange,
    LambdaRange,
    StochasticDominance,
    MlrOrder,
    StricterIsBetter,
}

impl Rule {
    /// Ordering and cost-improvement assumptions can be downgraded to warnings.
    fn downgradable(self) -> bool {
        matches!(
            self,
            Rule::StochasticDominance | Rule::MlrOrder | Rule::StricterIsBetter
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    pub severity: Severity,
    pub message: String,
    /// Worst offending indices (vector/action/observation, rule-dependent).
    pub indices: Vec<usize>,
    /// How far the worst case is from satisfying the rule.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn has(&self, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }

    pub fn errors(&self) -> impl Iterator<Item = &Violation> {
        self.violations
            .iter()
            .filter(|v| v.severity == Severity::Error)
    }
}

struct Collector {
    strictness: Strictness,
    violations: Vec<Violation>,
}

impl Collector {
    fn push(&mut self, rule: Rule, message: String, indices: Vec<usize>, margin: f64) {
        let severity = if self.strictness == Strictness::Warn && rule.downgradable() {
            Severity::Warning
        } else {
            Severity::Error
        };
        self.violations.push(Violation {
            rule,
            severity,
            message,
            indices,
            margin,
        });
    }
}

/// Checks every modeling assumption of `spec`.
///
/// Dimension mismatches are returned as `Err`; everything else ends up in the report.
pub fn validate_spec(spec: &ProblemSpec, strictness: Strictness) -> Result<ValidationReport> {
    spec.check_dims()?;
    let mut c = Collector {
        strictness,
        violations: Vec::new(),
    };
    let a_max = spec.num_actions;
    let z_n = spec.num_obs;

    let mut prob_vectors: Vec<(String, usize, &[f64])> = vec![("alpha".into(), 0, &spec.alpha)];
    for (i, b) in spec.betas.iter().enumerate() {
        prob_vectors.push((format!("betas[{i}]"), i, b));
    }
    for (name, idx, v) in &prob_vectors {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > PROB_SUM_TOL || !s.is_finite() {
            c.push(
                Rule::ProbabilitySum,
                format!("{name} sums to {s}"),
                vec![*idx],
                (s - 1.0).abs(),
            );
        }
        let (zmin, vmin) = argmin(v);
        if !(vmin > 0.0) {
            c.push(
                Rule::Positivity,
                format!("{name}[{zmin}] = {vmin} is not strictly positive"),
                vec![*idx, zmin],
                -vmin,
            );
        }
    }

    if let Some((z, m)) = worst_decrease(&spec.c_p) {
        c.push(
            Rule::CpMonotone,
            format!("c_p decreases at z={}", z + 1),
            vec![z, z + 1],
            m,
        );
    }
    if let Some((a, m)) = worst_decrease(&spec.c_i) {
        c.push(
            Rule::CiMonotone,
            format!("c_i decreases at a={}", a + 1),
            vec![a, a + 1],
            m,
        );
    }
    for (name, v) in [("c_p", &spec.c_p), ("c_i", &spec.c_i)] {
        let (i, m) = argmin(v);
        if m < 0.0 {
            c.push(
                Rule::NegativeCost,
                format!("{name}[{i}] = {m} is negative"),
                vec![i],
                -m,
            );
        }
    }
    if spec.c_i[0] != 0.0 {
        c.push(
            Rule::CiIdleZero,
            format!("c_i[0]=0 required, found {}", spec.c_i[0]),
            vec![0],
            spec.c_i[0].abs(),
        );
    }

    let (zw, gap) = spec.betas[a_max]
        .iter()
        .zip(&spec.alpha)
        .map(|(b, a)| (b - a).abs())
        .enumerate()
        .fold((0, 0.0_f64), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc });
    if gap > ORDER_TOL {
        c.push(
            Rule::MaxLevelIsAlpha,
            format!("beta_A=alpha required; differs by {gap} at z={}", zw + 1),
            vec![a_max, zw],
            gap,
        );
    }

    if !(spec.rho > 0.0 && spec.rho < 1.0) {
        c.push(
            Rule::RhoRange,
            format!("rho={} outside (0,1)", spec.rho),
            vec![],
            spec.rho,
        );
    }
    if !(spec.lambda > 0.0 && spec.lambda <= 1.0) {
        c.push(
            Rule::LambdaRange,
            format!("lambda={} outside (0,1]", spec.lambda),
            vec![],
            spec.lambda,
        );
    }

    for a in 1..=a_max {
        let lo = &spec.betas[a];
        let hi = &spec.betas[a - 1];

        // beta_{a-1} must stochastically dominate beta_a.
        let mut worst: Option<(usize, f64)> = None;
        for j in 0..z_n {
            let gap: f64 = hi[j..].iter().sum::<f64>() - lo[j..].iter().sum::<f64>();
            if gap < -ORDER_TOL && worst.is_none_or(|(_, w)| gap < w) {
                worst = Some((j, gap));
            }
        }
        if let Some((j, gap)) = worst {
            c.push(
                Rule::StochasticDominance,
                format!("beta_{} does not dominate beta_{a} at tail j={}", a - 1, j + 1),
                vec![a, j],
                -gap,
            );
        }

        // beta_{a-1}(z)/beta_a(z) nondecreasing in z, checked by cross-multiplication.
        let mut worst: Option<(usize, f64)> = None;
        for z in 0..z_n.saturating_sub(1) {
            let d = hi[z + 1] * lo[z] - hi[z] * lo[z + 1];
            if d < -ORDER_TOL && worst.is_none_or(|(_, w)| d < w) {
                worst = Some((z, d));
            }
        }
        if let Some((z, d)) = worst {
            c.push(
                Rule::MlrOrder,
                format!(
                    "likelihood ratio beta_{}/beta_{a} decreases between z={} and z={}",
                    a - 1,
                    z + 1,
                    z + 2
                ),
                vec![a, z],
                -d,
            );
        }

        let gain = spec.post_change_cost(a - 1) - spec.post_change_cost(a);
        if !(gain > 0.0) {
            c.push(
                Rule::StricterIsBetter,
                format!(
                    "post-change cost of action {a} is not below action {} (improvement {gain})",
                    a - 1
                ),
                vec![a],
                -gain,
            );
        }
    }

    let passed = c.violations.iter().all(|v| v.severity == Severity::Warning);
    Ok(ValidationReport {
        passed,
        violations: c.violations,
    })
}

fn argmin(v: &[f64]) -> (usize, f64) {
    v.iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, x)| if x < acc.1 { (i, x) } else { acc })
}

fn worst_decrease(v: &[f64]) -> Option<(usize, f64)> {
    v.windows(2)
        .enumerate()
        .map(|(i, w)| (i, w[0] - w[1]))
        .filter(|(_, d)| *d > 0.0)
        .max_by(|x, y| x.1.total_cmp(&y.1))
}

/// Five-observation, four-level family used throughout the experiments.
///
/// `beta_i = [0.2-(6-2i)d, 0.2-(3-i)d, 0.2, 0.2+(3-i)d, 0.2+(6-2i)d]`, so level 3
/// restores `alpha` and every step down in level shifts mass toward costly
/// observations. `rho` and `lambda` take the defaults and can be overridden
/// with [`ProblemSpec::with_rho`] / [`ProblemSpec::with_lambda`].
pub fn make_paper_family(delta: f64) -> Result<ProblemSpec> {
    if !(delta > 0.0 && delta < 0.2 / 6.0) {
        return Err(Error::InvalidParameter(format!(
            "delta={delta} must lie in (0, 0.2/6) to keep every probability positive"
        )));
    }
    let betas = (0..4)
        .map(|i| {
            let i = i as f64;
            vec![
                0.2 - (6.0 - 2.0 * i) * delta,
                0.2 - (3.0 - i) * delta,
                0.2,
                0.2 + (3.0 - i) * delta,
                0.2 + (6.0 - 2.0 * i) * delta,
            ]
        })
        .collect();
    ProblemSpec::new(
        5,
        3,
        vec![0.2; 5],
        betas,
        vec![0.0, 1.0, 2.0, 3.0, 4.0],
        vec![0.0, 0.02, 0.06, 0.2],
        DEFAULT_RHO,
        DEFAULT_LAMBDA,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalRegimeReport {
    pub delta_eff: f64,
    pub gamma_eff: f64,
    /// `per_pair[a-1][j-2]` is the tail gap between `beta_{a-1}` and `beta_a` from observation `j`.
    pub per_pair: Vec<Vec<f64>>,
}

/// Diagnostic for how far a spec is from the small-perturbation regime.
pub fn local_regime_report(spec: &ProblemSpec) -> LocalRegimeReport {
    let per_pair: Vec<Vec<f64>> = (1..=spec.num_actions)
        .map(|a| {
            (1..spec.num_obs)
                .map(|j| {
                    let hi: f64 = spec.betas[a - 1][j..].iter().sum();
                    let lo: f64 = spec.betas[a][j..].iter().sum();
                    (hi - lo).abs()
                })
                .collect()
        })
        .collect();
    let all = per_pair.iter().flatten().copied();
    let max = all.clone().fold(0.0_f64, f64::max);
    let min = all.fold(f64::INFINITY, f64::min);
    let gamma_eff = if max > 0.0 { min / max } else { 0.0 };
    LocalRegimeReport {
        delta_eff: max,
        gamma_eff,
        per_pair,
    }
}

/// Kullback-Leibler divergence `D(p || q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    dim("q", p.len(), q.len())?;
    if let Some(i) = q.iter().position(|x| !(*x > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "q[{i}] = {} must be positive",
            q[i]
        )));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum())
}
