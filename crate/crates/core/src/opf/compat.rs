//! Compatibility of a mean-flow vector with a participation matrix.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::Instance;
use crate::error::{Error, Result};
use crate::stochastic::{
    line_variances, participant_variance, validate_participation, ParticipationMatrix,
    VarianceMethod,
};

/// Relative slack granted to every margin check.
pub const MARGIN_TOLERANCE: f64 = 1e-6;

/// Relative tolerance on angle residuals around cycles.
pub const CYCLE_TOLERANCE: f64 = 1e-7;

/// Lines with `|f̄| + ν s ≥ (1 − τ) f^max`, with `s = √V(𝒜)`. A relative
/// slack of `1e-9 f^max` absorbs round-off on exactly tight lines.
pub fn tight_set(
    inst: &Instance,
    f_bar: &[f64],
    a: &ParticipationMatrix,
    tau: f64,
) -> Result<Vec<usize>> {
    let s2 = line_variances(&inst.sys, &inst.stoch, a, VarianceMethod::GammaForm)?;
    Ok(tight_from_variances(inst, f_bar, &s2, tau))
}

pub(crate) fn tight_from_variances(
    inst: &Instance,
    f_bar: &[f64],
    s2: &[f64],
    tau: f64,
) -> Vec<usize> {
    inst.grid
        .lines
        .iter()
        .enumerate()
        .filter(|(l, line)| {
            f_bar[*l].abs() + line.nu * s2[*l].sqrt()
                >= (1.0 - tau) * line.limit - 1e-9 * line.limit
        })
        .map(|(l, _)| l)
        .collect()
}

/// Midpoint and half-width of a generator's output range, so that its
/// safety pair reads `|p̄ − c| + ν sd ≤ w` like a line.
pub(crate) fn generator_band(gen: &crate::grid::Generator) -> (f64, f64) {
    (0.5 * (gen.p_max + gen.p_min), 0.5 * (gen.p_max - gen.p_min))
}

/// Participating generators with `|p̄ − c| + ν sd ≥ (1 − τ) w`, by generator index.
pub(crate) fn tight_generators(
    inst: &Instance,
    p_bar: &[f64],
    a: &ParticipationMatrix,
    tau: f64,
) -> Vec<usize> {
    inst.grid
        .generators
        .iter()
        .enumerate()
        .filter_map(|(g, gen)| {
            let r = inst.generator_participant(g)?;
            let (c, w) = generator_band(gen);
            let sd = participant_variance(&inst.stoch, a, r).sqrt();
            ((p_bar[gen.bus] - c).abs() + gen.nu * sd >= (1.0 - tau) * w - 1e-9 * w.abs())
                .then_some(g)
        })
        .collect()
}

/// Bus-indexed mean injections `B θ + d − μ` implied by a flow vector.
pub(crate) fn injections_from_flows(inst: &Instance, f_bar: &[f64]) -> Result<Vec<f64>> {
    let theta = reconstruct_angles(inst, f_bar)?;
    let bt = inst.sys.apply(&theta);
    let mu = inst.stoch.mu_full(inst.grid.n_buses());
    Ok((0..bt.len())
        .map(|i| bt[i] + inst.grid.buses[i].load - mu[i])
        .collect())
}

/// Angles with `θ_slack = 0` reproducing `f̄` along a spanning tree; every
/// off-tree line is then checked for consistency.
pub fn reconstruct_angles(inst: &Instance, f_bar: &[f64]) -> Result<Vec<f64>> {
    let grid = &inst.grid;
    let (n, m) = (grid.n_buses(), grid.n_lines());
    if f_bar.len() != m {
        return Err(Error::Dimension(format!(
            "{} flows for {m} lines",
            f_bar.len()
        )));
    }
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (l, line) in grid.lines.iter().enumerate() {
        adj[line.from].push(l);
        adj[line.to].push(l);
    }
    let mut theta = vec![f64::NAN; n];
    let mut tree = vec![false; m];
    theta[grid.slack] = 0.0;
    let mut queue = VecDeque::from([grid.slack]);
    while let Some(u) = queue.pop_front() {
        for &l in &adj[u] {
            let line = &grid.lines[l];
            let dtheta = f_bar[l] / line.susceptance;
            let (v, value) = if line.from == u {
                (line.to, theta[u] - dtheta)
            } else {
                (line.from, theta[u] + dtheta)
            };
            if theta[v].is_nan() {
                theta[v] = value;
                tree[l] = true;
                queue.push_back(v);
            }
        }
    }
    if theta.iter().any(|t| t.is_nan()) {
        return Err(Error::Consistency("network is not connected".into()));
    }
    let scale = grid
        .lines
        .iter()
        .zip(f_bar)
        .map(|(line, f)| (f / line.susceptance).abs())
        .fold(0.0_f64, f64::max);
    let tol = CYCLE_TOLERANCE * scale.max(1e-12);
    for (l, line) in grid.lines.iter().enumerate() {
        if tree[l] {
            continue;
        }
        let residual = theta[line.from] - theta[line.to] - f_bar[l] / line.susceptance;
        if residual.abs() > tol {
            return Err(Error::CycleInconsistent { line: l, residual });
        }
    }
    Ok(theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Line,
    GeneratorLower,
    GeneratorUpper,
    /// Nonzero mean injection at a bus without a generator.
    Injection,
    Participation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatViolation {
    pub kind: ViolationKind,
    /// Line, generator or bus index; the source column for participation issues.
    pub index: usize,
    /// Negative by the amount of the violation.
    pub margin: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityReport {
    pub compatible: bool,
    pub theta_bar: Vec<f64>,
    pub p_bar: Vec<f64>,
    pub s2: Vec<f64>,
    /// `f^max − |f̄| − ν s` per line.
    pub line_margins: Vec<f64>,
    /// Smaller of the two bound margins per generator.
    pub generator_margins: Vec<f64>,
    pub violations: Vec<CompatViolation>,
}

impl CompatibilityReport {
    pub fn violated_lines(&self) -> Vec<usize> {
        self.violations
            .iter()
            .filter(|v| v.kind == ViolationKind::Line)
            .map(|v| v.index)
            .collect()
    }
}

/// Extends `(f̄, 𝒜)` to a full dispatch and checks every constraint of the
/// safety-constrained problem.
pub fn check_compatible(
    inst: &Instance,
    f_bar: &[f64],
    a: &ParticipationMatrix,
) -> Result<CompatibilityReport> {
    let grid = &inst.grid;
    let n = grid.n_buses();
    let theta = reconstruct_angles(inst, f_bar)?;
    let bt = inst.sys.apply(&theta);
    let mu = inst.stoch.mu_full(n);
    let p_bar: Vec<f64> = (0..n).map(|i| bt[i] + grid.buses[i].load - mu[i]).collect();
    let s2 = line_variances(&inst.sys, &inst.stoch, a, VarianceMethod::GammaForm)?;
    let mut violations = Vec::new();

    let pr = validate_participation(a, &inst.pattern);
    for v in pr.violations {
        violations.push(CompatViolation {
            kind: ViolationKind::Participation,
            index: 0,
            margin: 0.0,
            message: format!("{}: {}", v.code, v.message),
        });
    }

    let index = grid.generator_index();
    let inj_tol = MARGIN_TOLERANCE * inst.power_scale();
    for i in 0..n {
        if index[i].is_none() && p_bar[i].abs() > inj_tol {
            violations.push(CompatViolation {
                kind: ViolationKind::Injection,
                index: i,
                margin: -p_bar[i].abs(),
                message: format!(
                    "bus {} needs injection {:.6} without a generator",
                    grid.label(i),
                    p_bar[i]
                ),
            });
        }
    }

    let line_margins: Vec<f64> = grid
        .lines
        .iter()
        .enumerate()
        .map(|(l, line)| line.limit - f_bar[l].abs() - line.nu * s2[l].sqrt())
        .collect();
    for (l, line) in grid.lines.iter().enumerate() {
        if line_margins[l] < -MARGIN_TOLERANCE * line.limit.max(1.0) {
            violations.push(CompatViolation {
                kind: ViolationKind::Line,
                index: l,
                margin: line_margins[l],
                message: format!("line {l} exceeds its limit by {:.6}", -line_margins[l]),
            });
        }
    }

    let mut generator_margins = Vec::with_capacity(grid.generators.len());
    for (g, gen) in grid.generators.iter().enumerate() {
        let sd = inst
            .generator_participant(g)
            .map_or(0.0, |r| participant_variance(&inst.stoch, a, r).sqrt());
        let p = p_bar[gen.bus];
        let lower = p - gen.nu * sd - gen.p_min;
        let upper = gen.p_max - p - gen.nu * sd;
        let tol = MARGIN_TOLERANCE * gen.p_max.abs().max(gen.p_min.abs()).max(1.0);
        for (kind, margin) in [
            (ViolationKind::GeneratorLower, lower),
            (ViolationKind::GeneratorUpper, upper),
        ] {
            if margin < -tol {
                violations.push(CompatViolation {
                    kind,
                    index: g,
                    margin,
                    message: format!(
                        "generator at bus {} misses a bound by {:.6}",
                        grid.label(gen.bus),
                        -margin
                    ),
                });
            }
        }
        generator_margins.push(lower.min(upper));
    }

    Ok(CompatibilityReport {
        compatible: violations.is_empty(),
        theta_bar: theta,
        p_bar,
        s2,
        line_margins,
        generator_margins,
        violations,
    })
}
