//! Re-selection of participation factors for fixed mean flows.

use serde::{Deserialize, Serialize};

use super::compat::{
    generator_band, injections_from_flows, tight_from_variances, tight_generators,
};
use super::safety::{add_generator_cone, add_policy, alpha_values, DRowForm};
use super::{require_optimal, run, Diagnostics, Instance, OpfOptions};
use crate::conic::{AffineExpr, ConicProgram, Sense};
use crate::error::{Error, Result};
use crate::shift::metric::{select_f, MetricSpec};
use crate::stochastic::{line_variances, ParticipationMatrix, VarianceMethod};

/// Lines that enter a shifting problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VShiftSets {
    /// Nearly tight lines under `(f′, 𝒜′)`; only these carry safety rows.
    pub tight: Vec<usize>,
    /// Lines in the objective.
    pub metric_lines: Vec<usize>,
    /// Nearly tight participating generators, which keep their safety pair.
    pub tight_generators: Vec<usize>,
}

/// Variables `𝒜`, `D`, `γ`, `s` with cones on every line, safety rows
/// `ν s ≤ f^max − |f′|` on the tight lines only, and objective `Σ_F ψ s²`.
/// Participating generators whose output band is nearly used up keep the row
/// `ν sd ≤ w − |p̄′ − c|` by the same rule, so they do not block the step.
pub fn build_vshift(
    inst: &Instance,
    f_prime: &[f64],
    a_prime: &ParticipationMatrix,
    tau: f64,
    metric: &MetricSpec,
) -> Result<(ConicProgram, VShiftSets)> {
    if !metric.supports_shifting() {
        return Err(Error::InvalidParameter(format!(
            "metric '{metric}' is evaluation-only"
        )));
    }
    metric.check(&inst.grid)?;
    let m = inst.grid.n_lines();
    if f_prime.len() != m {
        return Err(Error::Dimension(format!(
            "{} flows for {m} lines",
            f_prime.len()
        )));
    }
    let s2 = line_variances(&inst.sys, &inst.stoch, a_prime, VarianceMethod::GammaForm)?;
    let tight = tight_from_variances(inst, f_prime, &s2, tau);
    let p_prime = injections_from_flows(inst, f_prime)?;
    let tight_gens = tight_generators(inst, &p_prime, a_prime, tau);
    let metric_lines = select_f(metric, f_prime, &s2, &tight);
    let weights = metric.weights(&inst.grid)?;

    let mut program = ConicProgram::new();
    let policy = add_policy(&mut program, inst, DRowForm::default());
    for &l in &tight {
        let line = &inst.grid.lines[l];
        if line.nu > 0.0 {
            let expr = AffineExpr::term(policy.s.var(l), line.nu);
            program.add_linear(
                format!("safety[{l}]"),
                expr,
                Sense::Le,
                line.limit - f_prime[l].abs(),
            );
        }
    }
    let z = program.add_bounded_block("z", tight_gens.len(), 0.0, f64::INFINITY);
    for (i, &g) in tight_gens.iter().enumerate() {
        let gen = &inst.grid.generators[g];
        let r = inst
            .generator_participant(g)
            .expect("tight generators participate");
        add_generator_cone(&mut program, inst, &policy.alpha, r, z.var(i));
        let (c, w) = generator_band(gen);
        let expr = AffineExpr::term(z.var(i), gen.nu);
        program.add_linear(
            format!("gen_safety[{g}]"),
            expr,
            Sense::Le,
            w - (p_prime[gen.bus] - c).abs(),
        );
    }
    for &l in &metric_lines {
        if weights[l] != 0.0 {
            let v = policy.s.var(l);
            program.objective.quadratic.push((v, v, weights[l]));
        }
    }
    Ok((
        program,
        VShiftSets {
            tight,
            metric_lines,
            tight_generators: tight_gens,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VShiftResult {
    pub alpha: ParticipationMatrix,
    /// `Σ_F ψ V(𝒜̂)` evaluated exactly at the returned matrix.
    pub metric_value: f64,
    pub s2: Vec<f64>,
    pub sets: VShiftSets,
    pub diagnostics: Diagnostics,
}

pub fn solve_vshift(
    inst: &Instance,
    f_prime: &[f64],
    a_prime: &ParticipationMatrix,
    tau: f64,
    metric: &MetricSpec,
    opts: &OpfOptions,
) -> Result<VShiftResult> {
    let (program, sets) = build_vshift(inst, f_prime, a_prime, tau, metric)?;
    let r = run(&program, opts);
    require_optimal("variance shift", &r)?;
    let alpha = alpha_values(&program, inst, &r.values);
    let s2 = line_variances(&inst.sys, &inst.stoch, &alpha, VarianceMethod::GammaForm)?;
    let w = metric.weights(&inst.grid)?;
    let metric_value = sets.metric_lines.iter().map(|&l| w[l] * s2[l]).sum();
    Ok(VShiftResult {
        alpha,
        metric_value,
        s2,
        sets,
        diagnostics: Diagnostics::from_result(&r),
    })
}
