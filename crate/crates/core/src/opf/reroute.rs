//! Re-dispatch with frozen participation factors under tightened line limits.

use super::dcopf::{add_generation_cost, add_network};
use super::{block, require_optimal, run, Diagnostics, DispatchSolution, Instance, OpfOptions};
use crate::conic::{AffineExpr, ConicProgram, Sense};
use crate::error::{Error, Result};
use crate::stochastic::{
    line_variances, participant_variance, ParticipationMatrix, VarianceMethod,
};

/// Variables `p̄`, `θ̄`, `f̄` only. Line rows `|f̄| ≤ (1 − τ) f^max − ν ŝ` and
/// generator rows use the deviations implied by `a_hat`; the objective carries
/// the constant variance part of the expected cost.
pub fn build_reroute(
    inst: &Instance,
    a_hat: &ParticipationMatrix,
    tau: f64,
) -> Result<ConicProgram> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::InvalidParameter(format!(
            "tau {tau} must lie in [0, 1)"
        )));
    }
    let grid = &inst.grid;
    let s2 = line_variances(&inst.sys, &inst.stoch, a_hat, VarianceMethod::GammaForm)?;
    let mut program = ConicProgram::new();
    let net = add_network(&mut program, inst, true);

    for (l, line) in grid.lines.iter().enumerate() {
        let cap = (1.0 - tau) * line.limit - line.nu * s2[l].sqrt();
        program.add_linear(
            format!("line+[{l}]"),
            AffineExpr::var(net.f.var(l)),
            Sense::Le,
            cap,
        );
        program.add_linear(
            format!("line-[{l}]"),
            AffineExpr::term(net.f.var(l), -1.0),
            Sense::Le,
            cap,
        );
    }
    for (g, gen) in grid.generators.iter().enumerate() {
        let (sd, var) = match inst.generator_participant(g) {
            Some(r) => {
                let v = participant_variance(&inst.stoch, a_hat, r);
                (v.sqrt(), v)
            }
            None => (0.0, 0.0),
        };
        // rows rather than bounds, so crossing margins surface as infeasibility
        let p = net.p.var(g);
        program.add_linear(
            format!("gen_lo[{g}]"),
            AffineExpr::var(p),
            Sense::Ge,
            gen.p_min + gen.nu * sd,
        );
        program.add_linear(
            format!("gen_hi[{g}]"),
            AffineExpr::var(p),
            Sense::Le,
            gen.p_max - gen.nu * sd,
        );
        program.objective.constant += gen.cost.quadratic * var;
    }
    add_generation_cost(&mut program, inst, &net.p);
    Ok(program)
}

pub fn solve_reroute(
    inst: &Instance,
    a_hat: &ParticipationMatrix,
    tau: f64,
    opts: &OpfOptions,
) -> Result<DispatchSolution> {
    let program = build_reroute(inst, a_hat, tau)?;
    let r = run(&program, opts);
    require_optimal("reroute", &r)?;
    let theta = block(&program, "theta", &r.values);
    DispatchSolution::from_angles(
        inst,
        theta,
        Some(a_hat.clone()),
        Diagnostics::from_result(&r),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::figure1::{build_figure1, Figure1Params};
    use crate::opf::{check_compatible, solve_safety_opf, SafetyOptions};

    fn instance(limited: bool) -> (crate::figure1::Figure1Case, Instance) {
        let p = if limited {
            Figure1Params::limited(10, 10, 800.0)
        } else {
            Figure1Params::unlimited(10, 10, 800.0, 200.0, 100.0)
        };
        let case = build_figure1(&p).unwrap();
        let inst =
            Instance::new(case.grid.clone(), case.stoch.clone(), case.pattern.clone()).unwrap();
        (case, inst)
    }

    #[test]
    fn fixing_the_optimal_policy_keeps_the_cost() {
        let (_, inst) = instance(false);
        let sol =
            solve_safety_opf(&inst, &SafetyOptions::default(), &OpfOptions::default()).unwrap();
        let re = solve_reroute(
            &inst,
            sol.alpha.as_ref().unwrap(),
            0.0,
            &OpfOptions::default(),
        )
        .unwrap();
        let rel = (re.expected_cost - sol.expected_cost).abs() / sol.expected_cost.abs();
        assert!(rel < 1e-6, "{} vs {}", re.expected_cost, sol.expected_cost);
        assert!((re.diagnostics.objective - re.expected_cost).abs() < 1e-6 * re.expected_cost);
    }

    #[test]
    fn limited_candidate_is_feasible_and_tight() {
        let (case, inst) = instance(true);
        let re =
            solve_reroute(&inst, &case.candidate_alpha(), 0.0, &OpfOptions::default()).unwrap();
        let rep = check_compatible(&inst, &re.f_bar, re.alpha.as_ref().unwrap()).unwrap();
        assert!(rep.compatible, "{:?}", rep.violations);
        assert!(rep.line_margins[case.layout.line_ab].abs() < 1e-5);
    }

    #[test]
    fn large_tau_is_infeasible() {
        let (case, inst) = instance(true);
        let err =
            solve_reroute(&inst, &case.candidate_alpha(), 0.5, &OpfOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)), "{err}");
    }
}
