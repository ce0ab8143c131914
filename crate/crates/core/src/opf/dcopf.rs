use super::{block, require_optimal, run, Diagnostics, DispatchSolution, Instance, OpfOptions};
use crate::conic::{AffineExpr, ConicProgram, Sense, VarBlock};
use crate::error::Result;

/// Mean generation (per generator), angles and flows with nodal balance and
/// flow definitions.
pub(crate) struct NetworkVars {
    pub p: VarBlock,
    pub f: VarBlock,
}

/// Adds `p̄`, `θ̄`, `f̄` with `Bθ̄ = p̄ + μ − d` (μ optional) and `f̄ = b Δθ̄`.
pub(crate) fn add_network(
    program: &mut ConicProgram,
    inst: &Instance,
    with_mu: bool,
) -> NetworkVars {
    let grid = &inst.grid;
    let n = grid.n_buses();
    let p = program.add_block("p", grid.generators.len());
    let theta = program.add_block("theta", n);
    let f = program.add_block("f", grid.n_lines());
    program.fix(theta.var(grid.slack), 0.0);

    let mu = if with_mu {
        inst.stoch.mu_full(n)
    } else {
        vec![0.0; n]
    };
    let index = grid.generator_index();
    let b = inst.sys.matrix();
    for (i, row) in b.outer_iterator().enumerate() {
        let mut expr = AffineExpr::from_terms(row.iter().map(|(j, &v)| (theta.var(j), v)));
        if let Some(g) = index[i] {
            expr = expr.add(p.var(g), -1.0);
        }
        program.add_linear(
            format!("balance[{i}]"),
            expr,
            Sense::Eq,
            mu[i] - grid.buses[i].load,
        );
    }
    for (l, line) in grid.lines.iter().enumerate() {
        let bl = line.susceptance;
        let expr = AffineExpr::var(f.var(l))
            .add(theta.var(line.from), -bl)
            .add(theta.var(line.to), bl);
        program.add_linear(format!("flow[{l}]"), expr, Sense::Eq, 0.0);
    }
    NetworkVars { p, f }
}

/// Adds `Σ c_q p̄² + c_l p̄ + c_c` over generators.
pub(crate) fn add_generation_cost(program: &mut ConicProgram, inst: &Instance, p: &VarBlock) {
    for (g, gen) in inst.grid.generators.iter().enumerate() {
        let v = p.var(g);
        if gen.cost.quadratic != 0.0 {
            program.objective.quadratic.push((v, v, gen.cost.quadratic));
        }
        if gen.cost.linear != 0.0 {
            program.objective.linear.push((v, gen.cost.linear));
        }
        program.objective.constant += gen.cost.constant;
    }
}

/// Deterministic DC-OPF; `with_mu` folds the source means into the injections.
pub fn build_dcopf(inst: &Instance, with_mu: bool) -> ConicProgram {
    let mut program = ConicProgram::new();
    let vars = add_network(&mut program, inst, with_mu);
    for (g, gen) in inst.grid.generators.iter().enumerate() {
        program.set_bounds(vars.p.var(g), gen.p_min, gen.p_max);
    }
    for (l, line) in inst.grid.lines.iter().enumerate() {
        program.set_bounds(vars.f.var(l), -line.limit, line.limit);
    }
    add_generation_cost(&mut program, inst, &vars.p);
    program
}

pub fn solve_dcopf(inst: &Instance, with_mu: bool, opts: &OpfOptions) -> Result<DispatchSolution> {
    let program = build_dcopf(inst, with_mu);
    let r = run(&program, opts);
    require_optimal("DC-OPF", &r)?;
    let theta = block(&program, "theta", &r.values);
    let n = inst.grid.n_buses();
    let mu = if with_mu {
        inst.stoch.mu_full(n)
    } else {
        vec![0.0; n]
    };
    DispatchSolution::from_angles_with_mean(inst, theta, &mu, None, Diagnostics::from_result(&r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, Generator, Grid, Line, QuadCost};
    use crate::stochastic::{PatternK, StochasticModel};
    use nalgebra::DMatrix;

    fn line(from: usize, to: usize, limit: f64) -> Line {
        Line {
            from,
            to,
            susceptance: 1.0,
            limit,
            nu: 3.0,
        }
    }

    fn gen(bus: usize, cost: f64) -> Generator {
        Generator {
            bus,
            p_min: 0.0,
            p_max: 100.0,
            cost: QuadCost::linear(cost),
            nu: 3.0,
        }
    }

    fn bus(id: usize, load: f64) -> Bus {
        Bus {
            id,
            label: id as u64 + 1,
            load,
        }
    }

    fn no_stoch() -> StochasticModel {
        StochasticModel::new(vec![], vec![], DMatrix::zeros(0, 0), vec![]).unwrap()
    }

    fn two_bus(limit: f64) -> Instance {
        let grid = Grid {
            base_mva: 100.0,
            buses: vec![bus(0, 0.0), bus(1, 10.0)],
            lines: vec![line(0, 1, limit)],
            generators: vec![gen(0, 1.0)],
            slack: 0,
        };
        Instance::new(grid, no_stoch(), PatternK::default()).unwrap()
    }

    #[test]
    fn two_bus_dispatch() {
        let sol = solve_dcopf(&two_bus(20.0), false, &OpfOptions::default()).unwrap();
        assert!((sol.p_bar[0] - 10.0).abs() < 1e-6);
        assert!((sol.f_bar[0] - 10.0).abs() < 1e-6);
        assert!((sol.expected_cost - 10.0).abs() < 1e-6);
    }

    #[test]
    fn two_bus_infeasible() {
        let err = solve_dcopf(&two_bus(5.0), false, &OpfOptions::default()).unwrap_err();
        assert!(matches!(err, crate::Error::Infeasible(_)), "{err}");
    }

    #[test]
    fn three_cycle_merit_order() {
        let grid = Grid {
            base_mva: 100.0,
            buses: vec![bus(0, 0.0), bus(1, 0.0), bus(2, 9.0)],
            lines: vec![line(0, 1, 10.0), line(1, 2, 10.0), line(0, 2, 10.0)],
            generators: vec![gen(0, 1.0), gen(1, 2.0)],
            slack: 2,
        };
        let inst = Instance::new(grid, no_stoch(), PatternK::default()).unwrap();
        let sol = solve_dcopf(&inst, false, &OpfOptions::default()).unwrap();
        assert!((sol.p_bar[0] - 9.0).abs() < 1e-6);
        assert!(sol.p_bar[1].abs() < 1e-6);
        let oracle = inst.sys.dc_flows(&[9.0, 0.0, -9.0]).unwrap();
        for (a, b) in sol.f_bar.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((sol.f_bar[0] - 3.0).abs() < 1e-6 && (sol.f_bar[2] - 6.0).abs() < 1e-6);
    }
}
