//! Adapter for the Clarabel interior-point solver.
//!
//! Rows are laid out as `A x + s = b` with `s` in, in order, the zero cone
//! (equalities and fixed variables), the nonnegative cone (inequalities and
//! finite bounds), and one second-order cone per cone constraint.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SecondOrderConeT, SolverStatus,
    SupportedConeT, ZeroConeT,
};

use super::{AffineExpr, ConicProgram, ConicSolver, Sense, SolveOptions, SolveResult, SolveStatus};

#[derive(Debug, Clone, Copy, Default)]
pub struct ClarabelSolver;

struct Rows {
    i: Vec<usize>,
    j: Vec<usize>,
    v: Vec<f64>,
    b: Vec<f64>,
}

impl Rows {
    /// Appends the row `coef · x + s = rhs`.
    fn push(&mut self, expr: &AffineExpr, scale: f64, rhs: f64) -> usize {
        let row = self.b.len();
        for (var, c) in &expr.terms {
            if *c != 0.0 {
                self.i.push(row);
                self.j.push(var.0);
                self.v.push(scale * c);
            }
        }
        self.b.push(rhs);
        row
    }
}

impl ConicSolver for ClarabelSolver {
    fn name(&self) -> &str {
        "clarabel"
    }

    fn solve(&self, program: &ConicProgram, opts: &SolveOptions) -> SolveResult {
        let start = Instant::now();
        if let Err(e) = program.validate() {
            return SolveResult::failure(
                SolveStatus::NumericFailure,
                format!("malformed program: {e}"),
                start.elapsed(),
            );
        }
        match catch_unwind(AssertUnwindSafe(|| run(program, opts))) {
            Ok(mut r) => {
                r.wall_time = start.elapsed();
                r
            }
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "unknown panic".into());
                SolveResult::failure(
                    SolveStatus::NumericFailure,
                    format!("solver crashed: {msg}"),
                    start.elapsed(),
                )
            }
        }
    }
}

/// Where each linear constraint's multiplier lives in `z`, with its sign.
#[derive(Clone, Copy)]
struct DualSlot {
    row: usize,
    sign: f64,
}

fn run(program: &ConicProgram, opts: &SolveOptions) -> SolveResult {
    let n = program.n_vars();
    let mut rows = Rows {
        i: Vec::new(),
        j: Vec::new(),
        v: Vec::new(),
        b: Vec::new(),
    };
    let mut slots = vec![DualSlot { row: 0, sign: 1.0 }; program.linear.len()];

    for (k, c) in program.linear.iter().enumerate() {
        if c.sense == Sense::Eq {
            slots[k] = DualSlot {
                row: rows.push(&c.expr, 1.0, c.rhs - c.expr.constant),
                sign: 1.0,
            };
        }
    }
    for i in 0..n {
        if program.lower[i] == program.upper[i] {
            rows.push(&AffineExpr::var(super::Var(i)), 1.0, program.lower[i]);
        }
    }
    let n_zero = rows.b.len();

    for (k, c) in program.linear.iter().enumerate() {
        match c.sense {
            Sense::Le => {
                slots[k] = DualSlot {
                    row: rows.push(&c.expr, 1.0, c.rhs - c.expr.constant),
                    sign: 1.0,
                }
            }
            Sense::Ge => {
                slots[k] = DualSlot {
                    row: rows.push(&c.expr, -1.0, c.expr.constant - c.rhs),
                    sign: 1.0,
                }
            }
            Sense::Eq => {}
        }
    }
    for i in 0..n {
        let (lo, hi) = (program.lower[i], program.upper[i]);
        if lo == hi {
            continue;
        }
        if lo.is_finite() {
            rows.push(&AffineExpr::var(super::Var(i)), -1.0, -lo);
        }
        if hi.is_finite() {
            rows.push(&AffineExpr::var(super::Var(i)), 1.0, hi);
        }
    }
    let n_nonneg = rows.b.len() - n_zero;

    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if n_zero > 0 {
        cones.push(ZeroConeT(n_zero));
    }
    if n_nonneg > 0 {
        cones.push(NonnegativeConeT(n_nonneg));
    }
    for soc in &program.socs {
        // s = b − A x = (t, y) with A = −coef and b = constant
        rows.push(&soc.t, -1.0, soc.t.constant);
        for y in &soc.y {
            rows.push(y, -1.0, y.constant);
        }
        cones.push(SecondOrderConeT(1 + soc.y.len()));
    }

    let m = rows.b.len();
    let a = CscMatrix::new_from_triplets(m, n, rows.i, rows.j, rows.v);

    let (mut pi, mut pj, mut pv) = (Vec::new(), Vec::new(), Vec::new());
    for &(vi, vj, c) in &program.objective.quadratic {
        let (r, col) = if vi.0 <= vj.0 {
            (vi.0, vj.0)
        } else {
            (vj.0, vi.0)
        };
        pi.push(r);
        pj.push(col);
        pv.push(if r == col { 2.0 * c } else { c });
    }
    let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);
    let mut q = vec![0.0; n];
    for &(v, c) in &program.objective.linear {
        q[v.0] += c;
    }

    let settings = DefaultSettings {
        verbose: opts.verbose,
        max_iter: opts.max_iterations,
        time_limit: opts.time_limit.map_or(f64::INFINITY, |d| d.as_secs_f64()),
        tol_feas: opts.tolerance,
        tol_gap_abs: opts.tolerance,
        tol_gap_rel: opts.tolerance,
        static_regularization_constant: opts.static_regularization,
        ..DefaultSettings::default()
    };

    let mut solver = match DefaultSolver::new(&p, &q, &a, &rows.b, &cones, settings) {
        Ok(s) => s,
        Err(e) => {
            return SolveResult::failure(
                SolveStatus::NumericFailure,
                format!("setup failed: {e}"),
                Default::default(),
            )
        }
    };
    solver.solve();
    let sol = &solver.solution;

    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        SolverStatus::MaxIterations | SolverStatus::MaxTime => SolveStatus::IterationLimit,
        _ => SolveStatus::NumericFailure,
    };
    let mut message = format!("{:?}", sol.status);
    if status != SolveStatus::Optimal {
        let mut r = SolveResult::failure(status, message, Default::default());
        r.iterations = sol.iterations;
        return r;
    }

    let values = sol.x.clone();
    let max_violation = program.max_violation(&values);
    let status = if max_violation > opts.recheck_tolerance {
        message = format!("{message}; re-check found scaled violation {max_violation:e}");
        SolveStatus::NumericFailure
    } else {
        SolveStatus::Optimal
    };
    let duals = slots.iter().map(|s| s.sign * sol.z[s.row]).collect();
    SolveResult {
        status,
        objective: program.objective.eval(&values),
        values,
        duals: Some(duals),
        iterations: sol.iterations,
        wall_time: Default::default(),
        max_violation,
        message,
        cutting_plane: None,
    }
}
