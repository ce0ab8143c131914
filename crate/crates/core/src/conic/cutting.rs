//! Outer approximation of cone constraints by accumulated gradient cuts.
//!
//! Every cone `t ≥ ‖y‖` is replaced by `t ≥ 0` and `t ≥ |y_i|`. Each round
//! solves the resulting quadratic program and, for every cone violated by more
//! than the tolerance at the solution `(t*, y*)`, adds `t ≥ (y*/‖y*‖)ᵀ y`. The
//! cut is valid because `‖y‖ ≥ uᵀy` for any unit vector `u`.

use std::collections::VecDeque;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    AffineExpr, ConicProgram, ConicSolver, LinearConstraint, Sense, SolveOptions, SolveResult,
    SolveStatus,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuttingPlaneOptions {
    /// Absolute tolerance on `‖y‖ − t`.
    pub soc_tolerance: f64,
    pub max_rounds: usize,
    /// FIFO cap on cuts kept per cone; `None` keeps all cuts.
    pub max_cuts_per_cone: Option<usize>,
    pub inner: SolveOptions,
}

impl Default for CuttingPlaneOptions {
    fn default() -> Self {
        CuttingPlaneOptions {
            soc_tolerance: 1e-6,
            max_rounds: 50,
            max_cuts_per_cone: None,
            inner: SolveOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuttingPlaneStats {
    pub rounds: usize,
    pub cuts_added: usize,
    /// Relaxation objective after each round.
    pub objective_history: Vec<f64>,
    /// Largest `‖y‖ − t` at the returned point.
    pub max_cone_gap: f64,
}

fn cut_row(
    name: &str,
    round: usize,
    t: &AffineExpr,
    y: &[AffineExpr],
    dir: &[f64],
) -> LinearConstraint {
    // t − Σ dir_i y_i ≥ 0
    let mut expr = t.clone();
    for (e, &d) in y.iter().zip(dir) {
        if d == 0.0 {
            continue;
        }
        for &(v, c) in &e.terms {
            expr.terms.push((v, -d * c));
        }
        expr.constant -= d * e.constant;
    }
    let rhs = -expr.constant;
    expr.constant = 0.0;
    LinearConstraint {
        name: format!("{name}.cut{round}"),
        expr,
        sense: Sense::Ge,
        rhs,
    }
}

/// Cutting-plane solve of `program` using `solver` for each relaxation.
pub fn cutting_plane_solve(
    program: &ConicProgram,
    solver: &dyn ConicSolver,
    opts: &CuttingPlaneOptions,
) -> SolveResult {
    let start = Instant::now();
    let mut base = program.clone();
    base.socs.clear();
    for soc in &program.socs {
        base.add_linear(
            format!("{}.nonneg", soc.name),
            soc.t.clone(),
            Sense::Ge,
            0.0,
        );
        for (i, y) in soc.y.iter().enumerate() {
            base.add_linear(
                format!("{}.box{i}+", soc.name),
                soc.t.clone().add_all(y, -1.0),
                Sense::Ge,
                0.0,
            );
            base.add_linear(
                format!("{}.box{i}-", soc.name),
                soc.t.clone().add_all(y, 1.0),
                Sense::Ge,
                0.0,
            );
        }
    }
    for row in &mut base.linear {
        let c = row.expr.constant;
        row.expr.constant = 0.0;
        row.rhs -= c;
    }

    let mut cuts: Vec<VecDeque<LinearConstraint>> = vec![VecDeque::new(); program.socs.len()];
    let mut stats = CuttingPlaneStats {
        rounds: 0,
        cuts_added: 0,
        objective_history: Vec::new(),
        max_cone_gap: f64::NAN,
    };
    let mut iterations = 0;
    let mut last: Option<SolveResult> = None;

    for round in 0..opts.max_rounds {
        let mut relaxed = base.clone();
        relaxed.linear.extend(cuts.iter().flatten().cloned());
        let r = solver.solve(&relaxed, &opts.inner);
        iterations += r.iterations;
        stats.rounds = round + 1;
        if r.status != SolveStatus::Optimal {
            let mut out = r;
            out.iterations = iterations;
            out.wall_time = start.elapsed();
            out.message = format!(
                "relaxation in round {} ended with {:?}: {}",
                round + 1,
                out.status,
                out.message
            );
            out.cutting_plane = Some(stats);
            return out;
        }
        stats.objective_history.push(r.objective);

        let x = &r.values;
        let mut max_gap = 0.0_f64;
        let mut added = 0;
        for (k, soc) in program.socs.iter().enumerate() {
            let yv: Vec<f64> = soc.y.iter().map(|e| e.eval(x)).collect();
            let norm = yv.iter().map(|v| v * v).sum::<f64>().sqrt();
            let gap = norm - soc.t.eval(x);
            max_gap = max_gap.max(gap);
            if gap > opts.soc_tolerance && norm > 0.0 {
                let dir: Vec<f64> = yv.iter().map(|v| v / norm).collect();
                cuts[k].push_back(cut_row(&soc.name, round, &soc.t, &soc.y, &dir));
                if let Some(cap) = opts.max_cuts_per_cone {
                    while cuts[k].len() > cap {
                        cuts[k].pop_front();
                    }
                }
                added += 1;
            }
        }
        stats.cuts_added += added;
        stats.max_cone_gap = max_gap;
        last = Some(r);
        if added == 0 {
            break;
        }
    }

    let mut out = last.expect("at least one round ran");
    out.iterations = iterations;
    out.wall_time = start.elapsed();
    out.duals = None;
    out.objective = program.objective.eval(&out.values);
    out.max_violation = program.max_violation(&out.values);
    if stats.max_cone_gap > opts.soc_tolerance {
        out.status = SolveStatus::IterationLimit;
        out.message = format!(
            "cone gap {:e} after {} rounds",
            stats.max_cone_gap, stats.rounds
        );
    }
    out.cutting_plane = Some(stats);
    out
}

impl AffineExpr {
    fn add_all(mut self, other: &AffineExpr, s: f64) -> Self {
        for &(v, c) in &other.terms {
            self.terms.push((v, s * c));
        }
        self.constant += s * other.constant;
        self
    }
}
