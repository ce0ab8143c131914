//! Solver-independent representation of convex quadratic programs with
//! second-order cone constraints, plus solver adapters.
//!
//! Variables are scalars addressed by index and grouped into named blocks.
//! A cone constraint `t ≥ ‖y‖` holds an affine scalar `t` and an affine vector `y`.

mod clarabel_adapter;
mod cutting;

use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use clarabel_adapter::ClarabelSolver;
pub use cutting::{cutting_plane_solve, CuttingPlaneOptions, CuttingPlaneStats};

/// Tolerance used by the independent feasibility re-check of optimal results.
pub const RECHECK_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Var(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarBlock {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl VarBlock {
    pub fn var(&self, k: usize) -> Var {
        assert!(k < self.len, "index {k} outside block {}", self.name);
        Var(self.start + k)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        (self.start..self.start + self.len).map(Var)
    }
}

/// `Σ coef · x + constant`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AffineExpr {
    pub terms: Vec<(Var, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn constant(c: f64) -> Self {
        AffineExpr {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn var(v: Var) -> Self {
        Self::term(v, 1.0)
    }

    pub fn term(v: Var, coef: f64) -> Self {
        AffineExpr {
            terms: vec![(v, coef)],
            constant: 0.0,
        }
    }

    pub fn from_terms(terms: impl IntoIterator<Item = (Var, f64)>) -> Self {
        AffineExpr {
            terms: terms.into_iter().collect(),
            constant: 0.0,
        }
    }

    pub fn add(mut self, v: Var, coef: f64) -> Self {
        self.terms.push((v, coef));
        self
    }

    pub fn plus(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.terms.iter_mut().for_each(|(_, c)| *c *= s);
        self.constant *= s;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(v, c)| c * x[v.0]).sum::<f64>() + self.constant
    }

    /// `Σ |coef · x| + |constant|`, the natural scale for residuals of this expression.
    pub fn magnitude(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(v, c)| (c * x[v.0]).abs())
            .sum::<f64>()
            + self.constant.abs()
    }

    /// Number of stored terms, counting every coefficient (including zeros).
    pub fn nnz(&self) -> usize {
        self.terms.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Le,
    Eq,
    Ge,
}

impl Sense {
    fn symbol(self) -> &'static str {
        match self {
            Sense::Le => "<=",
            Sense::Eq => "==",
            Sense::Ge => ">=",
        }
    }
}

/// `expr sense rhs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraint {
    pub name: String,
    pub expr: AffineExpr,
    pub sense: Sense,
    pub rhs: f64,
}

impl LinearConstraint {
    /// Amount by which `x` violates the row (zero when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let lhs = self.expr.eval(x);
        match self.sense {
            Sense::Le => (lhs - self.rhs).max(0.0),
            Sense::Ge => (self.rhs - lhs).max(0.0),
            Sense::Eq => (lhs - self.rhs).abs(),
        }
    }
}

/// `t ≥ ‖y‖`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocConstraint {
    pub name: String,
    pub t: AffineExpr,
    pub y: Vec<AffineExpr>,
}

impl SocConstraint {
    pub fn norm_y(&self, x: &[f64]) -> f64 {
        self.y.iter().map(|e| e.eval(x).powi(2)).sum::<f64>().sqrt()
    }

    /// `‖y‖ − t`, positive when violated.
    pub fn gap(&self, x: &[f64]) -> f64 {
        self.norm_y(x) - self.t.eval(x)
    }

    /// Nonzero coefficients across `t` and `y`.
    pub fn nnz(&self) -> usize {
        self.t.nnz() + self.y.iter().map(AffineExpr::nnz).sum::<usize>()
    }
}

/// `Σ c · x_i x_j + Σ c · x_i + constant`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Objective {
    pub quadratic: Vec<(Var, Var, f64)>,
    pub linear: Vec<(Var, f64)>,
    pub constant: f64,
}

impl Objective {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.quadratic
            .iter()
            .map(|(i, j, c)| c * x[i.0] * x[j.0])
            .sum::<f64>()
            + self.linear.iter().map(|(v, c)| c * x[v.0]).sum::<f64>()
            + self.constant
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConicProgram {
    pub blocks: Vec<VarBlock>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub objective: Objective,
    pub linear: Vec<LinearConstraint>,
    pub socs: Vec<SocConstraint>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_vars(&self) -> usize {
        self.lower.len()
    }

    /// Declares `len` free variables under `name`.
    pub fn add_block(&mut self, name: &str, len: usize) -> VarBlock {
        self.add_bounded_block(name, len, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn add_bounded_block(
        &mut self,
        name: &str,
        len: usize,
        lower: f64,
        upper: f64,
    ) -> VarBlock {
        let block = VarBlock {
            name: name.to_string(),
            start: self.n_vars(),
            len,
        };
        self.lower.extend(std::iter::repeat_n(lower, len));
        self.upper.extend(std::iter::repeat_n(upper, len));
        self.blocks.push(block.clone());
        block
    }

    pub fn block(&self, name: &str) -> Option<&VarBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn set_bounds(&mut self, v: Var, lower: f64, upper: f64) {
        self.lower[v.0] = lower;
        self.upper[v.0] = upper;
    }

    pub fn fix(&mut self, v: Var, value: f64) {
        self.set_bounds(v, value, value);
    }

    pub fn add_linear(
        &mut self,
        name: impl Into<String>,
        expr: AffineExpr,
        sense: Sense,
        rhs: f64,
    ) {
        self.linear.push(LinearConstraint {
            name: name.into(),
            expr,
            sense,
            rhs,
        });
    }

    pub fn add_soc(&mut self, name: impl Into<String>, t: AffineExpr, y: Vec<AffineExpr>) {
        self.socs.push(SocConstraint {
            name: name.into(),
            t,
            y,
        });
    }

    pub fn var_name(&self, v: Var) -> String {
        self.blocks
            .iter()
            .find(|b| v.0 >= b.start && v.0 < b.start + b.len)
            .map_or_else(
                || format!("x{}", v.0),
                |b| format!("{}[{}]", b.name, v.0 - b.start),
            )
    }

    /// Values of one block from a solution vector.
    pub fn block_values(&self, name: &str, x: &[f64]) -> Option<Vec<f64>> {
        self.block(name)
            .map(|b| x[b.start..b.start + b.len].to_vec())
    }

    /// Structural checks: variable references, bounds, finite data, and a
    /// positive semidefinite quadratic part.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.n_vars();
        let check = |e: &AffineExpr, what: &str| -> Result<(), String> {
            if let Some((v, _)) = e.terms.iter().find(|(v, _)| v.0 >= n) {
                return Err(format!("{what} references undeclared variable {}", v.0));
            }
            if e.terms.iter().any(|(_, c)| !c.is_finite()) || !e.constant.is_finite() {
                return Err(format!("{what} has non-finite data"));
            }
            Ok(())
        };
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if lo > hi || lo.is_nan() || hi.is_nan() {
                return Err(format!(
                    "variable {} has bounds [{lo}, {hi}]",
                    self.var_name(Var(i))
                ));
            }
        }
        for row in &self.linear {
            check(&row.expr, &row.name)?;
            if !row.rhs.is_finite() {
                return Err(format!("{} has non-finite right-hand side", row.name));
            }
        }
        for soc in &self.socs {
            check(&soc.t, &soc.name)?;
            for y in &soc.y {
                check(y, &soc.name)?;
            }
        }
        check(
            &AffineExpr::from_terms(self.objective.linear.iter().copied()),
            "objective",
        )?;
        if let Some((i, j, _)) = self
            .objective
            .quadratic
            .iter()
            .find(|(i, j, _)| i.0 >= n || j.0 >= n)
        {
            return Err(format!(
                "objective references undeclared variable pair ({}, {})",
                i.0, j.0
            ));
        }
        if !self.quadratic_is_psd() {
            return Err("quadratic objective is not positive semidefinite".into());
        }
        Ok(())
    }

    fn quadratic_is_psd(&self) -> bool {
        let q = &self.objective.quadratic;
        if q.iter().all(|(i, j, _)| i == j) {
            let mut diag = std::collections::BTreeMap::new();
            for (i, _, c) in q {
                *diag.entry(i.0).or_insert(0.0) += c;
            }
            return diag.values().all(|&c| c >= 0.0);
        }
        let mut index: Vec<usize> = q.iter().flat_map(|(i, j, _)| [i.0, j.0]).collect();
        index.sort_unstable();
        index.dedup();
        let pos = |v: usize| index.binary_search(&v).expect("collected above");
        let k = index.len();
        let mut m = nalgebra::DMatrix::<f64>::zeros(k, k);
        for (i, j, c) in q {
            let (a, b) = (pos(i.0), pos(j.0));
            m[(a, b)] += c / 2.0;
            m[(b, a)] += c / 2.0;
        }
        let scale = m.amax().max(1.0);
        nalgebra::SymmetricEigen::new(m).eigenvalues.min() >= -1e-10 * scale
    }

    /// Largest scaled violation of any bound, row or cone at `x`. Each residual is
    /// divided by `max(1, scale of the row at x)`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst = 0.0_f64;
        for (i, &v) in x.iter().enumerate() {
            let scale = v.abs().max(1.0);
            worst = worst.max((self.lower[i] - v).max(0.0) / scale);
            worst = worst.max((v - self.upper[i]).max(0.0) / scale);
        }
        for row in &self.linear {
            let scale = (row.expr.magnitude(x) + row.rhs.abs()).max(1.0);
            worst = worst.max(row.violation(x) / scale);
        }
        for soc in &self.socs {
            let scale =
                (soc.t.magnitude(x) + soc.y.iter().map(|e| e.magnitude(x)).sum::<f64>()).max(1.0);
            worst = worst.max(soc.gap(x).max(0.0) / scale);
        }
        worst
    }

    /// Plain-text listing of variables, objective and constraints. The output is
    /// stable for a fixed construction order.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let fmt_expr = |e: &AffineExpr| {
            let mut s = String::new();
            for (v, c) in &e.terms {
                let _ = write!(s, " {:+e} {}", c, self.var_name(*v));
            }
            if e.constant != 0.0 || e.terms.is_empty() {
                let _ = write!(s, " {:+e}", e.constant);
            }
            s
        };
        let _ = writeln!(out, "variables {}", self.n_vars());
        for i in 0..self.n_vars() {
            let _ = writeln!(
                out,
                "  {} in [{:e}, {:e}]",
                self.var_name(Var(i)),
                self.lower[i],
                self.upper[i]
            );
        }
        let _ = writeln!(out, "minimize");
        for (i, j, c) in &self.objective.quadratic {
            let _ = writeln!(
                out,
                "  {:+e} {}*{}",
                c,
                self.var_name(*i),
                self.var_name(*j)
            );
        }
        for (v, c) in &self.objective.linear {
            let _ = writeln!(out, "  {:+e} {}", c, self.var_name(*v));
        }
        let _ = writeln!(out, "  {:+e}", self.objective.constant);
        let _ = writeln!(out, "linear {}", self.linear.len());
        for row in &self.linear {
            let _ = writeln!(
                out,
                "  {}:{} {} {:e}",
                row.name,
                fmt_expr(&row.expr),
                row.sense.symbol(),
                row.rhs
            );
        }
        let _ = writeln!(out, "cones {}", self.socs.len());
        for soc in &self.socs {
            let _ = writeln!(out, "  {}: t ={}", soc.name, fmt_expr(&soc.t));
            for (k, y) in soc.y.iter().enumerate() {
                let _ = writeln!(out, "    y[{k}] ={}", fmt_expr(y));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericFailure,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Feasibility and duality-gap tolerance passed to the interior-point method.
    pub tolerance: f64,
    pub max_iterations: u32,
    pub time_limit: Option<Duration>,
    pub verbose: bool,
    /// Scaled violation above which an optimal result is downgraded.
    pub recheck_tolerance: f64,
    /// Static KKT regularization. The dense `D` rows stall the interior-point
    /// method at the solver's default of `1e-8` on some instances.
    pub static_regularization: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tolerance: 1e-8,
            max_iterations: 200,
            time_limit: None,
            verbose: false,
            recheck_tolerance: RECHECK_TOLERANCE,
            static_regularization: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub values: Vec<f64>,
    /// Objective evaluated at `values` from the program data.
    pub objective: f64,
    /// Multipliers of the linear rows (nonnegative on inequalities).
    pub duals: Option<Vec<f64>>,
    pub iterations: u32,
    pub wall_time: Duration,
    /// Result of the independent re-check at `values`.
    pub max_violation: f64,
    pub message: String,
    pub cutting_plane: Option<CuttingPlaneStats>,
}

impl SolveResult {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    pub(crate) fn failure(
        status: SolveStatus,
        message: impl Into<String>,
        wall_time: Duration,
    ) -> Self {
        SolveResult {
            status,
            values: Vec::new(),
            objective: f64::NAN,
            duals: None,
            iterations: 0,
            wall_time,
            max_violation: f64::NAN,
            message: message.into(),
            cutting_plane: None,
        }
    }
}

/// Adapter contract for conic solvers.
pub trait ConicSolver {
    fn name(&self) -> &str;

    /// Must not panic; failures are reported through the status.
    fn solve(&self, program: &ConicProgram, opts: &SolveOptions) -> SolveResult;
}

/// Solves with the bundled interior-point adapter.
pub fn solve(program: &ConicProgram, opts: &SolveOptions) -> SolveResult {
    ClarabelSolver.solve(program, opts)
}
