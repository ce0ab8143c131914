//! The sparse safety-constrained formulation.
//!
//! Variables: `p̄` (per generator), `θ̄`, `f̄`, `α` (`|ℛ|·|𝒮|`, row-major by
//! participant), `D` (`n·|𝒮|`), `γ` (`m·|𝒮|`), line deviations `s` and
//! participant deviations `z`. Rows:
//! - nodal balance and flow definitions as in DC-OPF, with `μ` folded in;
//! - `±f̄ + ν s ≤ f^max` per line;
//! - `s_l ≥ ‖b_l Ω^½ γ_lᵀ‖` and `z_r ≥ ‖Ω^½ α_rᵀ‖`;
//! - `p_min ≤ p̄ − ν z` and `p̄ + ν z ≤ p_max` for participants;
//! - `Σ_r α_rk = 1` per source, plus the pattern rows;
//! - `D = B̆𝒜` and `γ_lk = π_l[s_k] − D_fk + D_tk`.
//!
//! `D = B̆𝒜` is imposed by default as `B D = 𝒜` (padded), which keeps the
//! rows as sparse as `B`. Written with `B̆` directly, every `D` row couples all
//! participants of a source and the KKT factor fills in badly on large grids.

use serde::{Deserialize, Serialize};

use super::dcopf::{add_generation_cost, add_network};
use super::{block, require_optimal, run, Diagnostics, DispatchSolution, Instance, OpfOptions};
use crate::conic::{AffineExpr, ConicProgram, Sense, Var, VarBlock};
use crate::error::Result;
use crate::stochastic::{ParticipationMatrix, Policy};

/// How the rows defining `D` are written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DRowForm {
    /// `D_ik − Σ_r B̆_{i,r} α_rk = 0`, keeping structural zeros so every
    /// `(i, r, k)` coefficient is stored.
    Breve,
    /// `Σ_j B_ij D_jk = α_ik` on non-slack rows and `D_slack = 0`; avoids `B̆`.
    #[default]
    Laplacian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SafetyOptions {
    pub d_rows: DRowForm,
}

impl SafetyOptions {
    pub fn with_d_rows(d_rows: DRowForm) -> Self {
        SafetyOptions { d_rows }
    }
}

/// Variable blocks of the participation part.
pub(crate) struct PolicyVars {
    pub alpha: VarBlock,
    pub s: VarBlock,
}

fn alpha_var(alpha: &VarBlock, n_sources: usize, r: usize, k: usize) -> Var {
    alpha.var(r * n_sources + k)
}

/// Adds `α`, `D`, `γ`, `s` with balance, pattern, `D`, `γ` and line-cone rows.
pub(crate) fn add_policy(
    program: &mut ConicProgram,
    inst: &Instance,
    form: DRowForm,
) -> PolicyVars {
    let grid = &inst.grid;
    let stoch = &inst.stoch;
    let (n, m) = (grid.n_buses(), grid.n_lines());
    let (nr, ns) = (stoch.n_participants(), stoch.n_sources());
    let alpha = program.add_block("alpha", nr * ns);
    let d = program.add_block("D", n * ns);
    let gamma = program.add_block("gamma", m * ns);
    let s = program.add_bounded_block("s", m, 0.0, f64::INFINITY);
    let av = |r, k| alpha_var(&alpha, ns, r, k);

    for k in 0..ns {
        let expr = AffineExpr::from_terms((0..nr).map(|r| (av(r, k), 1.0)));
        program.add_linear(format!("alpha_balance[{k}]"), expr, Sense::Eq, 1.0);
    }
    let pattern = &inst.pattern;
    if pattern.nonnegative {
        for v in alpha.vars() {
            program.set_bounds(v, 0.0, f64::INFINITY);
        }
    }
    for b in &pattern.bounds {
        let v = av(b.row, b.col);
        let lo = b.lower.unwrap_or(f64::NEG_INFINITY).max(program.lower[v.0]);
        let hi = b.upper.unwrap_or(f64::INFINITY).min(program.upper[v.0]);
        if lo <= hi {
            program.set_bounds(v, lo, hi);
        } else {
            // contradictory bounds become rows so the solver reports infeasibility
            program.add_linear(
                format!("alpha_lo[{},{}]", b.row, b.col),
                AffineExpr::var(v),
                Sense::Ge,
                lo,
            );
            program.add_linear(
                format!("alpha_hi[{},{}]", b.row, b.col),
                AffineExpr::var(v),
                Sense::Le,
                hi,
            );
        }
    }
    if pattern.policy == Policy::Global {
        for r in 0..nr {
            for k in 1..ns {
                let expr = AffineExpr::var(av(r, k)).add(av(r, 0), -1.0);
                program.add_linear(format!("alpha_global[{r},{k}]"), expr, Sense::Eq, 0.0);
            }
        }
    }

    let dv = |i: usize, k: usize| d.var(i * ns + k);
    match form {
        DRowForm::Breve => {
            let rows: Vec<&[f64]> = stoch
                .participants
                .iter()
                .map(|&bus| inst.sys.breve_row(bus))
                .collect();
            for i in 0..n {
                for k in 0..ns {
                    // B̆ is symmetric: B̆_{i,bus_r} = B̆_{bus_r,i}
                    let mut expr = AffineExpr::var(dv(i, k));
                    for (r, row) in rows.iter().enumerate() {
                        expr.terms.push((av(r, k), -row[i]));
                    }
                    program.add_linear(format!("ddef[{i},{k}]"), expr, Sense::Eq, 0.0);
                }
            }
        }
        DRowForm::Laplacian => {
            let slack = inst.sys.reduction_bus();
            let b = inst.sys.matrix();
            for (i, row) in b.outer_iterator().enumerate() {
                for k in 0..ns {
                    if i == slack {
                        program.fix(dv(i, k), 0.0);
                        continue;
                    }
                    let mut expr = AffineExpr::from_terms(row.iter().map(|(j, &v)| (dv(j, k), v)));
                    if let Some(r) = stoch.participant_index(i) {
                        expr.terms.push((av(r, k), -1.0));
                    }
                    program.add_linear(format!("ddef[{i},{k}]"), expr, Sense::Eq, 0.0);
                }
            }
        }
    }

    let source_rows: Vec<&[f64]> = stoch
        .sources
        .iter()
        .map(|&bus| inst.sys.breve_row(bus))
        .collect();
    let sqrt = stoch.omega_sqrt();
    for l in 0..m {
        let (from, to) = inst.sys.line_endpoints(l);
        for k in 0..ns {
            let expr = AffineExpr::var(gamma.var(l * ns + k))
                .add(dv(from, k), 1.0)
                .add(dv(to, k), -1.0);
            let pi = source_rows[k][from] - source_rows[k][to];
            program.add_linear(format!("gdef[{l},{k}]"), expr, Sense::Eq, pi);
        }
        let bl = inst.sys.susceptance(l);
        let y = (0..ns)
            .map(|j| {
                AffineExpr::from_terms((0..ns).map(|k| (gamma.var(l * ns + k), bl * sqrt[(j, k)])))
            })
            .collect();
        program.add_soc(format!("line_cone[{l}]"), AffineExpr::var(s.var(l)), y);
    }
    PolicyVars { alpha, s }
}

/// Reads `α` from a solution vector, column-normalized.
pub(crate) fn alpha_values(
    program: &ConicProgram,
    inst: &Instance,
    x: &[f64],
) -> ParticipationMatrix {
    let values = block(program, "alpha", x);
    let mut a = ParticipationMatrix::zeros(&inst.stoch);
    let ns = a.n_cols();
    for r in 0..a.n_rows() {
        for k in 0..ns {
            a.entries[(r, k)] = values[r * ns + k];
        }
    }
    // Interior-point output balances each column only to solver accuracy;
    // rescaling restores exact balance without touching zero entries.
    for k in 0..ns {
        let sum: f64 = a.entries.column(k).sum();
        if sum.is_finite() && (sum - 1.0).abs() < 1e-6 {
            a.entries.column_mut(k).unscale_mut(sum);
        }
    }
    a
}

/// `z ≥ ‖Ω^½ α_r‖`, the standard deviation of participant `r`'s output.
pub(crate) fn add_generator_cone(
    program: &mut ConicProgram,
    inst: &Instance,
    alpha: &VarBlock,
    r: usize,
    z: Var,
) {
    let ns = inst.stoch.n_sources();
    let sqrt = inst.stoch.omega_sqrt();
    let y = (0..ns)
        .map(|j| {
            AffineExpr::from_terms((0..ns).map(|k| (alpha_var(alpha, ns, r, k), sqrt[(j, k)])))
        })
        .collect();
    program.add_soc(format!("gen_cone[{r}]"), AffineExpr::var(z), y);
}

pub fn build_safety_opf(inst: &Instance, opts: &SafetyOptions) -> ConicProgram {
    let grid = &inst.grid;
    let stoch = &inst.stoch;
    let ns = stoch.n_sources();
    let mut program = ConicProgram::new();
    let net = add_network(&mut program, inst, true);
    let policy = add_policy(&mut program, inst, opts.d_rows);
    let z = program.add_bounded_block("z", stoch.n_participants(), 0.0, f64::INFINITY);

    for (l, line) in grid.lines.iter().enumerate() {
        for (sign, tag) in [(1.0, "+"), (-1.0, "-")] {
            let expr = AffineExpr::term(net.f.var(l), sign).add(policy.s.var(l), line.nu);
            program.add_linear(format!("safety{tag}[{l}]"), expr, Sense::Le, line.limit);
        }
    }

    for (g, gen) in grid.generators.iter().enumerate() {
        let p = net.p.var(g);
        match inst.generator_participant(g) {
            None => program.set_bounds(p, gen.p_min, gen.p_max),
            Some(r) => {
                add_generator_cone(&mut program, inst, &policy.alpha, r, z.var(r));
                let lo = AffineExpr::var(p).add(z.var(r), -gen.nu);
                program.add_linear(format!("gen_lo[{g}]"), lo, Sense::Ge, gen.p_min);
                let hi = AffineExpr::var(p).add(z.var(r), gen.nu);
                program.add_linear(format!("gen_hi[{g}]"), hi, Sense::Le, gen.p_max);
            }
        }
    }

    add_generation_cost(&mut program, inst, &net.p);
    // c_q α_r Ω α_rᵀ, one term per unordered source pair
    let omega = &stoch.omega;
    for r in 0..stoch.n_participants() {
        let cq = grid.generators[inst.participant_generator(r)]
            .cost
            .quadratic;
        if cq == 0.0 {
            continue;
        }
        for k in 0..ns {
            for j in k..ns {
                let c = if j == k {
                    omega[(k, k)]
                } else {
                    2.0 * omega[(k, j)]
                };
                if c != 0.0 {
                    let (vk, vj) = (
                        alpha_var(&policy.alpha, ns, r, k),
                        alpha_var(&policy.alpha, ns, r, j),
                    );
                    program.objective.quadratic.push((vk, vj, cq * c));
                }
            }
        }
    }
    program
}

pub fn solve_safety_opf(
    inst: &Instance,
    safety: &SafetyOptions,
    opts: &OpfOptions,
) -> Result<DispatchSolution> {
    let program = build_safety_opf(inst, safety);
    let r = run(&program, opts);
    require_optimal("safety OPF", &r)?;
    let theta = block(&program, "theta", &r.values);
    let alpha = alpha_values(&program, inst, &r.values);
    DispatchSolution::from_angles(inst, theta, Some(alpha), Diagnostics::from_result(&r))
}

/// Variable and nonzero counts of the participation part of a program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulationStats {
    pub n_a_vars: usize,
    pub n_d_vars: usize,
    pub n_gamma_vars: usize,
    pub n_other_vars: usize,
    /// `α` coefficients stored in the rows defining `D`.
    pub nnz_d_constraints: usize,
    /// Distinct `γ` variables referenced by the line cones.
    pub nnz_conic_constraints: usize,
}

pub fn formulation_stats(program: &ConicProgram) -> FormulationStats {
    let len = |name| program.block(name).map_or(0, |b| b.len);
    let inside = |name: &str, v: usize| {
        program
            .block(name)
            .is_some_and(|b| v >= b.start && v < b.start + b.len)
    };
    let (n_a, n_d, n_g) = (len("alpha"), len("D"), len("gamma"));
    let nnz_d = program
        .linear
        .iter()
        .filter(|c| c.name.starts_with("ddef["))
        .map(|c| {
            c.expr
                .terms
                .iter()
                .filter(|(v, _)| inside("alpha", v.0))
                .count()
        })
        .sum();
    let mut gammas: Vec<usize> = program
        .socs
        .iter()
        .flat_map(|c| c.y.iter().chain(std::iter::once(&c.t)))
        .flat_map(|e| e.terms.iter().map(|(v, _)| v.0))
        .filter(|&v| inside("gamma", v))
        .collect();
    gammas.sort_unstable();
    gammas.dedup();
    FormulationStats {
        n_a_vars: n_a,
        n_d_vars: n_d,
        n_gamma_vars: n_g,
        n_other_vars: program.n_vars() - n_a - n_d - n_g,
        nnz_d_constraints: nnz_d,
        nnz_conic_constraints: gammas.len(),
    }
}
