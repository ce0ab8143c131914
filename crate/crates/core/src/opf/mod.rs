//! Dispatch formulations: deterministic DC-OPF, the safety-constrained
//! problem, and the two inner problems of the shifting procedure.

mod compat;
mod dcopf;
mod reroute;
mod safety;
mod solution;
mod vshift;

pub use compat::{
    check_compatible, reconstruct_angles, tight_set, CompatViolation, CompatibilityReport,
    ViolationKind, CYCLE_TOLERANCE, MARGIN_TOLERANCE,
};
pub use dcopf::{build_dcopf, solve_dcopf};
pub use reroute::{build_reroute, solve_reroute};
pub use safety::{
    build_safety_opf, formulation_stats, solve_safety_opf, DRowForm, FormulationStats,
    SafetyOptions,
};
pub use solution::{Diagnostics, DispatchSolution};
pub use vshift::{build_vshift, solve_vshift, VShiftResult, VShiftSets};

use serde::{Deserialize, Serialize};

use crate::conic::{
    self, cutting_plane_solve, ClarabelSolver, ConicProgram, CuttingPlaneOptions, SolveOptions,
    SolveResult, SolveStatus,
};
use crate::error::{Error, Result};
use crate::grid::{validate, Grid};
use crate::linalg::SusceptanceSystem;
use crate::stochastic::{PatternK, StochasticModel};

/// A grid with its stochastic model, participation pattern and factored
/// susceptance system.
#[derive(Debug)]
pub struct Instance {
    pub grid: Grid,
    pub stoch: StochasticModel,
    pub pattern: PatternK,
    pub sys: SusceptanceSystem,
    /// Generator index of each participant.
    participant_gen: Vec<usize>,
}

impl Instance {
    pub fn new(grid: Grid, stoch: StochasticModel, pattern: PatternK) -> Result<Self> {
        let report = validate(&grid, None);
        if !report.ok {
            let msgs: Vec<String> = report
                .violations
                .iter()
                .map(|v| format!("{}: {}", v.code, v.message))
                .collect();
            return Err(Error::InvalidParameter(format!(
                "invalid grid: {}",
                msgs.join("; ")
            )));
        }
        stoch.check_against(&grid)?;
        let index = grid.generator_index();
        let participant_gen = stoch
            .participants
            .iter()
            .map(|&b| {
                index[b].ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "participant bus {} has no generator",
                        grid.label(b)
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for b in &pattern.bounds {
            if b.row >= stoch.n_participants() || b.col >= stoch.n_sources() {
                return Err(Error::Dimension(
                    "participation bound outside the matrix".into(),
                ));
            }
        }
        let sys = SusceptanceSystem::build(&grid)?;
        Ok(Instance {
            grid,
            stoch,
            pattern,
            sys,
            participant_gen,
        })
    }

    /// Generator index of participant `r`.
    pub fn participant_generator(&self, r: usize) -> usize {
        self.participant_gen[r]
    }

    /// Participant position of generator `g`, if it participates.
    pub fn generator_participant(&self, g: usize) -> Option<usize> {
        self.participant_gen.iter().position(|&x| x == g)
    }

    /// Scale for absolute power tolerances.
    pub(crate) fn power_scale(&self) -> f64 {
        let mu: f64 = self.stoch.mu.iter().map(|v| v.abs()).sum();
        1.0_f64.max(self.grid.total_load().abs()).max(mu)
    }
}

/// How cone constraints are handled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    Direct,
    CuttingPlane(CuttingPlaneOptions),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfOptions {
    pub mode: SolveMode,
    pub solver: SolveOptions,
}

impl Default for OpfOptions {
    fn default() -> Self {
        OpfOptions {
            mode: SolveMode::Direct,
            solver: SolveOptions::default(),
        }
    }
}

impl OpfOptions {
    pub fn cutting_plane() -> Self {
        OpfOptions {
            mode: SolveMode::CuttingPlane(CuttingPlaneOptions::default()),
            solver: SolveOptions::default(),
        }
    }
}

pub(crate) fn run(program: &ConicProgram, opts: &OpfOptions) -> SolveResult {
    match &opts.mode {
        SolveMode::Direct => conic::solve(program, &opts.solver),
        SolveMode::CuttingPlane(cp) => {
            let cp = CuttingPlaneOptions {
                inner: opts.solver.clone(),
                ..cp.clone()
            };
            cutting_plane_solve(program, &ClarabelSolver, &cp)
        }
    }
}

/// Maps a non-optimal result to an error.
pub(crate) fn require_optimal(what: &str, r: &SolveResult) -> Result<()> {
    match r.status {
        SolveStatus::Optimal => Ok(()),
        SolveStatus::Infeasible => Err(Error::Infeasible(format!("{what}: {}", r.message))),
        s => Err(Error::Solver(format!(
            "{what} ended with {s:?}: {}",
            r.message
        ))),
    }
}

pub(crate) fn block(program: &ConicProgram, name: &str, x: &[f64]) -> Vec<f64> {
    program.block_values(name, x).unwrap_or_default()
}
