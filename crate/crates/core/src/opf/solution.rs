use serde::{Deserialize, Serialize};

use super::Instance;
use crate::conic::{SolveResult, SolveStatus};
use crate::error::{Error, Result};
use crate::stochastic::{generation_stats, line_variances, ParticipationMatrix, VarianceMethod};

/// Summary of the solve that produced a dispatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub status: SolveStatus,
    pub objective: f64,
    pub iterations: u32,
    pub wall_time_ms: f64,
    pub max_violation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutting_plane_rounds: Option<usize>,
}

impl Diagnostics {
    pub fn from_result(r: &SolveResult) -> Self {
        Diagnostics {
            status: r.status,
            objective: r.objective,
            iterations: r.iterations,
            wall_time_ms: r.wall_time.as_secs_f64() * 1e3,
            max_violation: r.max_violation,
            cutting_plane_rounds: r.cutting_plane.as_ref().map(|c| c.rounds),
        }
    }

    /// For dispatches assembled outside a solver.
    pub fn none() -> Self {
        Diagnostics {
            status: SolveStatus::Optimal,
            objective: 0.0,
            iterations: 0,
            wall_time_ms: 0.0,
            max_violation: 0.0,
            cutting_plane_rounds: None,
        }
    }
}

/// Mean dispatch with its balancing policy. Vectors are bus- or line-indexed.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchSolution {
    pub p_bar: Vec<f64>,
    pub theta_bar: Vec<f64>,
    pub f_bar: Vec<f64>,
    pub alpha: Option<ParticipationMatrix>,
    /// Line-flow variances under `alpha`; zero without a policy.
    pub s2: Vec<f64>,
    /// Expected generation cost including the variance terms.
    pub expected_cost: f64,
    pub diagnostics: Diagnostics,
}

impl DispatchSolution {
    /// Builds a dispatch from angles: shifts the slack angle to zero, takes
    /// flows from angle differences and mean generation from nodal balance.
    pub fn from_angles(
        inst: &Instance,
        theta: Vec<f64>,
        alpha: Option<ParticipationMatrix>,
        diagnostics: Diagnostics,
    ) -> Result<Self> {
        let mu = inst.stoch.mu_full(inst.grid.n_buses());
        Self::from_angles_with_mean(inst, theta, &mu, alpha, diagnostics)
    }

    /// As [`DispatchSolution::from_angles`] with an explicit bus-indexed mean injection.
    pub(crate) fn from_angles_with_mean(
        inst: &Instance,
        mut theta: Vec<f64>,
        mu: &[f64],
        alpha: Option<ParticipationMatrix>,
        diagnostics: Diagnostics,
    ) -> Result<Self> {
        let n = inst.grid.n_buses();
        if theta.len() != n {
            return Err(Error::Dimension(format!(
                "{} angles for {n} buses",
                theta.len()
            )));
        }
        let shift = theta[inst.grid.slack];
        for t in &mut theta {
            *t -= shift;
        }
        let f_bar = inst.sys.flows_from_angles(&theta);
        let bt = inst.sys.apply(&theta);
        let index = inst.grid.generator_index();
        let tol = 1e-6 * inst.power_scale();
        let mut p_bar = vec![0.0; n];
        for i in 0..n {
            let p = bt[i] + inst.grid.buses[i].load - mu[i];
            match index[i] {
                Some(_) => p_bar[i] = p,
                None if p.abs() > tol => {
                    return Err(Error::Consistency(format!(
                        "bus {} has injection {p:e} but no generator",
                        inst.grid.label(i)
                    )))
                }
                None => {}
            }
        }
        Self::assemble(inst, p_bar, theta, f_bar, alpha, diagnostics)
    }

    pub(crate) fn assemble(
        inst: &Instance,
        p_bar: Vec<f64>,
        theta_bar: Vec<f64>,
        f_bar: Vec<f64>,
        alpha: Option<ParticipationMatrix>,
        diagnostics: Diagnostics,
    ) -> Result<Self> {
        let s2 = match &alpha {
            Some(a) => line_variances(&inst.sys, &inst.stoch, a, VarianceMethod::GammaForm)?,
            None => vec![0.0; inst.grid.n_lines()],
        };
        let expected_cost = inst
            .grid
            .generators
            .iter()
            .map(|g| match &alpha {
                Some(a) => generation_stats(&inst.stoch, a, g, p_bar[g.bus]).expected_cost,
                None => g.cost.eval(p_bar[g.bus]),
            })
            .sum();
        Ok(DispatchSolution {
            p_bar,
            theta_bar,
            f_bar,
            alpha,
            s2,
            expected_cost,
            diagnostics,
        })
    }

    /// Standard deviations `√s²`.
    pub fn std_devs(&self) -> Vec<f64> {
        self.s2.iter().map(|v| v.sqrt()).collect()
    }

    /// JSON with buses referenced by case-file label.
    pub fn to_json(&self, inst: &Instance) -> Result<String> {
        let file = SolutionFile {
            status: self.diagnostics.status,
            expected_cost: self.expected_cost,
            bus_labels: inst.grid.buses.iter().map(|b| b.label).collect(),
            p_bar: self.p_bar.clone(),
            theta_bar: self.theta_bar.clone(),
            f_bar: self.f_bar.clone(),
            s2: self.s2.clone(),
            alpha: self.alpha.as_ref().map(|a| {
                a.triplets()
                    .into_iter()
                    .map(|(p, s, v)| (inst.grid.label(p), inst.grid.label(s), v))
                    .collect()
            }),
            diagnostics: self.diagnostics.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Reads a solution written by [`DispatchSolution::to_json`]. Variances and
    /// expected cost are recomputed from the instance.
    pub fn from_json(text: &str, inst: &Instance) -> Result<Self> {
        let file: SolutionFile = serde_json::from_str(text)?;
        let n = inst.grid.n_buses();
        let m = inst.grid.n_lines();
        let labels: Vec<u64> = inst.grid.buses.iter().map(|b| b.label).collect();
        if file.bus_labels != labels {
            return Err(Error::parse("solution", "bus labels do not match the case"));
        }
        if file.p_bar.len() != n || file.theta_bar.len() != n || file.f_bar.len() != m {
            return Err(Error::parse(
                "solution",
                "vector lengths do not match the case",
            ));
        }
        let alpha = match file.alpha {
            None => None,
            Some(triplets) => {
                let mut a = ParticipationMatrix::zeros(&inst.stoch);
                let mut seen = vec![false; a.entries.len()];
                for (p, s, v) in triplets {
                    let bus = |l| inst.grid.bus_by_label(l).ok_or(Error::UnknownBus(l));
                    let (pb, sb) = (bus(p)?, bus(s)?);
                    let r = inst.stoch.participant_index(pb).ok_or_else(|| {
                        Error::parse("solution", format!("bus {p} is not a participant"))
                    })?;
                    let k = inst
                        .stoch
                        .sources
                        .iter()
                        .position(|&x| x == sb)
                        .ok_or_else(|| {
                            Error::parse("solution", format!("bus {s} is not a source"))
                        })?;
                    a.entries[(r, k)] = v;
                    seen[r + k * a.n_rows()] = true;
                }
                if seen.iter().any(|s| !s) {
                    return Err(Error::parse(
                        "solution",
                        "participation triplets are incomplete",
                    ));
                }
                Some(a)
            }
        };
        let mut sol = Self::assemble(
            inst,
            file.p_bar,
            file.theta_bar,
            file.f_bar,
            alpha,
            file.diagnostics,
        )?;
        sol.diagnostics.status = file.status;
        Ok(sol)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SolutionFile {
    status: SolveStatus,
    expected_cost: f64,
    bus_labels: Vec<u64>,
    p_bar: Vec<f64>,
    theta_bar: Vec<f64>,
    f_bar: Vec<f64>,
    s2: Vec<f64>,
    /// `(participant_bus, source_bus, alpha)` triplets.
    alpha: Option<Vec<(u64, u64, f64)>>,
    diagnostics: Diagnostics,
}
