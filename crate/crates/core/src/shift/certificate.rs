//! Optimality certificate at a no-improvement stop, and a brute-force
//! reference for the best metric over compatible pairs on tiny instances.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::metric::{MetricModel, MetricSpec};
use super::procedure::{ShiftTrace, StopReason};
use crate::error::{Error, Result};
use crate::opf::{solve_reroute, Instance, OpfOptions};
use crate::stochastic::{
    line_variances, validate_participation, ParticipationMatrix, VarianceMethod,
};

/// Claim that the last accepted metric value is the best over all compatible pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopCertificate {
    /// Iteration whose candidate was rejected.
    pub stop_iteration: usize,
    /// Metric of the last accepted iterate, claimed optimal.
    pub delta_stop: f64,
    /// Metric at the shift target found in the stopping iteration.
    pub witness_delta: f64,
}

/// Issued only for a no-improvement stop under the all-lines metric.
pub fn certify_stop(trace: &ShiftTrace) -> Option<StopCertificate> {
    if trace.stop != StopReason::NoImprovement || trace.metric.model != MetricModel::Sum {
        return None;
    }
    let last = trace.records.last()?;
    if last.stop_reason != Some(StopReason::NoImprovement) {
        return None;
    }
    Some(StopCertificate {
        stop_iteration: last.k,
        delta_stop: trace.final_delta(),
        witness_delta: last.vshift_delta?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForce {
    pub delta_star: f64,
    pub alpha: ParticipationMatrix,
    /// Twice the largest metric change between neighbouring grid points.
    pub resolution_bound: f64,
    pub grid_points: usize,
    pub feasibility_checks: usize,
}

/// All ways to split one unit into `parts` multiples of `1/steps`.
fn compositions(parts: usize, steps: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![steps]];
    }
    let mut out = Vec::new();
    for first in 0..=steps {
        for mut rest in compositions(parts - 1, steps - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Minimum of an all-lines metric over participation matrices with
/// nonnegative entries on a grid of spacing `step`, restricted to matrices
/// that admit a compatible flow (re-dispatch at `τ = 0` feasible).
pub fn brute_force_delta_star(
    inst: &Instance,
    spec: &MetricSpec,
    step: f64,
    opts: &OpfOptions,
) -> Result<BruteForce> {
    if spec.model != MetricModel::Sum {
        return Err(Error::InvalidParameter(
            "brute force supports the all-lines metric only".into(),
        ));
    }
    let steps = (1.0 / step).round() as usize;
    if steps == 0 || ((steps as f64) * step - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "step {step} must divide one"
        )));
    }
    let (nr, ns) = (inst.stoch.n_participants(), inst.stoch.n_sources());
    if nr == 0 {
        return Err(Error::InvalidParameter("no participants".into()));
    }
    let columns = compositions(nr, steps);
    let total = columns
        .len()
        .checked_pow(ns as u32)
        .filter(|&t| t <= 2_000_000);
    let Some(total) = total else {
        return Err(Error::InvalidParameter("grid is too large".into()));
    };
    let w = spec.weights(&inst.grid)?;

    // mixed-radix index over per-column compositions
    let decode = |mut idx: usize| -> Vec<usize> {
        (0..ns)
            .map(|_| {
                let c = idx % columns.len();
                idx /= columns.len();
                c
            })
            .collect()
    };
    let matrix = |digits: &[usize]| {
        let entries = DMatrix::from_fn(nr, ns, |r, k| columns[digits[k]][r] as f64 / steps as f64);
        ParticipationMatrix::new(&inst.stoch, entries).expect("shape matches")
    };
    let mut deltas = Vec::with_capacity(total);
    for idx in 0..total {
        let a = matrix(&decode(idx));
        let s2 = line_variances(&inst.sys, &inst.stoch, &a, VarianceMethod::GammaForm)?;
        deltas.push(s2.iter().zip(&w).map(|(v, w)| v * w).sum::<f64>());
    }

    // neighbours move one grid unit of one source between two participants
    let position: std::collections::HashMap<&[usize], usize> = columns
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_slice(), i))
        .collect();
    let mut max_jump = 0.0_f64;
    for idx in 0..total {
        let digits = decode(idx);
        for k in 0..ns {
            let col = &columns[digits[k]];
            for from in 0..nr {
                if col[from] == 0 {
                    continue;
                }
                for to in 0..nr {
                    if to == from {
                        continue;
                    }
                    let mut moved = col.clone();
                    moved[from] -= 1;
                    moved[to] += 1;
                    let mut nd = digits.clone();
                    nd[k] = position[moved.as_slice()];
                    let nidx = nd.iter().rev().fold(0, |acc, &d| acc * columns.len() + d);
                    max_jump = max_jump.max((deltas[idx] - deltas[nidx]).abs());
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..total).collect();
    order.sort_by(|&a, &b| deltas[a].total_cmp(&deltas[b]).then(a.cmp(&b)));
    let mut checks = 0;
    for idx in order {
        let a = matrix(&decode(idx));
        if !validate_participation(&a, &inst.pattern).ok {
            continue;
        }
        checks += 1;
        match solve_reroute(inst, &a, 0.0, opts) {
            Ok(_) => {
                return Ok(BruteForce {
                    delta_star: deltas[idx],
                    alpha: a,
                    resolution_bound: 2.0 * max_jump,
                    grid_points: total,
                    feasibility_checks: checks,
                })
            }
            Err(Error::Infeasible(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Infeasible(
        "no grid point admits a compatible flow".into(),
    ))
}
