//! Iterative variance shifting: re-dispatch under tightened limits, re-select
//! participation factors, then move toward them as far as compatibility allows.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metric::{metric_eval, MetricSpec};
use crate::error::{Error, Result};
use crate::opf::{
    check_compatible, reconstruct_angles, solve_reroute, solve_vshift, tight_set, Diagnostics,
    DispatchSolution, Instance, OpfOptions,
};
use crate::stochastic::{
    line_variance_path, participant_variance_path, ParticipationMatrix, Quadratic,
};

/// Steps at or below this are treated as zero.
pub const MIN_STEP: f64 = 1e-12;

/// Relative tolerance of the no-improvement test.
pub const STOP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "index")]
pub enum Binding {
    Line(usize),
    Generator(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub lambda: f64,
    /// Constraint that limits the step, if any is active before `t = 1`.
    pub binding: Option<Binding>,
    /// The step is numerically zero.
    pub degenerate: bool,
}

/// Largest `t ≥ 0` with `q(t) ≤ r`, given `q(0) ≤ r` up to round-off and `q` convex.
fn admissible_until(q: &Quadratic, r: f64) -> f64 {
    let c = q.c.min(r);
    let (a, b) = (q.a, q.b);
    // roots of a t² + b t + (c − r) = 0
    let disc = b * b - 4.0 * a * (c - r);
    if disc < 0.0 {
        return f64::INFINITY;
    }
    let sq = disc.sqrt();
    if b > 0.0 {
        2.0 * (r - c) / (b + sq)
    } else if a > 0.0 {
        (-b + sq) / (2.0 * a)
    } else {
        f64::INFINITY
    }
}

/// Largest `λ ∈ [0, 1]` such that `(f̄, (1 − λ) a_prev + λ a_hat)` keeps every
/// line and generator safety margin. Variances along the segment are exact
/// quadratics in `λ`.
pub fn max_step(
    inst: &Instance,
    f_bar: &[f64],
    a_prev: &ParticipationMatrix,
    a_hat: &ParticipationMatrix,
) -> Result<StepResult> {
    let grid = &inst.grid;
    let mut lambda = 1.0_f64;
    let mut binding = None;
    let mut consider = |t: f64, what: Binding| {
        if t < lambda {
            lambda = t;
            binding = Some(what);
        }
    };

    let lines = line_variance_path(&inst.sys, &inst.stoch, a_prev, a_hat)?;
    for (l, line) in grid.lines.iter().enumerate() {
        if line.nu <= 0.0 {
            continue;
        }
        let room = ((line.limit - f_bar[l].abs()) / line.nu).max(0.0);
        consider(admissible_until(&lines[l], room * room), Binding::Line(l));
    }

    let theta = reconstruct_angles(inst, f_bar)?;
    let bt = inst.sys.apply(&theta);
    let mu = inst.stoch.mu_full(grid.n_buses());
    let gens = participant_variance_path(&inst.stoch, a_prev, a_hat);
    for (r, q) in gens.iter().enumerate() {
        let g = inst.participant_generator(r);
        let gen = &grid.generators[g];
        if gen.nu <= 0.0 {
            continue;
        }
        let p = bt[gen.bus] + grid.buses[gen.bus].load - mu[gen.bus];
        let room = ((gen.p_max - p).min(p - gen.p_min) / gen.nu).max(0.0);
        consider(admissible_until(q, room * room), Binding::Generator(g));
    }

    let lambda = lambda.clamp(0.0, 1.0);
    Ok(StepResult {
        lambda,
        binding,
        degenerate: lambda <= MIN_STEP,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftOptions {
    pub metric: MetricSpec,
    pub tau: f64,
    /// Maximum number of iterations `K`.
    pub iterations: usize,
    /// After a no-improvement stop, halve `τ` and keep going while iterations remain.
    pub retry_after_stop: bool,
    /// Halvings of `τ` allowed when the re-dispatch is infeasible.
    pub max_tau_halvings: usize,
    pub opf: OpfOptions,
}

impl ShiftOptions {
    pub fn new(metric: MetricSpec, tau: f64, iterations: usize) -> Self {
        ShiftOptions {
            metric,
            tau,
            iterations,
            retry_after_stop: false,
            max_tau_halvings: 8,
            opf: OpfOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// All iterations ran.
    IterationLimit,
    /// The metric did not improve; the previous iterate is kept.
    NoImprovement,
    /// Re-dispatch stayed infeasible after every `τ` halving.
    Step1Infeasible,
    /// The admissible step was numerically zero.
    ZeroStep,
    SolverFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRecord {
    pub k: usize,
    pub cost: f64,
    pub delta: f64,
    pub lambda: Option<f64>,
    pub tight_count: usize,
    pub tau: f64,
    pub stop_reason: Option<StopReason>,
    /// Metric value at the unconstrained shift target `𝒜̂_k`.
    pub vshift_delta: Option<f64>,
    /// Whether this iterate became the current solution.
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftTrace {
    pub records: Vec<ShiftRecord>,
    /// Last accepted iterate.
    pub solution: DispatchSolution,
    pub stop: StopReason,
    pub metric: MetricSpec,
}

impl ShiftTrace {
    /// One JSON object per record.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{}", serde_json::to_string(r)?);
        }
        Ok(out)
    }

    pub fn accepted(&self) -> impl Iterator<Item = &ShiftRecord> {
        self.records.iter().filter(|r| r.accepted)
    }

    pub fn initial_delta(&self) -> f64 {
        self.records[0].delta
    }

    pub fn final_delta(&self) -> f64 {
        self.accepted().last().map_or(f64::NAN, |r| r.delta)
    }
}

/// Metric value of a dispatch, with the tight set taken at `tau`.
pub fn dispatch_metric(
    inst: &Instance,
    sol: &DispatchSolution,
    spec: &MetricSpec,
    tau: f64,
) -> Result<(f64, usize)> {
    let a = sol
        .alpha
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("dispatch has no participation matrix".into()))?;
    let tight = tight_set(inst, &sol.f_bar, a, tau)?;
    let delta = metric_eval(spec, &inst.grid, &sol.f_bar, &sol.s2, Some(&sol.s2), &tight)?;
    Ok((delta, tight.len()))
}

fn stop_record(k: usize, tau: f64, reason: StopReason, message: String) -> ShiftRecord {
    ShiftRecord {
        k,
        cost: f64::NAN,
        delta: f64::NAN,
        lambda: None,
        tight_count: 0,
        tau,
        stop_reason: Some(reason),
        vshift_delta: None,
        accepted: false,
        message: Some(message),
    }
}

/// Runs up to `opts.iterations` shifting iterations from a compatible start.
/// Inner solver failures end the run with a partial trace.
pub fn run_procedure(
    inst: &Instance,
    start: &DispatchSolution,
    opts: &ShiftOptions,
) -> Result<ShiftTrace> {
    if !opts.metric.supports_shifting() {
        return Err(Error::InvalidParameter(format!(
            "metric '{}' cannot drive shifting",
            opts.metric
        )));
    }
    if !(opts.tau > 0.0 && opts.tau < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "tau {} must lie in (0, 1)",
            opts.tau
        )));
    }
    let a0 = start.alpha.clone().ok_or_else(|| {
        Error::InvalidParameter("start dispatch has no participation matrix".into())
    })?;
    let report = check_compatible(inst, &start.f_bar, &a0)?;
    if !report.compatible {
        return Err(Error::InvalidParameter(format!(
            "start dispatch is not compatible: {}",
            report.violations[0].message
        )));
    }

    let mut tau = opts.tau;
    let (delta0, tight0) = dispatch_metric(inst, start, &opts.metric, tau)?;
    let mut records = vec![ShiftRecord {
        k: 0,
        cost: start.expected_cost,
        delta: delta0,
        lambda: None,
        tight_count: tight0,
        tau,
        stop_reason: None,
        vshift_delta: None,
        accepted: true,
        message: None,
    }];
    let mut current = start.clone();
    let mut delta_prev = delta0;
    let mut stop = StopReason::IterationLimit;

    let mut k = 1;
    while k <= opts.iterations {
        let a_prev = current.alpha.clone().expect("iterates carry a policy");

        // re-dispatch with frozen factors, halving τ while infeasible
        let mut rerouted = None;
        let mut last_err = String::new();
        for _ in 0..=opts.max_tau_halvings {
            match solve_reroute(inst, &a_prev, tau, &opts.opf) {
                Ok(s) => {
                    rerouted = Some(s);
                    break;
                }
                Err(Error::Infeasible(msg)) => {
                    last_err = msg;
                    tau /= 2.0;
                }
                Err(e) => {
                    records.push(stop_record(
                        k,
                        tau,
                        StopReason::SolverFailure,
                        e.to_string(),
                    ));
                    stop = StopReason::SolverFailure;
                    break;
                }
            }
        }
        if stop == StopReason::SolverFailure {
            break;
        }
        let Some(rerouted) = rerouted else {
            records.push(stop_record(k, tau, StopReason::Step1Infeasible, last_err));
            stop = StopReason::Step1Infeasible;
            break;
        };
        let f_k = rerouted.f_bar.clone();

        let target = match solve_vshift(inst, &f_k, &a_prev, tau, &opts.metric, &opts.opf) {
            Ok(t) => t,
            Err(e) => {
                records.push(stop_record(
                    k,
                    tau,
                    StopReason::SolverFailure,
                    e.to_string(),
                ));
                stop = StopReason::SolverFailure;
                break;
            }
        };

        let step = max_step(inst, &f_k, &a_prev, &target.alpha)?;
        if step.degenerate {
            let mut rec = stop_record(
                k,
                tau,
                StopReason::ZeroStep,
                format!("step limited by {:?}", step.binding),
            );
            rec.lambda = Some(step.lambda);
            rec.vshift_delta = Some(target.metric_value);
            records.push(rec);
            stop = StopReason::ZeroStep;
            break;
        }
        let a_k = a_prev.lerp(&target.alpha, step.lambda);
        let report = check_compatible(inst, &f_k, &a_k)?;
        if !report.compatible {
            return Err(Error::Consistency(format!(
                "iterate {k} is not compatible: {}",
                report.violations[0].message
            )));
        }
        let candidate = DispatchSolution::assemble(
            inst,
            rerouted.p_bar,
            rerouted.theta_bar,
            f_k,
            Some(a_k),
            Diagnostics {
                ..rerouted.diagnostics
            },
        )?;
        let (delta_k, tight_k) = dispatch_metric(inst, &candidate, &opts.metric, tau)?;
        let no_gain = delta_k >= delta_prev - STOP_TOLERANCE * delta_prev.abs().max(1.0);
        records.push(ShiftRecord {
            k,
            cost: candidate.expected_cost,
            delta: delta_k,
            lambda: Some(step.lambda),
            tight_count: tight_k,
            tau,
            stop_reason: no_gain.then_some(StopReason::NoImprovement),
            vshift_delta: Some(target.metric_value),
            accepted: !no_gain,
            message: None,
        });
        if no_gain {
            stop = StopReason::NoImprovement;
            if opts.retry_after_stop && k < opts.iterations {
                tau /= 2.0;
                k += 1;
                continue;
            }
            break;
        }
        stop = StopReason::IterationLimit;
        current = candidate;
        delta_prev = delta_k;
        k += 1;
    }

    Ok(ShiftTrace {
        records,
        solution: current,
        stop,
        metric: opts.metric.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, Generator, Grid, Line, QuadCost};
    use crate::opf::{solve_safety_opf, SafetyOptions};
    use crate::shift::metric::Weights;
    use crate::stochastic::{PatternK, StochasticModel};
    use nalgebra::DMatrix;

    /// Three-bus cycle with one unit-variance source at bus 0 and participants
    /// at buses 0 and 2.
    fn cycle(limit: f64) -> Instance {
        let bus = |id: usize, load: f64| Bus {
            id,
            label: id as u64 + 1,
            load,
        };
        let line = |from, to| Line {
            from,
            to,
            susceptance: 1.0,
            limit,
            nu: 3.0,
        };
        let gen = |bus, lin| Generator {
            bus,
            p_min: -100.0,
            p_max: 100.0,
            cost: QuadCost::linear(lin),
            nu: 3.0,
        };
        let grid = Grid {
            base_mva: 100.0,
            buses: vec![bus(0, 0.0), bus(1, 10.0), bus(2, 0.0)],
            lines: vec![line(0, 1), line(1, 2), line(0, 2)],
            generators: vec![gen(0, 1.0), gen(2, 0.5)],
            slack: 0,
        };
        let stoch = StochasticModel::new(
            vec![0],
            vec![0.0],
            DMatrix::from_element(1, 1, 1.0),
            vec![0, 2],
        )
        .unwrap();
        Instance::new(grid, stoch, PatternK::default()).unwrap()
    }

    fn alpha(inst: &Instance, a0: f64) -> ParticipationMatrix {
        ParticipationMatrix::new(
            &inst.stoch,
            DMatrix::from_column_slice(2, 1, &[a0, 1.0 - a0]),
        )
        .unwrap()
    }

    #[test]
    fn quadratic_roots() {
        // t ≤ 0.1 for the linear constraint 0.9 + 3t ≤ 1 expressed on s² = t²/9 ≤ 1/900
        let q = Quadratic {
            a: 1.0 / 9.0,
            b: 0.0,
            c: 0.0,
        };
        assert!((admissible_until(&q, 1.0 / 900.0) - 0.1).abs() < 1e-12);
        let flat = Quadratic {
            a: 0.0,
            b: -1.0,
            c: 1.0,
        };
        assert_eq!(admissible_until(&flat, 1.0), f64::INFINITY);
        // dips then recovers: q(t) = (t − 1)², from 1 back to 1 at t = 2
        let dip = Quadratic {
            a: 1.0,
            b: -2.0,
            c: 1.0,
        };
        assert!((admissible_until(&dip, 1.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn same_matrix_gives_full_step() {
        let inst = cycle(100.0);
        let a = alpha(&inst, 0.3);
        let step = max_step(&inst, &[0.0; 3], &a, &a).unwrap();
        assert_eq!(step.lambda, 1.0);
        assert!(step.binding.is_none());
    }

    #[test]
    fn three_cycle_step_is_one_tenth() {
        // source at 0 fully absorbed at 0 has no flow variance; moving the
        // absorption to bus 2 gives s_01(t) = t/3, so 0.9 + 3·t/3 ≤ 1 at t = 0.1
        let inst = cycle(1.0);
        let a_prev = alpha(&inst, 1.0);
        let a_hat = alpha(&inst, 0.0);
        // θ = (0, −0.9, 0)
        let f = [0.9, -0.9, 0.0];
        let step = max_step(&inst, &f, &a_prev, &a_hat).unwrap();
        assert!((step.lambda - 0.1).abs() < 1e-9, "{}", step.lambda);
    }

    #[test]
    fn zero_iterations_is_the_start() {
        let inst = cycle(100.0);
        let start =
            solve_safety_opf(&inst, &SafetyOptions::default(), &OpfOptions::default()).unwrap();
        let trace = run_procedure(
            &inst,
            &start,
            &ShiftOptions::new(MetricSpec::sum(Weights::Unit), 0.1, 0),
        )
        .unwrap();
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.stop, StopReason::IterationLimit);
        assert_eq!(trace.solution, start);
    }

    #[test]
    fn self_absorption_then_stop() {
        let inst = cycle(100.0);
        let start = DispatchSolution::assemble(
            &inst,
            vec![0.0, 0.0, 10.0],
            vec![0.0; 3],
            inst.sys.dc_flows(&[0.0, -10.0, 10.0]).unwrap(),
            Some(alpha(&inst, 0.0)),
            Diagnostics::none(),
        )
        .unwrap();
        let trace = run_procedure(
            &inst,
            &start,
            &ShiftOptions::new(MetricSpec::sum(Weights::Unit), 0.1, 3),
        )
        .unwrap();
        assert!(trace.records[0].delta > 0.1);
        assert!(trace.records[1].accepted);
        assert!(trace.records[1].delta < 1e-8, "{:?}", trace.records);
        assert_eq!(trace.stop, StopReason::NoImprovement);
        assert_eq!(trace.records.len(), 3);
        assert!(trace.final_delta() < 1e-8);
        let jsonl = trace.to_jsonl().unwrap();
        assert_eq!(jsonl.lines().count(), 3);
        assert!(jsonl
            .lines()
            .next()
            .unwrap()
            .starts_with("{\"k\":0,\"cost\":"));
    }
}
