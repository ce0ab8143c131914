//! `vaopf`: solve, shift and validate safety-constrained DC-OPF instances.
//!
//! Exit codes: 0 ok, 1 infeasible or violation found, 2 input error, 3 solver error.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use vaopf::figure1::{build_figure1, Figure1Params, Figure1Variant};
use vaopf::matpower::{parse_matpower_with, serialize_matpower, ParseOptions};
use vaopf::montecarlo::{simulate_seeded, stats_csv, violation_report};
use vaopf::opf::{
    build_dcopf, build_safety_opf, check_compatible, formulation_stats, solve_dcopf,
    solve_safety_opf, DRowForm, DispatchSolution, Instance, OpfOptions, SafetyOptions,
};
use vaopf::shift::{
    dispatch_metric, run_procedure, MetricSpec, ShiftOptions, ShiftTrace, StopReason,
};
use vaopf::stochastic::{
    nu_from_epsilon, parse_stochastic, serialize_stochastic, PatternK, StochasticModel,
};
use vaopf::Error;

#[derive(Parser, Debug)]
#[command(
    name = "vaopf",
    version,
    about = "Safety-constrained DC-OPF with participation factors and variance shifting"
)]
struct Cli {
    /// MATPOWER case file.
    #[arg(long, global = true)]
    case: Option<PathBuf>,
    /// Stochastic model (JSON).
    #[arg(long, global = true)]
    stoch: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Interior-point tolerance.
    #[arg(long, global = true, default_value_t = 1e-8)]
    tol: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve one OPF and write `solution.json`.
    Solve(SolveArgs),
    /// Run the variance-shifting procedure and write `trace.jsonl`.
    Shift(ShiftArgs),
    /// Monte-Carlo check of a solution file.
    Validate(ValidateArgs),
    /// Write the star-and-path example as `fig1.m` and `fig1.json`.
    GenFig1(Fig1Args),
    /// Print instance and formulation sizes.
    Stats(SafetyArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Dcopf,
    Safety,
    SafetyCuttingPlane,
}

#[derive(Args, Debug, Clone)]
struct SafetyArgs {
    /// Safety parameter for every line and generator.
    #[arg(long, conflicts_with = "epsilon")]
    nu: Option<f64>,
    /// Violation probability; sets `nu` to the matching Gaussian quantile.
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct MetricArgs {
    /// Variance metric, e.g. `sum`, `sum:inverse-limit`, `top-flow:N=10`, `composite:N=100`.
    #[arg(long, default_value = "composite:N=100")]
    metric: String,
    /// Tight-set margin.
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[arg(long, value_enum, default_value_t = Mode::Safety)]
    mode: Mode,
    #[command(flatten)]
    safety: SafetyArgs,
    #[command(flatten)]
    metric: MetricArgs,
    /// Also write the conic program listing to `program.txt`.
    #[arg(long)]
    dump_program: bool,
}

#[derive(Args, Debug)]
struct ShiftArgs {
    #[command(flatten)]
    safety: SafetyArgs,
    #[command(flatten)]
    metric: MetricArgs,
    /// Maximum number of iterations.
    #[arg(short = 'K', long = "iterations", default_value_t = 2)]
    iterations: usize,
    /// After a no-improvement stop, halve `tau` and continue.
    #[arg(long)]
    retry_after_stop: bool,
    /// Starting solution; a fresh safety solve when absent.
    #[arg(long)]
    solution: Option<PathBuf>,
    /// Solve the inner problems by cutting planes.
    #[arg(long)]
    cutting_plane: bool,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[command(flatten)]
    safety: SafetyArgs,
    /// Solution file to check.
    #[arg(long)]
    solution: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Unlimited,
    Limited,
}

#[derive(Args, Debug)]
struct Fig1Args {
    #[arg(long, value_enum, default_value_t = VariantArg::Unlimited)]
    variant: VariantArg,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Number of empty buses on the path.
    #[arg(long = "path-len", default_value_t = 10)]
    path_len: usize,
    #[arg(long, default_value_t = 800.0)]
    load: f64,
    /// Source mean; the limited variant fixes it at a quarter of the load.
    #[arg(long, default_value_t = 200.0)]
    mu: f64,
    /// Source standard deviation; the limited variant fixes it at an eighth of the load.
    #[arg(long, default_value_t = 100.0)]
    sigma: f64,
}

/// Failure with a chosen exit code.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(Exit(code, _)) = err.downcast_ref::<Exit>() {
        return *code;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Infeasible(_)) => 1,
        Some(Error::Solver(_) | Error::Consistency(_) | Error::Unbalanced { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    match &cli.command {
        Command::Solve(a) => cmd_solve(cli, a),
        Command::Shift(a) => cmd_shift(cli, a),
        Command::Validate(a) => cmd_validate(cli, a),
        Command::GenFig1(a) => cmd_gen_fig1(cli, a),
        Command::Stats(a) => cmd_stats(cli, a),
    }
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write(dir: &Path, name: &str, text: &str) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

fn safety_nu(args: &SafetyArgs) -> anyhow::Result<Option<f64>> {
    match (args.nu, args.epsilon) {
        (Some(nu), _) if !(nu >= 0.0) => bail!(Error::InvalidParameter(format!(
            "nu must be nonnegative, got {nu}"
        ))),
        (Some(nu), _) => Ok(Some(nu)),
        (None, Some(eps)) => Ok(Some(nu_from_epsilon(eps)?)),
        (None, None) => Ok(None),
    }
}

fn load_instance(cli: &Cli, safety: &SafetyArgs, need_stoch: bool) -> anyhow::Result<Instance> {
    let case = cli
        .case
        .as_ref()
        .ok_or_else(|| Exit(2, "--case is required".into()))?;
    let mut opts = ParseOptions::default();
    if let Some(nu) = safety_nu(safety)? {
        opts.line_nu = nu;
        opts.gen_nu = nu;
    }
    let grid = parse_matpower_with(&read(case)?, &opts)?;
    let (stoch, pattern) = match &cli.stoch {
        Some(path) => parse_stochastic(&read(path)?, &grid)?,
        None if need_stoch => return Err(Exit(2, "--stoch is required".into()).into()),
        None => (StochasticModel::deterministic(), PatternK::default()),
    };
    Ok(Instance::new(grid, stoch, pattern)?)
}

fn opf_options(cli: &Cli, cutting_plane: bool) -> anyhow::Result<OpfOptions> {
    if !(cli.tol > 0.0) {
        bail!(Error::InvalidParameter(format!(
            "tolerance must be positive, got {}",
            cli.tol
        )));
    }
    let mut opts = if cutting_plane {
        OpfOptions::cutting_plane()
    } else {
        OpfOptions::default()
    };
    opts.solver.tolerance = cli.tol;
    if let vaopf::opf::SolveMode::CuttingPlane(cp) = &mut opts.mode {
        cp.inner.tolerance = cli.tol;
    }
    Ok(opts)
}

fn metric_spec(args: &MetricArgs) -> anyhow::Result<MetricSpec> {
    args.metric.parse::<MetricSpec>().map_err(|e| {
        anyhow!(Error::InvalidParameter(format!(
            "metric '{}': {e}",
            args.metric
        )))
    })
}

fn cmd_solve(cli: &Cli, a: &SolveArgs) -> anyhow::Result<u8> {
    let inst = load_instance(cli, &a.safety, a.mode != Mode::Dcopf)?;
    let opts = opf_options(cli, a.mode == Mode::SafetyCuttingPlane)?;
    if a.dump_program {
        let program = match a.mode {
            Mode::Dcopf => build_dcopf(&inst, true),
            _ => build_safety_opf(&inst, &SafetyOptions::default()),
        };
        write(&cli.out, "program.txt", &program.dump())?;
    }
    let sol = match a.mode {
        Mode::Dcopf => solve_dcopf(&inst, true, &opts)?,
        _ => solve_safety_opf(&inst, &SafetyOptions::default(), &opts)?,
    };
    let path = write(&cli.out, "solution.json", &sol.to_json(&inst)?)?;
    println!("status         {:?}", sol.diagnostics.status);
    println!("expected cost  {:.6}", sol.expected_cost);
    let mut summary = json!({
        "expected_cost": sol.expected_cost,
        "status": sol.diagnostics.status,
        "iterations": sol.diagnostics.iterations,
        "cutting_plane_rounds": sol.diagnostics.cutting_plane_rounds,
    });
    if sol.alpha.is_some() {
        let spec = metric_spec(&a.metric)?;
        let (delta, tight) = dispatch_metric(&inst, &sol, &spec, a.metric.tau)?;
        println!("metric {spec}  {delta:.6}");
        println!("tight lines    {tight}");
        summary["metric"] = json!(spec.to_string());
        summary["delta"] = json!(delta);
        summary["tight_count"] = json!(tight);
    }
    write(
        &cli.out,
        "summary.json",
        &serde_json::to_string_pretty(&summary)?,
    )?;
    println!("wrote {}", path.display());
    Ok(0)
}

fn print_trace(trace: &ShiftTrace) {
    println!(
        "{:>3} {:>16} {:>14} {:>8} {:>5} {:>8} {:>4}  stop",
        "k", "cost", "delta", "lambda", "|T|", "tau", "acc"
    );
    for r in &trace.records {
        let lambda = r.lambda.map_or("-".to_string(), |l| format!("{l:.4}"));
        let stop = r.stop_reason.map_or(String::new(), |s| format!("{s:?}"));
        println!(
            "{:>3} {:>16.6} {:>14.6e} {:>8} {:>5} {:>8.4} {:>4}  {stop}",
            r.k,
            r.cost,
            r.delta,
            lambda,
            r.tight_count,
            r.tau,
            if r.accepted { "yes" } else { "no" },
        );
    }
}

fn cmd_shift(cli: &Cli, a: &ShiftArgs) -> anyhow::Result<u8> {
    let inst = load_instance(cli, &a.safety, true)?;
    let opf = opf_options(cli, a.cutting_plane)?;
    let start = match &a.solution {
        Some(path) => DispatchSolution::from_json(&read(path)?, &inst)?,
        None => solve_safety_opf(&inst, &SafetyOptions::default(), &opf)?,
    };
    let mut opts = ShiftOptions::new(metric_spec(&a.metric)?, a.metric.tau, a.iterations);
    opts.retry_after_stop = a.retry_after_stop;
    opts.opf = opf;
    let trace = run_procedure(&inst, &start, &opts)?;
    write(&cli.out, "trace.jsonl", &trace.to_jsonl()?)?;
    write(&cli.out, "solution.json", &trace.solution.to_json(&inst)?)?;
    print_trace(&trace);
    let initial = trace.initial_delta();
    let last = trace
        .accepted()
        .last()
        .expect("the start is always accepted");
    let reduction = if initial != 0.0 {
        1.0 - trace.final_delta() / initial
    } else {
        0.0
    };
    println!(
        "metric {} reduced by {:.2}%, expected cost changed by {:.6}; stop: {:?}",
        trace.metric,
        100.0 * reduction,
        last.cost - trace.records[0].cost,
        trace.stop
    );
    if trace.stop == StopReason::SolverFailure {
        return Ok(3);
    }
    Ok(0)
}

fn cmd_validate(cli: &Cli, a: &ValidateArgs) -> anyhow::Result<u8> {
    let inst = load_instance(cli, &a.safety, true)?;
    let sol = DispatchSolution::from_json(&read(&a.solution)?, &inst)?;
    if a.samples == 0 {
        bail!(Error::InvalidParameter("need at least one sample".into()));
    }
    let stats = simulate_seeded(&inst, &sol, a.samples, cli.seed)?;
    let report = violation_report(&stats, &inst.grid, &inst.grid.line_nu())?;
    let compat = match &sol.alpha {
        Some(alpha) => Some(check_compatible(&inst, &sol.f_bar, alpha)?),
        None => None,
    };
    write(&cli.out, "validation.csv", &stats_csv(&stats))?;
    let summary = json!({
        "seed": cli.seed,
        "samples": a.samples,
        "ok": report.ok(),
        "flagged_lines": report.flagged,
        "compatible": compat.as_ref().map(|c| c.compatible),
        "cost_mean": stats.cost_mean,
        "cost_variance": stats.cost_variance,
        "max_imbalance": stats.max_imbalance,
        "lines": report.lines,
        "generators": stats.generators,
    });
    write(
        &cli.out,
        "validation.json",
        &serde_json::to_string_pretty(&summary)?,
    )?;
    let worst = report.lines.iter().map(|c| c.rate).fold(0.0_f64, f64::max);
    println!(
        "samples {}  worst line violation rate {worst:.6}",
        a.samples
    );
    if report.ok() {
        println!("all line violation rates within bounds");
        Ok(0)
    } else {
        for c in report.lines.iter().filter(|c| c.flagged) {
            println!(
                "line {} flagged: rate {:.6} > threshold {:.6}",
                c.line + 1,
                c.rate,
                c.threshold
            );
        }
        Ok(1)
    }
}

fn cmd_gen_fig1(cli: &Cli, a: &Fig1Args) -> anyhow::Result<u8> {
    let params = match a.variant {
        VariantArg::Unlimited => Figure1Params::unlimited(a.k, a.path_len, a.load, a.mu, a.sigma),
        VariantArg::Limited => Figure1Params::limited(a.k, a.path_len, a.load),
    };
    let case = build_figure1(&params)?;
    let name = match params.variant {
        Figure1Variant::Unlimited => "fig1_unlimited",
        Figure1Variant::Limited => "fig1_limited",
    };
    let m = write(&cli.out, "fig1.m", &serialize_matpower(&case.grid, name))?;
    let s = write(
        &cli.out,
        "fig1.json",
        &serialize_stochastic(&case.stoch, &case.pattern, &case.grid)?,
    )?;
    println!("wrote {} and {}", m.display(), s.display());
    Ok(0)
}

fn cmd_stats(cli: &Cli, a: &SafetyArgs) -> anyhow::Result<u8> {
    let inst = load_instance(cli, a, false)?;
    let compact = formulation_stats(&build_safety_opf(
        &inst,
        &SafetyOptions::with_d_rows(DRowForm::Breve),
    ));
    let sparse = formulation_stats(&build_safety_opf(&inst, &SafetyOptions::default()));
    let out = json!({
        "buses": inst.grid.n_buses(),
        "lines": inst.grid.n_lines(),
        "generators": inst.grid.generators.len(),
        "sources": inst.stoch.n_sources(),
        "participants": inst.stoch.n_participants(),
        "formulation_breve": compact,
        "formulation_laplacian": sparse,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(0)
}
