//! Monte-Carlo propagation of Gaussian fluctuations through the balancing policy.
//!
//! Draws are produced in blocks of [`BLOCK_SIZE`]; block `j` uses the ChaCha8
//! stream `j` of the run seed, so the samples do not depend on how blocks are
//! spread across threads. Block accumulators are merged in block order.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::opf::{DispatchSolution, Instance};
use crate::stochastic::{epsilon_from_nu, StochasticModel};

pub const BLOCK_SIZE: usize = 1024;

/// Per-sample imbalance tolerance, relative to the total absolute injection.
pub const BALANCE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleDistribution {
    #[default]
    Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    /// `N × |𝒮|` draws.
    pub omega: DMatrix<f64>,
    pub seed: u64,
    pub distribution: SampleDistribution,
}

fn block_rng(seed: u64, block: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block as u64);
    rng
}

/// Draws rows `block·BLOCK_SIZE ..` of the batch: `ω = Ω^½ z`.
fn draw_block(stoch: &StochasticModel, seed: u64, block: usize, rows: usize) -> DMatrix<f64> {
    let s = stoch.n_sources();
    let mut rng = block_rng(seed, block);
    let z = DMatrix::from_fn(rows, s, |_, _| StandardNormal.sample(&mut rng));
    // rows of z times (Ω^½)ᵀ; Ω^½ is symmetric
    z * stoch.omega_sqrt()
}

fn n_blocks(n: usize) -> usize {
    n.div_ceil(BLOCK_SIZE)
}

fn block_rows(n: usize, block: usize) -> usize {
    BLOCK_SIZE.min(n - block * BLOCK_SIZE)
}

/// Zero-mean Gaussian draws with covariance `Ω`.
pub fn sample_omega(stoch: &StochasticModel, n_samples: usize, seed: u64) -> SampleBatch {
    let s = stoch.n_sources();
    let blocks: Vec<DMatrix<f64>> = (0..n_blocks(n_samples))
        .into_par_iter()
        .map(|b| draw_block(stoch, seed, b, block_rows(n_samples, b)))
        .collect();
    let mut omega = DMatrix::zeros(n_samples, s);
    for (b, m) in blocks.iter().enumerate() {
        omega.rows_mut(b * BLOCK_SIZE, m.nrows()).copy_from(m);
    }
    SampleBatch {
        omega,
        seed,
        distribution: SampleDistribution::Gaussian,
    }
}

/// Running count, mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
    hits: f64,
}

impl Moments {
    fn push(&mut self, x: f64, hit: bool) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
        if hit {
            self.hits += 1.0;
        }
    }

    fn merge(&mut self, o: &Moments) {
        if o.n == 0.0 {
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n / n;
        self.m2 += o.m2 + d * d * self.n * o.n / n;
        self.n = n;
        self.hits += o.hits;
    }

    fn variance(&self) -> f64 {
        if self.n > 1.0 {
            self.m2 / (self.n - 1.0)
        } else {
            0.0
        }
    }

    fn rate(&self) -> f64 {
        if self.n > 0.0 {
            self.hits / self.n
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Accumulator {
    lines: Vec<Moments>,
    gens: Vec<Moments>,
    cost: Moments,
    max_imbalance: f64,
}

impl Accumulator {
    fn new(m: usize, g: usize) -> Self {
        Accumulator {
            lines: vec![Moments::default(); m],
            gens: vec![Moments::default(); g],
            cost: Moments::default(),
            max_imbalance: 0.0,
        }
    }

    fn merge(&mut self, o: &Accumulator) {
        for (a, b) in self.lines.iter_mut().zip(&o.lines) {
            a.merge(b);
        }
        for (a, b) in self.gens.iter_mut().zip(&o.gens) {
            a.merge(b);
        }
        self.cost.merge(&o.cost);
        self.max_imbalance = self.max_imbalance.max(o.max_imbalance);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineStats {
    pub mean: f64,
    pub variance: f64,
    /// Fraction of samples with `|f| > f^max`.
    pub violation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorStats {
    pub bus: usize,
    pub mean: f64,
    pub variance: f64,
    /// Fraction of samples outside `[p_min, p_max]`.
    pub violation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalStats {
    pub samples: usize,
    pub lines: Vec<LineStats>,
    pub generators: Vec<GeneratorStats>,
    pub cost_mean: f64,
    pub cost_variance: f64,
    /// Largest relative nodal imbalance seen in any sample.
    pub max_imbalance: f64,
}

struct Propagator<'a> {
    inst: &'a Instance,
    sol: &'a DispatchSolution,
    /// `p̄ + μ − d`.
    base: Vec<f64>,
    /// Bus-indexed `n × |𝒮|` participation.
    padded: DMatrix<f64>,
    scale: f64,
}

impl<'a> Propagator<'a> {
    fn new(inst: &'a Instance, sol: &'a DispatchSolution) -> Result<Self> {
        let grid = &inst.grid;
        let n = grid.n_buses();
        if sol.p_bar.len() != n || sol.f_bar.len() != grid.n_lines() {
            return Err(Error::Dimension("solution does not match the grid".into()));
        }
        let mu = inst.stoch.mu_full(n);
        let base: Vec<f64> = (0..n)
            .map(|i| sol.p_bar[i] + mu[i] - grid.buses[i].load)
            .collect();
        let padded = match &sol.alpha {
            Some(a) => a.padded(n),
            None => DMatrix::zeros(n, inst.stoch.n_sources()),
        };
        let scale = base.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        Ok(Propagator {
            inst,
            sol,
            base,
            padded,
            scale,
        })
    }

    fn run_block(&self, omega: &DMatrix<f64>) -> Result<Accumulator> {
        let grid = &self.inst.grid;
        let stoch = &self.inst.stoch;
        let mut acc = Accumulator::new(grid.n_lines(), grid.generators.len());
        let mut inj = vec![0.0; grid.n_buses()];
        for row in omega.row_iter() {
            let w: DVector<f64> = row.transpose();
            let absorbed = &self.padded * &w;
            inj.copy_from_slice(&self.base);
            for (k, &bus) in stoch.sources.iter().enumerate() {
                inj[bus] += w[k];
            }
            for (i, v) in inj.iter_mut().enumerate() {
                *v -= absorbed[i];
            }
            let imbalance = inj.iter().sum::<f64>().abs() / self.scale;
            if imbalance > BALANCE_TOLERANCE {
                return Err(Error::Unbalanced {
                    sum: imbalance * self.scale,
                    tolerance: BALANCE_TOLERANCE * self.scale,
                });
            }
            acc.max_imbalance = acc.max_imbalance.max(imbalance);
            // exact balance for the solve; the residual was checked above
            let residual = inj.iter().sum::<f64>();
            inj[grid.slack] -= residual;
            let flows = self.inst.sys.dc_flows(&inj)?;
            for (l, f) in flows.iter().enumerate() {
                acc.lines[l].push(*f, f.abs() > grid.lines[l].limit);
            }
            let mut cost = 0.0;
            for (g, gen) in grid.generators.iter().enumerate() {
                let p = self.sol.p_bar[gen.bus] - absorbed[gen.bus];
                acc.gens[g].push(p, p < gen.p_min || p > gen.p_max);
                cost += gen.cost.eval(p);
            }
            acc.cost.push(cost, false);
        }
        Ok(acc)
    }

    fn finish(&self, acc: Accumulator, samples: usize) -> EmpiricalStats {
        EmpiricalStats {
            samples,
            lines: acc
                .lines
                .iter()
                .map(|m| LineStats {
                    mean: m.mean,
                    variance: m.variance(),
                    violation_rate: m.rate(),
                })
                .collect(),
            generators: acc
                .gens
                .iter()
                .zip(&self.inst.grid.generators)
                .map(|(m, g)| GeneratorStats {
                    bus: g.bus,
                    mean: m.mean,
                    variance: m.variance(),
                    violation_rate: m.rate(),
                })
                .collect(),
            cost_mean: acc.cost.mean,
            cost_variance: acc.cost.variance(),
            max_imbalance: acc.max_imbalance,
        }
    }
}

fn merge_blocks(mut parts: Vec<Result<Accumulator>>, m: usize, g: usize) -> Result<Accumulator> {
    let mut total = Accumulator::new(m, g);
    for p in parts.drain(..) {
        total.merge(&p?);
    }
    Ok(total)
}

/// Statistics of flows, generation and cost over a materialized batch.
pub fn simulate(
    inst: &Instance,
    sol: &DispatchSolution,
    batch: &SampleBatch,
) -> Result<EmpiricalStats> {
    if batch.omega.ncols() != inst.stoch.n_sources() {
        return Err(Error::Dimension("batch does not match the sources".into()));
    }
    let prop = Propagator::new(inst, sol)?;
    let n = batch.omega.nrows();
    let parts: Vec<Result<Accumulator>> = (0..n_blocks(n))
        .into_par_iter()
        .map(|b| {
            prop.run_block(
                &batch
                    .omega
                    .rows(b * BLOCK_SIZE, block_rows(n, b))
                    .into_owned(),
            )
        })
        .collect();
    let acc = merge_blocks(parts, inst.grid.n_lines(), inst.grid.generators.len())?;
    Ok(prop.finish(acc, n))
}

/// As [`simulate`] on `sample_omega(stoch, n_samples, seed)`, without storing the draws.
pub fn simulate_seeded(
    inst: &Instance,
    sol: &DispatchSolution,
    n_samples: usize,
    seed: u64,
) -> Result<EmpiricalStats> {
    let prop = Propagator::new(inst, sol)?;
    let parts: Vec<Result<Accumulator>> = (0..n_blocks(n_samples))
        .into_par_iter()
        .map(|b| prop.run_block(&draw_block(&inst.stoch, seed, b, block_rows(n_samples, b))))
        .collect();
    let acc = merge_blocks(parts, inst.grid.n_lines(), inst.grid.generators.len())?;
    Ok(prop.finish(acc, n_samples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineCheck {
    pub line: usize,
    pub rate: f64,
    /// `1 − Φ(ν)`.
    pub epsilon: f64,
    /// `ε + 3√(ε/N)`.
    pub threshold: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub samples: usize,
    pub lines: Vec<LineCheck>,
    pub flagged: Vec<usize>,
}

impl ViolationReport {
    pub fn ok(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Compares empirical line violation rates with the tail level implied by `nu`.
pub fn violation_report(
    stats: &EmpiricalStats,
    grid: &Grid,
    nu: &[f64],
) -> Result<ViolationReport> {
    if nu.len() != grid.n_lines() || stats.lines.len() != grid.n_lines() {
        return Err(Error::Dimension(
            "one safety parameter and one statistic per line required".into(),
        ));
    }
    let n = stats.samples.max(1) as f64;
    let lines: Vec<LineCheck> = stats
        .lines
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let epsilon = epsilon_from_nu(nu[l]);
            let threshold = epsilon + 3.0 * (epsilon / n).sqrt();
            LineCheck {
                line: l,
                rate: s.violation_rate,
                epsilon,
                threshold,
                flagged: s.violation_rate > threshold,
            }
        })
        .collect();
    let flagged = lines.iter().filter(|c| c.flagged).map(|c| c.line).collect();
    Ok(ViolationReport {
        samples: stats.samples,
        lines,
        flagged,
    })
}

/// `line_id,mean,variance,violation_rate` with 1-based line ids.
pub fn stats_csv(stats: &EmpiricalStats) -> String {
    let mut out = String::from("line_id,mean,variance,violation_rate\n");
    for (l, s) in stats.lines.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{:.12e},{:.12e},{:.12e}",
            l + 1,
            s.mean,
            s.variance,
            s.violation_rate
        );
    }
    out
}
