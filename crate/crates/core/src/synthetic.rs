//! Seeded random instances for tests, benchmarks and experiments on cases
//! without published stochastic data.
//!
//! Every instance built by [`random_instance`] is feasible for the
//! safety-constrained problem: line limits and generator capacities are sized
//! around a reference dispatch (load split evenly among generators) combined with
//! the uniform participation matrix.

use nalgebra::DMatrix;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::{Bus, BusId, Generator, Grid, Line, QuadCost};
use crate::linalg::SusceptanceSystem;
use crate::stochastic::{
    line_variances, participant_variance, ParticipationMatrix, PatternK, StochasticModel,
    VarianceMethod,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub grid: Grid,
    pub stoch: StochasticModel,
    pub pattern: PatternK,
}

#[derive(Debug, Clone)]
pub struct SyntheticOptions {
    pub n_buses: usize,
    pub max_sources: usize,
    /// Safety parameter applied to every line and generator.
    pub nu: f64,
    /// Line limits are `factor · (|f_ref| + ν s_ref) + 1` with `factor` drawn from this range.
    pub limit_factor: (f64, f64),
    pub nonnegative: bool,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions {
            n_buses: 8,
            max_sources: 3,
            nu: 3.0,
            limit_factor: (1.05, 1.6),
            nonnegative: false,
        }
    }
}

/// Connected random topology: a random spanning tree plus about `n / 2` extra lines.
pub fn random_topology(rng: &mut ChaCha8Rng, n: usize) -> Vec<(BusId, BusId, f64)> {
    let mut edges = Vec::new();
    for child in 1..n {
        let parent = rng.random_range(0..child);
        edges.push((parent, child, rng.random_range(1.0..10.0)));
    }
    if n > 2 {
        for _ in 0..n / 2 {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a != b {
                edges.push((a, b, rng.random_range(1.0..10.0)));
            }
        }
    }
    edges
}

/// A random covariance on `s` sources with the given standard deviations,
/// occasionally rank deficient.
pub fn random_covariance(rng: &mut ChaCha8Rng, std: &[f64]) -> DMatrix<f64> {
    let s = std.len();
    let rank = if s > 1 && rng.random_bool(0.3) {
        s - 1
    } else {
        s
    };
    let g = DMatrix::from_fn(s, rank.max(1), |_, _| rng.random_range(-1.0_f64..1.0));
    let raw = &g * g.transpose();
    DMatrix::from_fn(s, s, |i, j| {
        let d = (raw[(i, i)] * raw[(j, j)]).sqrt();
        let corr = if d > 0.0 {
            raw[(i, j)] / d
        } else {
            f64::from(u8::from(i == j))
        };
        std[i] * corr * std[j]
    })
}

/// Random participation matrix whose columns sum to one.
pub fn random_participation(
    rng: &mut ChaCha8Rng,
    stoch: &StochasticModel,
    nonnegative: bool,
) -> ParticipationMatrix {
    let r = stoch.n_participants();
    let s = stoch.n_sources();
    let mut entries = DMatrix::zeros(r, s);
    for k in 0..s {
        let raw: Vec<f64> = (0..r)
            .map(|_| {
                if nonnegative {
                    rng.random_range(0.05..1.0)
                } else {
                    rng.random_range(-0.5..1.0)
                }
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        for i in 0..r {
            entries[(i, k)] = if r == 1 {
                1.0
            } else if nonnegative {
                raw[i] / sum
            } else {
                raw[i] + (1.0 - sum) / r as f64
            };
        }
    }
    ParticipationMatrix::new(stoch, entries).expect("shape matches the model")
}

/// A feasible random instance with `n_buses` buses and up to `max_sources` sources.
pub fn random_instance(seed: u64, n_buses: usize, max_sources: usize) -> SyntheticInstance {
    random_instance_with(
        seed,
        &SyntheticOptions {
            n_buses,
            max_sources,
            ..Default::default()
        },
    )
}

pub fn random_instance_with(seed: u64, opts: &SyntheticOptions) -> SyntheticInstance {
    let n = opts.n_buses.max(2);
    let mut rng = rng(seed);
    let edges = random_topology(&mut rng, n);

    let mut buses: Vec<BusId> = (0..n).collect();
    shuffle(&mut rng, &mut buses);
    let n_gen = (n / 2).max(2);
    let gen_buses: Vec<BusId> = {
        let mut g = buses[..n_gen].to_vec();
        g.sort_unstable();
        g
    };
    let n_src = rng.random_range(1..=opts.max_sources.max(1)).min(n);
    let mut src: Vec<BusId> = {
        let mut pool: Vec<BusId> = (0..n).collect();
        shuffle(&mut rng, &mut pool);
        pool.truncate(n_src);
        pool
    };
    src.sort_unstable();

    let std: Vec<f64> = (0..n_src).map(|_| rng.random_range(1.0..3.0)).collect();
    let mu: Vec<f64> = (0..n_src).map(|_| rng.random_range(0.0..5.0)).collect();
    let omega = random_covariance(&mut rng, &std);
    let stoch = StochasticModel::new(src.clone(), mu.clone(), omega, gen_buses.clone())
        .expect("valid covariance");

    let sigma_total: f64 = std.iter().sum();
    let mut loads: Vec<f64> = (0..n)
        .map(|i| {
            if gen_buses.contains(&i) {
                0.0
            } else {
                rng.random_range(5.0..30.0)
            }
        })
        .collect();
    // keep each reference dispatch ν standard deviations above zero
    let need = opts.nu * sigma_total + mu.iter().sum::<f64>() + n_gen as f64;
    let total: f64 = loads.iter().sum();
    if total < need {
        let bump = (need - total) / n as f64 + 1.0;
        loads.iter_mut().for_each(|d| *d += bump);
    }
    let net = loads.iter().sum::<f64>() - mu.iter().sum::<f64>();
    let share = net / n_gen as f64;

    let grid_buses = (0..n)
        .map(|i| Bus {
            id: i,
            label: i as u64 + 1,
            load: loads[i],
        })
        .collect();
    let mut grid = Grid {
        base_mva: 100.0,
        buses: grid_buses,
        lines: edges
            .iter()
            .map(|&(from, to, b)| Line {
                from,
                to,
                susceptance: b,
                limit: 1.0,
                nu: opts.nu,
            })
            .collect(),
        generators: gen_buses
            .iter()
            .map(|&bus| Generator {
                bus,
                p_min: 0.0,
                p_max: 0.0,
                cost: QuadCost {
                    quadratic: rng.random_range(0.01..0.1),
                    linear: rng.random_range(1.0..5.0),
                    constant: 0.0,
                },
                nu: opts.nu,
            })
            .collect(),
        slack: n - 1,
    };

    let sys = SusceptanceSystem::build(&grid).expect("random topology is connected");
    let uniform = ParticipationMatrix::uniform(&stoch);
    let mut inj: Vec<f64> = loads.iter().map(|d| -d).collect();
    for (k, &b) in src.iter().enumerate() {
        inj[b] += mu[k];
    }
    for &g in &gen_buses {
        inj[g] += share;
    }
    let flows = sys.dc_flows(&inj).expect("reference dispatch is balanced");
    let var =
        line_variances(&sys, &stoch, &uniform, VarianceMethod::GammaForm).expect("valid model");
    for (l, line) in grid.lines.iter_mut().enumerate() {
        let factor = rng.random_range(opts.limit_factor.0..opts.limit_factor.1);
        line.limit = factor * (flows[l].abs() + opts.nu * var[l].sqrt()) + 1.0;
    }
    for (r, gen) in grid.generators.iter_mut().enumerate() {
        let sd = participant_variance(&stoch, &uniform, r).sqrt();
        gen.p_max = share + opts.nu * sd + rng.random_range(0.5..2.0) * share;
    }

    SyntheticInstance {
        grid,
        stoch,
        pattern: PatternK {
            nonnegative: opts.nonnegative,
            ..Default::default()
        },
    }
}

/// Seeded stochastic sites on an existing grid: `n_sites` non-generator buses
/// with means and standard deviations proportional to local load (or to the
/// average load where a bus has none). All generators participate.
pub fn stochastic_sites(
    grid: &Grid,
    seed: u64,
    n_sites: usize,
    mean_fraction: f64,
    std_fraction: f64,
) -> StochasticModel {
    let mut rng = rng(seed);
    let has_gen = grid.generator_index();
    let mut pool: Vec<BusId> = (0..grid.n_buses())
        .filter(|&i| has_gen[i].is_none())
        .collect();
    shuffle(&mut rng, &mut pool);
    pool.truncate(n_sites);
    pool.sort_unstable();
    let avg = grid.total_load() / grid.n_buses().max(1) as f64;
    let scale: Vec<f64> = pool
        .iter()
        .map(|&b| {
            let d = grid.buses[b].load;
            if d > 0.0 {
                d
            } else {
                avg
            }
        })
        .collect();
    let mu: Vec<f64> = scale
        .iter()
        .map(|s| mean_fraction * s * rng.random_range(0.5..1.5))
        .collect();
    let std: Vec<f64> = scale
        .iter()
        .map(|s| std_fraction * s * rng.random_range(0.5..1.5))
        .collect();
    let omega = random_covariance(&mut rng, &std);
    let participants: Vec<BusId> = grid.generators.iter().map(|g| g.bus).collect();
    StochasticModel::new(pool, mu, omega, participants).expect("valid covariance")
}

fn shuffle<T>(rng: &mut ChaCha8Rng, v: &mut [T]) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::validate;
    use crate::stochastic::{validate_participation, PatternK};

    #[test]
    fn instances_are_valid_and_reproducible() {
        for seed in 0..20 {
            let a = random_instance(seed, 10, 3);
            let b = random_instance(seed, 10, 3);
            assert_eq!(a.grid, b.grid);
            assert_eq!(a.stoch, b.stoch);
            let report = validate(&a.grid, None);
            assert!(report.ok, "{:?}", report.violations);
        }
    }

    #[test]
    fn random_participation_is_balanced() {
        let inst = random_instance(3, 9, 3);
        let mut r = rng(1);
        for nonneg in [false, true] {
            let a = random_participation(&mut r, &inst.stoch, nonneg);
            let pattern = if nonneg {
                PatternK::nonnegative()
            } else {
                PatternK::default()
            };
            assert!(validate_participation(&a, &pattern).ok);
        }
    }
}
