//! The star-and-path example network.
//!
//! Bus layout (0-based indices, labels are index + 1):
//! - `0`: cheap non-participating generator connected to hub `a`;
//! - `1..=k`: mid-cost participating generators, each connected to `a`;
//! - `k+1`: expensive participating generator at the head of a path to `b`;
//! - `k+2..=k+1+D`: `D` empty buses on that path;
//! - `a = k+D+2`: empty hub; `b = k+D+3`: load `L` and the stochastic source.
//!
//! Lines are ordered `0a, 1a, …, ka, ab` followed by the `D + 1` path lines
//! from `k+1` to `b`. All susceptances are one. Bus `b` is the slack.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Bus, BusId, Generator, Grid, Line, QuadCost};
use crate::stochastic::{ParticipationMatrix, PatternK, StochasticModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Figure1Variant {
    /// Every line limit is a large multiple of the load.
    Unlimited,
    /// Limits `9L/8` on `0a` and `ab`, `2σ` on the star and path lines.
    Limited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure1Params {
    pub k: usize,
    pub path_len: usize,
    pub load: f64,
    pub mu: f64,
    pub sigma: f64,
    pub cost_base: f64,
    pub cost_mid: f64,
    pub cost_top: f64,
    /// Quadratic cost on the mid generators; any positive value makes the equal
    /// split among them the unique optimum.
    pub cost_quad: f64,
    /// Capacity of every generator as a multiple of `L`.
    pub capacity_factor: f64,
    pub nu: f64,
    pub variant: Figure1Variant,
    /// Limits of the unlimited variant as a multiple of `L`.
    pub unlimited_factor: f64,
}

impl Figure1Params {
    pub fn unlimited(k: usize, path_len: usize, load: f64, mu: f64, sigma: f64) -> Self {
        Figure1Params {
            k,
            path_len,
            load,
            mu,
            sigma,
            cost_base: 1.0,
            cost_mid: 2.0,
            cost_top: 3.0,
            cost_quad: 1e-3,
            capacity_factor: 2.0,
            nu: 3.0,
            variant: Figure1Variant::Unlimited,
            unlimited_factor: 100.0,
        }
    }

    /// `μ = L/4` and `σ = L/8`.
    pub fn limited(k: usize, path_len: usize, load: f64) -> Self {
        Figure1Params {
            variant: Figure1Variant::Limited,
            ..Self::unlimited(k, path_len, load, load / 4.0, load / 8.0)
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.k < 1 {
            return bad("k must be at least 1");
        }
        if self.path_len < 1 {
            return bad("path length must be at least 1");
        }
        if !(self.load > 0.0 && self.mu >= 0.0 && self.mu < self.load) {
            return bad("need 0 <= mu < load");
        }
        if !(self.sigma >= 0.0 && self.nu >= 0.0) {
            return bad("sigma and nu must be nonnegative");
        }
        if !(self.cost_base < self.cost_mid && self.cost_mid < self.cost_top) {
            return bad("costs must satisfy base < mid < top");
        }
        if !(self.cost_quad >= 0.0 && self.capacity_factor > 1.0) {
            return bad("need cost_quad >= 0 and capacity factor > 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure1Layout {
    pub base: BusId,
    pub mids: Vec<BusId>,
    pub top: BusId,
    pub path: Vec<BusId>,
    pub hub: BusId,
    pub load_bus: BusId,
    pub line_base: usize,
    pub lines_mid: Vec<usize>,
    pub line_ab: usize,
    pub lines_path: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Figure1Case {
    pub params: Figure1Params,
    pub grid: Grid,
    pub stoch: StochasticModel,
    /// Nonnegative participation factors.
    pub pattern: PatternK,
    pub layout: Figure1Layout,
}

pub fn build_figure1(params: &Figure1Params) -> Result<Figure1Case> {
    params.check()?;
    let (k, d, l) = (params.k, params.path_len, params.load);
    let n = k + d + 4;
    let top = k + 1;
    let hub = k + d + 2;
    let load_bus = k + d + 3;
    let path: Vec<BusId> = (k + 2..=k + 1 + d).collect();

    let buses = (0..n)
        .map(|i| Bus {
            id: i,
            label: i as u64 + 1,
            load: if i == load_bus { l } else { 0.0 },
        })
        .collect();

    let (big, near, star) = match params.variant {
        Figure1Variant::Unlimited => {
            let m = params.unlimited_factor * l;
            (m, m, m)
        }
        Figure1Variant::Limited => (9.0 * l / 8.0, 9.0 * l / 8.0, 2.0 * params.sigma),
    };
    let line = |from, to, limit| Line {
        from,
        to,
        susceptance: 1.0,
        limit,
        nu: params.nu,
    };
    let mut lines = vec![line(0, hub, big)];
    lines.extend((1..=k).map(|i| line(i, hub, star)));
    lines.push(line(hub, load_bus, near));
    let mut chain = vec![top];
    chain.extend(&path);
    chain.push(load_bus);
    lines.extend(chain.windows(2).map(|w| line(w[0], w[1], star)));

    let cap = params.capacity_factor * l;
    let gen = |bus, cost: QuadCost| Generator {
        bus,
        p_min: 0.0,
        p_max: cap,
        cost,
        nu: params.nu,
    };
    let mut generators = vec![gen(0, QuadCost::linear(params.cost_base))];
    generators.extend((1..=k).map(|i| {
        gen(
            i,
            QuadCost {
                quadratic: params.cost_quad,
                linear: params.cost_mid,
                constant: 0.0,
            },
        )
    }));
    generators.push(gen(top, QuadCost::linear(params.cost_top)));

    let grid = Grid {
        base_mva: 100.0,
        buses,
        lines,
        generators,
        slack: load_bus,
    };
    let stoch = StochasticModel::new(
        vec![load_bus],
        vec![params.mu],
        DMatrix::from_element(1, 1, params.sigma * params.sigma),
        (1..=top).collect(),
    )?;
    let layout = Figure1Layout {
        base: 0,
        mids: (1..=k).collect(),
        top,
        path,
        hub,
        load_bus,
        line_base: 0,
        lines_mid: (1..=k).collect(),
        line_ab: k + 1,
        lines_path: (k + 2..k + 3 + d).collect(),
    };
    Ok(Figure1Case {
        params: params.clone(),
        grid,
        stoch,
        pattern: PatternK::nonnegative(),
        layout,
    })
}

impl Figure1Case {
    /// Mid generators share the source equally; the top generator takes `top_share`.
    pub fn participation(&self, top_share: f64) -> ParticipationMatrix {
        let k = self.params.k;
        let mut entries = DMatrix::from_element(k + 1, 1, (1.0 - top_share) / k as f64);
        entries[(k, 0)] = top_share;
        ParticipationMatrix::new(&self.stoch, entries).expect("shape matches the model")
    }

    /// The claimed optimum: base covers `L − μ − νσ`, mids each `νσ/k`, top idle.
    pub fn candidate_alpha(&self) -> ParticipationMatrix {
        self.participation(0.0)
    }

    /// Bus-indexed mean generation with the top generator at `ν σ top_share`
    /// and the mids at `ν σ (1 − top_share) / k`.
    pub fn dispatch(&self, top_share: f64) -> Vec<f64> {
        let p = &self.params;
        let mut out = vec![0.0; self.grid.n_buses()];
        let reserve = p.nu * p.sigma;
        out[self.layout.base] = p.load - p.mu - reserve;
        for &i in &self.layout.mids {
            out[i] = reserve * (1.0 - top_share) / p.k as f64;
        }
        out[self.layout.top] = reserve * top_share;
        out
    }

    pub fn candidate_dispatch(&self) -> Vec<f64> {
        self.dispatch(0.0)
    }

    /// Top-generator share that halves the variance on line `ab`.
    pub fn half_variance_share() -> f64 {
        1.0 - 0.5_f64.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::validate;
    use crate::linalg::SusceptanceSystem;
    use crate::stochastic::{line_variances, validate_participation, VarianceMethod};

    #[test]
    fn shape() {
        let case = build_figure1(&Figure1Params::unlimited(10, 10, 800.0, 200.0, 100.0)).unwrap();
        assert_eq!(case.grid.n_buses(), 24);
        assert_eq!(case.grid.n_lines(), 23);
        assert_eq!(case.stoch.n_participants(), 11);
        assert!(validate(&case.grid, None).ok);
        assert_eq!(case.layout.lines_path.len(), 11);
        let ab = &case.grid.lines[case.layout.line_ab];
        assert_eq!((ab.from, ab.to), (case.layout.hub, case.layout.load_bus));
    }

    #[test]
    fn candidate_variances() {
        let case = build_figure1(&Figure1Params::unlimited(10, 10, 800.0, 200.0, 100.0)).unwrap();
        let sys = SusceptanceSystem::build(&case.grid).unwrap();
        let a = case.candidate_alpha();
        assert!(validate_participation(&a, &case.pattern).ok);
        let v = line_variances(&sys, &case.stoch, &a, VarianceMethod::PiForm).unwrap();
        assert!((v[case.layout.line_ab] - 1e4).abs() < 1e-8);
        assert!((v.iter().sum::<f64>() - 1.1e4).abs() < 1e-8);
    }

    #[test]
    fn candidate_flows() {
        let case = build_figure1(&Figure1Params::limited(10, 10, 800.0)).unwrap();
        let sys = SusceptanceSystem::build(&case.grid).unwrap();
        let mut inj = case.candidate_dispatch();
        for (i, v) in inj.iter_mut().enumerate() {
            *v += case.stoch.mu_full(case.grid.n_buses())[i] - case.grid.buses[i].load;
        }
        let f = sys.dc_flows(&inj).unwrap();
        assert!((f[case.layout.line_ab] - 600.0).abs() < 1e-9);
        assert!(f[case.layout.lines_path[0]].abs() < 1e-9);
        assert!((f[1] - 30.0).abs() < 1e-9);
    }

    #[test]
    fn bad_parameters() {
        let mut p = Figure1Params::unlimited(3, 3, 100.0, 150.0, 10.0);
        assert!(build_figure1(&p).is_err());
        p.mu = 10.0;
        p.cost_mid = 0.5;
        assert!(build_figure1(&p).is_err());
        p.cost_mid = 2.0;
        p.k = 0;
        assert!(build_figure1(&p).is_err());
    }
}
