//! Network data: buses, lines, generators, and structural validation.
//!
//! Buses are addressed by a dense 0-based index ([`BusId`]); the label from the
//! source case file is kept alongside for reporting and serialization. All
//! quantities are in MW (no per-unit scaling).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

pub type BusId = usize;

/// Balance residual tolerance used by [`validate`], relative to total load.
pub const BALANCE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    pub label: u64,
    /// Fixed demand (MW).
    pub load: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: BusId,
    pub to: BusId,
    pub susceptance: f64,
    /// Thermal limit (MW).
    pub limit: f64,
    /// Safety parameter: number of standard deviations kept clear of the limit.
    pub nu: f64,
}

/// `quadratic * p^2 + linear * p + constant`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QuadCost {
    pub quadratic: f64,
    pub linear: f64,
    pub constant: f64,
}

impl QuadCost {
    pub fn linear(linear: f64) -> Self {
        QuadCost {
            quadratic: 0.0,
            linear,
            constant: 0.0,
        }
    }

    pub fn eval(&self, p: f64) -> f64 {
        self.quadratic * p * p + self.linear * p + self.constant
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: BusId,
    pub p_min: f64,
    pub p_max: f64,
    pub cost: QuadCost,
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    /// Recorded from the case file, not used in computations.
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    /// Reduction bus for the susceptance system; its angle is fixed at zero.
    pub slack: BusId,
}

impl Grid {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn loads(&self) -> Vec<f64> {
        self.buses.iter().map(|b| b.load).collect()
    }

    pub fn total_load(&self) -> f64 {
        self.buses.iter().map(|b| b.load).sum()
    }

    pub fn limits(&self) -> Vec<f64> {
        self.lines.iter().map(|l| l.limit).collect()
    }

    pub fn line_nu(&self) -> Vec<f64> {
        self.lines.iter().map(|l| l.nu).collect()
    }

    /// Generator index per bus (`None` where the bus has no generator).
    pub fn generator_index(&self) -> Vec<Option<usize>> {
        let mut index = vec![None; self.n_buses()];
        for (g, gen) in self.generators.iter().enumerate() {
            if gen.bus < index.len() {
                index[gen.bus] = Some(g);
            }
        }
        index
    }

    pub fn generator_at(&self, bus: BusId) -> Option<&Generator> {
        self.generators.iter().find(|g| g.bus == bus)
    }

    pub fn bus_by_label(&self, label: u64) -> Option<BusId> {
        self.buses.iter().position(|b| b.label == label)
    }

    pub fn label(&self, bus: BusId) -> u64 {
        self.buses[bus].label
    }

    /// Sets the safety parameter of every line and generator.
    pub fn set_safety_params(&mut self, line_nu: f64, gen_nu: f64) {
        for l in &mut self.lines {
            l.nu = line_nu;
        }
        for g in &mut self.generators {
            g.nu = gen_nu;
        }
    }

    /// Buses reachable from `root` through the line graph.
    pub(crate) fn reachable_from(&self, root: BusId) -> Vec<bool> {
        let n = self.n_buses();
        let mut adj = vec![Vec::new(); n];
        for l in &self.lines {
            if l.from < n && l.to < n {
                adj[l.from].push(l.to);
                adj[l.to].push(l.from);
            }
        }
        let mut seen = vec![false; n];
        if root >= n {
            return seen;
        }
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    pub fn is_connected(&self) -> bool {
        self.n_buses() > 0 && self.reachable_from(0).iter().all(|&s| s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
    /// `sum(p_bar - d + mu)` when a dispatch was supplied.
    pub balance_residual: Option<f64>,
}

impl ValidationReport {
    pub fn has(&self, code: &str) -> bool {
        self.violations.iter().any(|v| v.code == code)
    }
}

/// A nodal dispatch to check for balance: `p_bar` and `mu` are full bus vectors.
#[derive(Debug, Clone, Copy)]
pub struct NodalDispatch<'a> {
    pub p_bar: &'a [f64],
    pub mu: &'a [f64],
}

/// Structural checks on a grid, plus a balance check when a dispatch is given.
pub fn validate(grid: &Grid, dispatch: Option<NodalDispatch<'_>>) -> ValidationReport {
    let n = grid.n_buses();
    let mut violations = Vec::new();
    let mut push = |code: &str, message: String| {
        violations.push(Violation {
            code: code.to_string(),
            message,
        })
    };

    if n == 0 {
        push("empty", "grid has no buses".into());
    }
    if grid.slack >= n {
        push("slack", format!("slack bus {} out of range", grid.slack));
    }
    for (i, b) in grid.buses.iter().enumerate() {
        if b.id != i {
            push("bus_id", format!("bus at position {i} carries id {}", b.id));
        }
        if !(b.load >= 0.0) {
            push(
                "negative_load",
                format!("bus {} has load {}", b.label, b.load),
            );
        }
    }
    for (l, line) in grid.lines.iter().enumerate() {
        if line.from >= n || line.to >= n {
            push("bus_ref", format!("line {l} references a missing bus"));
            continue;
        }
        if line.from == line.to {
            push(
                "self_loop",
                format!("line {l} connects bus {} to itself", grid.label(line.from)),
            );
        }
        if !(line.susceptance > 0.0) {
            push(
                "susceptance",
                format!("line {l} has susceptance {}", line.susceptance),
            );
        }
        if !(line.limit > 0.0) {
            push("limit", format!("line {l} has limit {}", line.limit));
        }
        if !(line.nu >= 0.0) {
            push(
                "safety_param",
                format!("line {l} has safety parameter {}", line.nu),
            );
        }
    }
    let mut seen_gen = vec![false; n];
    for (g, gen) in grid.generators.iter().enumerate() {
        if gen.bus >= n {
            push("bus_ref", format!("generator {g} references a missing bus"));
            continue;
        }
        if seen_gen[gen.bus] {
            push(
                "duplicate_generator",
                format!("bus {} has more than one generator", grid.label(gen.bus)),
            );
        }
        seen_gen[gen.bus] = true;
        if !(gen.p_min <= gen.p_max) {
            push(
                "bounds",
                format!("generator {g}: p_min {} > p_max {}", gen.p_min, gen.p_max),
            );
        }
        if !(gen.cost.quadratic >= 0.0) {
            push(
                "nonconvex_cost",
                format!(
                    "generator {g} has quadratic coefficient {}",
                    gen.cost.quadratic
                ),
            );
        }
        if !(gen.nu >= 0.0) {
            push(
                "safety_param",
                format!("generator {g} has safety parameter {}", gen.nu),
            );
        }
    }
    if n > 0 && !grid.is_connected() {
        let unreached = grid.reachable_from(0).iter().filter(|s| !**s).count();
        push(
            "disconnected",
            format!(
                "{unreached} buses are not reachable from bus {}",
                grid.label(0)
            ),
        );
    }

    let balance_residual = dispatch.map(|d| {
        let loads = grid.loads();
        if d.p_bar.len() != n || d.mu.len() != n {
            push(
                "dimension",
                format!("dispatch vectors must have length {n}"),
            );
            return f64::NAN;
        }
        let residual: f64 = (0..n).map(|i| d.p_bar[i] - loads[i] + d.mu[i]).sum();
        let scale = grid.total_load().abs().max(1.0);
        if !(residual.abs() <= BALANCE_TOLERANCE * scale) {
            push("imbalance", format!("sum of net injections is {residual}"));
        }
        residual
    });

    ValidationReport {
        ok: violations.is_empty(),
        violations,
        balance_residual,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn three_cycle() -> Grid {
        let buses = (0..3)
            .map(|i| Bus {
                id: i,
                label: i as u64 + 1,
                load: 0.0,
            })
            .collect();
        let line = |from, to| Line {
            from,
            to,
            susceptance: 1.0,
            limit: 10.0,
            nu: 0.0,
        };
        Grid {
            base_mva: 100.0,
            buses,
            lines: vec![line(0, 1), line(0, 2), line(1, 2)],
            generators: vec![],
            slack: 2,
        }
    }

    #[test]
    fn connected_grid_is_ok() {
        let report = validate(&three_cycle(), None);
        assert!(report.ok, "{:?}", report.violations);
        assert!(report.balance_residual.is_none());
    }

    #[test]
    fn isolated_bus_is_flagged() {
        let mut grid = three_cycle();
        grid.buses.push(Bus {
            id: 3,
            label: 4,
            load: 0.0,
        });
        let report = validate(&grid, None);
        assert!(!report.ok);
        assert!(report.has("disconnected"));
    }

    #[test]
    fn balance_residual_is_reported() {
        let mut grid = three_cycle();
        grid.buses[2].load = 1.0;
        let p = [1.5, 0.0, 0.0];
        let mu = [0.0; 3];
        let report = validate(&grid, Some(NodalDispatch { p_bar: &p, mu: &mu }));
        assert_eq!(report.balance_residual, Some(0.5));
        assert!(report.has("imbalance"));
        assert!(!report.ok);

        let p = [1.0, 0.0, 0.0];
        let report = validate(&grid, Some(NodalDispatch { p_bar: &p, mu: &mu }));
        assert!(report.ok);
    }

    #[test]
    fn bad_bounds_and_duplicates() {
        let mut grid = three_cycle();
        let gen = Generator {
            bus: 0,
            p_min: 5.0,
            p_max: 1.0,
            cost: QuadCost::default(),
            nu: 0.0,
        };
        grid.generators = vec![gen.clone(), gen];
        let report = validate(&grid, None);
        assert!(report.has("bounds"));
        assert!(report.has("duplicate_generator"));
    }
}
