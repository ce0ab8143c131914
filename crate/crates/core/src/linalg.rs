//! Susceptance system `B`, its reduced factorization, and DC flow computations.
//!
//! `B̂` is `B` with the reduction bus row and column removed; it is factored once
//! (sparse LDLᵀ) and reused for every right-hand side. `B̆` pads `B̂⁻¹` with a zero
//! row and column at the reduction bus. Rows of `B̆` are computed lazily and
//! cached per bus.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use sprs::{CsMat, TriMat};
use sprs_ldl::{Ldl, LdlNumeric};

use crate::error::{Error, Result};
use crate::grid::{BusId, Grid};

/// Relative tolerance on `sum(injections)` accepted by the flow routines.
pub const BALANCE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
struct Branch {
    from: BusId,
    to: BusId,
    susceptance: f64,
}

#[allow(clippy::large_enum_variant)]
enum Factor {
    Sparse(LdlNumeric<f64, usize>),
    /// One non-reduction bus: `B̂` is a positive scalar.
    Scalar(f64),
}

impl Factor {
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        match self {
            Factor::Sparse(ldl) => ldl.solve(&rhs.to_vec()),
            Factor::Scalar(d) => vec![rhs[0] / d],
        }
    }
}

pub struct SusceptanceSystem {
    n: usize,
    reduction_bus: BusId,
    matrix: CsMat<f64>,
    factor: Option<Factor>,
    branches: Vec<Branch>,
    breve_rows: Vec<OnceLock<Vec<f64>>>,
}

impl std::fmt::Debug for SusceptanceSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SusceptanceSystem")
            .field("n", &self.n)
            .field("reduction_bus", &self.reduction_bus)
            .field("nnz", &self.matrix.nnz())
            .finish()
    }
}

/// `π_ij = B̆_i − B̆_j` for one line.
#[derive(Debug, Clone, PartialEq)]
pub struct LineFactor {
    pub line: usize,
    pub pi: Vec<f64>,
}

impl SusceptanceSystem {
    /// Builds `B` and factors `B̂` with the grid's slack as reduction bus.
    pub fn build(grid: &Grid) -> Result<Self> {
        Self::build_with_reduction(grid, grid.slack)
    }

    pub fn build_with_reduction(grid: &Grid, reduction_bus: BusId) -> Result<Self> {
        let n = grid.n_buses();
        if reduction_bus >= n {
            return Err(Error::InvalidParameter(format!(
                "reduction bus {reduction_bus} out of range"
            )));
        }
        // accumulate each unordered pair once so that B is exactly symmetric
        let mut diag = vec![0.0; n];
        let mut off: BTreeMap<(BusId, BusId), f64> = BTreeMap::new();
        let mut branches = Vec::with_capacity(grid.n_lines());
        for (l, line) in grid.lines.iter().enumerate() {
            if line.from >= n || line.to >= n || line.from == line.to {
                return Err(Error::InvalidParameter(format!(
                    "line {l} has invalid endpoints"
                )));
            }
            if !(line.susceptance > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "line {l} has susceptance {}",
                    line.susceptance
                )));
            }
            let b = line.susceptance;
            diag[line.from] += b;
            diag[line.to] += b;
            *off.entry((line.from.min(line.to), line.from.max(line.to)))
                .or_insert(0.0) -= b;
            branches.push(Branch {
                from: line.from,
                to: line.to,
                susceptance: b,
            });
        }
        let mut tri = TriMat::new((n, n));
        for (i, &d) in diag.iter().enumerate() {
            if d != 0.0 {
                tri.add_triplet(i, i, d);
            }
        }
        for (&(i, j), &v) in &off {
            tri.add_triplet(i, j, v);
            tri.add_triplet(j, i, v);
        }
        let matrix: CsMat<f64> = tri.to_csr();

        let factor = match n {
            0 | 1 => None,
            2 => {
                let d = matrix
                    .get(1 - reduction_bus, 1 - reduction_bus)
                    .copied()
                    .unwrap_or(0.0);
                if !(d > 0.0) {
                    return Err(Error::Singular("the two buses are not connected".into()));
                }
                Some(Factor::Scalar(d))
            }
            _ => {
                let reduced = reduce(&matrix, reduction_bus);
                let numeric = Ldl::new()
                    .numeric(reduced.view())
                    .map_err(|e| Error::Singular(format!("{e:?}")))?;
                let max_diag = numeric.d().iter().fold(0.0_f64, |a, &d| a.max(d.abs()));
                let tol = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
                if let Some(bad) = numeric.d().iter().position(|&d| !(d > tol)) {
                    return Err(Error::Singular(format!(
                        "pivot {bad} is {:e}; the network is likely disconnected",
                        numeric.d()[bad]
                    )));
                }
                Some(Factor::Sparse(numeric))
            }
        };

        Ok(SusceptanceSystem {
            n,
            reduction_bus,
            matrix,
            factor,
            branches,
            breve_rows: (0..n).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_lines(&self) -> usize {
        self.branches.len()
    }

    pub fn reduction_bus(&self) -> BusId {
        self.reduction_bus
    }

    pub fn matrix(&self) -> &CsMat<f64> {
        &self.matrix
    }

    /// Entry `B_ij`.
    pub fn entry(&self, i: BusId, j: BusId) -> f64 {
        self.matrix.get(i, j).copied().unwrap_or(0.0)
    }

    pub fn line_endpoints(&self, line: usize) -> (BusId, BusId) {
        let b = &self.branches[line];
        (b.from, b.to)
    }

    pub fn susceptance(&self, line: usize) -> f64 {
        self.branches[line].susceptance
    }

    /// `B̆ · rhs`: solves `B̂ x = rhs` on the non-reduction buses and pads a zero.
    pub fn breve_apply(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.n, "right-hand side has wrong length");
        let mut out = vec![0.0; self.n];
        let Some(factor) = &self.factor else {
            return out;
        };
        let r = self.reduction_bus;
        let reduced: Vec<f64> = rhs
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != r)
            .map(|(_, &v)| v)
            .collect();
        let x = factor.solve(&reduced);
        for (k, v) in x.into_iter().enumerate() {
            let i = if k < r { k } else { k + 1 };
            out[i] = v;
        }
        out
    }

    /// Row `i` of `B̆` (equal to column `i` by symmetry).
    pub fn breve_row(&self, i: BusId) -> &[f64] {
        self.breve_rows[i].get_or_init(|| {
            let mut e = vec![0.0; self.n];
            if i != self.reduction_bus {
                e[i] = 1.0;
            }
            self.breve_apply(&e)
        })
    }

    pub fn line_factor(&self, line: usize) -> LineFactor {
        let (from, to) = self.line_endpoints(line);
        let pi = self
            .breve_row(from)
            .iter()
            .zip(self.breve_row(to))
            .map(|(a, b)| a - b)
            .collect();
        LineFactor { line, pi }
    }

    fn check_balance(&self, injections: &[f64]) -> Result<()> {
        if injections.len() != self.n {
            return Err(Error::Dimension(format!(
                "injection vector has length {}, expected {}",
                injections.len(),
                self.n
            )));
        }
        let sum: f64 = injections.iter().sum();
        let scale: f64 = injections.iter().map(|v| v.abs()).sum();
        let tolerance = BALANCE_TOLERANCE * scale;
        if sum.abs() > tolerance {
            return Err(Error::Unbalanced { sum, tolerance });
        }
        Ok(())
    }

    /// Bus angles for balanced injections, zero at the reduction bus.
    pub fn angles(&self, injections: &[f64]) -> Result<Vec<f64>> {
        self.check_balance(injections)?;
        Ok(self.breve_apply(injections))
    }

    /// Flows from angles: `b_ij (θ_i − θ_j)`.
    pub fn flows_from_angles(&self, theta: &[f64]) -> Vec<f64> {
        self.branches
            .iter()
            .map(|br| br.susceptance * (theta[br.from] - theta[br.to]))
            .collect()
    }

    /// DC line flows for balanced nodal injections (angle route).
    pub fn dc_flows(&self, injections: &[f64]) -> Result<Vec<f64>> {
        let theta = self.angles(injections)?;
        Ok(self.flows_from_angles(&theta))
    }

    /// DC line flows through the line factors: `b_ij π_ijᵀ injections`.
    pub fn dc_flows_via_factors(&self, injections: &[f64]) -> Result<Vec<f64>> {
        self.check_balance(injections)?;
        Ok((0..self.n_lines())
            .map(|l| {
                let pi = self.line_factor(l).pi;
                self.susceptance(l) * dot(&pi, injections)
            })
            .collect())
    }

    /// `B θ`.
    pub fn apply(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (i, row) in self.matrix.outer_iterator().enumerate() {
            out[i] = row.iter().map(|(j, &v)| v * theta[j]).sum();
        }
        out
    }
}

fn reduce(matrix: &CsMat<f64>, drop: usize) -> CsMat<f64> {
    let n = matrix.rows();
    let map = |i: usize| if i < drop { i } else { i - 1 };
    let mut tri = TriMat::new((n - 1, n - 1));
    for (i, row) in matrix.outer_iterator().enumerate() {
        if i == drop {
            continue;
        }
        for (j, &v) in row.iter() {
            if j != drop {
                tri.add_triplet(map(i), map(j), v);
            }
        }
    }
    tri.to_csc()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
