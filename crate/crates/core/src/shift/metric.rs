//! Variance metrics `Δ(f̄, s²) = Σ_{ij ∈ F} Δ_ij(f̄_ij, s²_ij)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MetricModel {
    /// Weighted sum of variances over all lines.
    Sum,
    /// Weighted sum over the `n` lines with largest `|f̄|`.
    TopFlow { n: usize },
    /// Weighted sum over the `n` lines with largest `s²`.
    TopVariance { n: usize },
    /// `Σ −ρ log(s² − v)` over all lines, where `v` is the variance implied by `𝒜`.
    LogBarrier,
    /// Weighted sum over the top-`n` flows together with the nearly tight lines.
    Composite { n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weights {
    Unit,
    /// `ψ = 1 / (f^max)²`.
    InverseLimitSquared,
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub model: MetricModel,
    pub weights: Weights,
    /// Barrier coefficients for [`MetricModel::LogBarrier`]; empty means all ones.
    #[serde(default)]
    pub rho: Vec<f64>,
}

impl MetricSpec {
    pub fn new(model: MetricModel, weights: Weights) -> Self {
        MetricSpec {
            model,
            weights,
            rho: Vec::new(),
        }
    }

    pub fn sum(weights: Weights) -> Self {
        Self::new(MetricModel::Sum, weights)
    }

    pub fn composite(n: usize) -> Self {
        Self::new(MetricModel::Composite { n }, Weights::Unit)
    }

    /// Per-line weights `ψ` for `grid`.
    pub fn weights(&self, grid: &Grid) -> Result<Vec<f64>> {
        let m = grid.n_lines();
        let w = match &self.weights {
            Weights::Unit => vec![1.0; m],
            Weights::InverseLimitSquared => grid
                .lines
                .iter()
                .map(|l| 1.0 / (l.limit * l.limit))
                .collect(),
            Weights::Custom(w) => {
                if w.len() != m {
                    return Err(Error::Dimension(format!(
                        "{} weights for {m} lines",
                        w.len()
                    )));
                }
                w.clone()
            }
        };
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "metric weights must be finite and nonnegative".into(),
            ));
        }
        Ok(w)
    }

    fn rho(&self, m: usize) -> Result<Vec<f64>> {
        if self.rho.is_empty() {
            return Ok(vec![1.0; m]);
        }
        if self.rho.len() != m {
            return Err(Error::Dimension(format!(
                "{} barrier coefficients for {m} lines",
                self.rho.len()
            )));
        }
        if self.rho.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidParameter(
                "barrier coefficients must be positive".into(),
            ));
        }
        Ok(self.rho.clone())
    }

    pub fn check(&self, grid: &Grid) -> Result<()> {
        let m = grid.n_lines();
        self.weights(grid)?;
        match self.model {
            MetricModel::TopFlow { n } | MetricModel::TopVariance { n } if n > m => Err(
                Error::InvalidParameter(format!("N = {n} exceeds the {m} lines")),
            ),
            MetricModel::LogBarrier => self.rho(m).map(|_| ()),
            _ => Ok(()),
        }
    }

    /// Models usable as the shifting objective: the set of lines depends on
    /// flows (or on the nearly tight set) only and each term is `ψ s²`.
    pub fn supports_shifting(&self) -> bool {
        matches!(
            self.model,
            MetricModel::Sum | MetricModel::TopFlow { .. } | MetricModel::Composite { .. }
        )
    }

    /// Models for which the procedure's descent guarantees apply.
    pub fn is_convex_model(&self) -> bool {
        matches!(self.model, MetricModel::Sum | MetricModel::TopFlow { .. })
    }
}

fn top_n(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // descending by value, ties to the lower index
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Lines entering the metric. Top-`N` selections come first in rank order;
/// composite mode then appends the tight lines not already selected, ascending.
pub fn select_f(spec: &MetricSpec, f_bar: &[f64], s2: &[f64], tight: &[usize]) -> Vec<usize> {
    let m = f_bar.len();
    match spec.model {
        MetricModel::Sum | MetricModel::LogBarrier => (0..m).collect(),
        MetricModel::TopFlow { n } => top_n(&f_bar.iter().map(|f| f.abs()).collect::<Vec<_>>(), n),
        MetricModel::TopVariance { n } => top_n(s2, n),
        MetricModel::Composite { n } => {
            let mut out = top_n(&f_bar.iter().map(|f| f.abs()).collect::<Vec<_>>(), n);
            let mut extra: Vec<usize> =
                tight.iter().copied().filter(|l| !out.contains(l)).collect();
            extra.sort_unstable();
            extra.dedup();
            out.extend(extra);
            out
        }
    }
}

/// Evaluates the metric. `aux` holds the variance implied by the participation
/// matrix and is required by the barrier model; `tight` is used by composite mode.
pub fn metric_eval(
    spec: &MetricSpec,
    grid: &Grid,
    f_bar: &[f64],
    s2: &[f64],
    aux: Option<&[f64]>,
    tight: &[usize],
) -> Result<f64> {
    let m = grid.n_lines();
    if f_bar.len() != m || s2.len() != m {
        return Err(Error::Dimension(
            "flow and variance vectors must have one entry per line".into(),
        ));
    }
    if let MetricModel::LogBarrier = spec.model {
        let aux = aux.ok_or_else(|| {
            Error::InvalidParameter("barrier metric needs the implied variances".into())
        })?;
        if aux.len() != m {
            return Err(Error::Dimension(
                "implied variances must have one entry per line".into(),
            ));
        }
        let rho = spec.rho(m)?;
        let mut total = 0.0;
        for l in 0..m {
            let gap = s2[l] - aux[l];
            if !(gap > 0.0) {
                return Ok(f64::INFINITY);
            }
            total -= rho[l] * gap.ln();
        }
        return Ok(total);
    }
    let w = spec.weights(grid)?;
    Ok(select_f(spec, f_bar, s2, tight)
        .into_iter()
        .map(|l| w[l] * s2[l])
        .sum())
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let model = match self.model {
            MetricModel::Sum => "sum".to_string(),
            MetricModel::TopFlow { n } => format!("top-flow:N={n}"),
            MetricModel::TopVariance { n } => format!("top-variance:N={n}"),
            MetricModel::LogBarrier => "log-barrier".to_string(),
            MetricModel::Composite { n } => format!("composite:N={n}"),
        };
        let weights = match &self.weights {
            Weights::Unit => "",
            Weights::InverseLimitSquared => ":inverse-limit",
            Weights::Custom(_) => ":custom",
        };
        write!(f, "{model}{weights}")
    }
}

/// Parses `model[:N=n][:inverse-limit]`, with model one of `sum`, `top-flow`,
/// `top-variance`, `log-barrier`, `composite`.
impl FromStr for MetricSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default().trim().to_ascii_lowercase();
        let mut n = None;
        let mut weights = Weights::Unit;
        for p in parts {
            let p = p.trim();
            if let Some(v) = p.strip_prefix("N=").or_else(|| p.strip_prefix("n=")) {
                n = Some(
                    v.parse::<usize>()
                        .map_err(|_| Error::parse("metric", format!("bad N in '{s}'")))?,
                );
            } else if p == "inverse-limit" {
                weights = Weights::InverseLimitSquared;
            } else if p == "unit" {
                weights = Weights::Unit;
            } else {
                return Err(Error::parse("metric", format!("unknown option '{p}'")));
            }
        }
        let need_n =
            || n.ok_or_else(|| Error::parse("metric", format!("'{name}' needs N=<count>")));
        let model = match name.as_str() {
            "sum" | "i" => MetricModel::Sum,
            "top-flow" | "ii.1" => MetricModel::TopFlow { n: need_n()? },
            "top-variance" | "ii.2" => MetricModel::TopVariance { n: need_n()? },
            "log-barrier" | "iii" => MetricModel::LogBarrier,
            "composite" => MetricModel::Composite { n: need_n()? },
            _ => return Err(Error::parse("metric", format!("unknown model '{name}'"))),
        };
        Ok(MetricSpec::new(model, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, Line};

    fn grid(m: usize) -> Grid {
        Grid {
            base_mva: 100.0,
            buses: (0..=m)
                .map(|i| Bus {
                    id: i,
                    label: i as u64 + 1,
                    load: 0.0,
                })
                .collect(),
            lines: (0..m)
                .map(|l| Line {
                    from: l,
                    to: l + 1,
                    susceptance: 1.0,
                    limit: 2.0,
                    nu: 3.0,
                })
                .collect(),
            generators: vec![],
            slack: m,
        }
    }

    #[test]
    fn sum_of_variances() {
        let g = grid(3);
        let spec = MetricSpec::sum(Weights::Unit);
        let v = metric_eval(
            &spec,
            &g,
            &[0.0; 3],
            &[1.0 / 9.0, 4.0 / 9.0, 1.0 / 9.0],
            None,
            &[],
        )
        .unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
        let spec = MetricSpec::sum(Weights::InverseLimitSquared);
        let v = metric_eval(&spec, &g, &[0.0; 3], &[4.0, 4.0, 4.0], None, &[]).unwrap();
        assert!((v - 3.0).abs() < 1e-15);
    }

    #[test]
    fn top_flow_picks_largest_magnitude() {
        let g = grid(3);
        let spec = MetricSpec::new(MetricModel::TopFlow { n: 1 }, Weights::Unit);
        let v = metric_eval(&spec, &g, &[5.0, 2.0, -7.0], &[1.0, 9.0, 4.0], None, &[]).unwrap();
        assert_eq!(v, 4.0);
        let spec = MetricSpec::new(MetricModel::TopVariance { n: 1 }, Weights::Unit);
        let v = metric_eval(&spec, &g, &[5.0, 2.0, -7.0], &[1.0, 9.0, 4.0], None, &[]).unwrap();
        assert_eq!(v, 9.0);
    }

    #[test]
    fn selection_order_and_ties() {
        let top2 = MetricSpec::new(MetricModel::TopFlow { n: 2 }, Weights::Unit);
        assert_eq!(
            select_f(&top2, &[5.0, 2.0, 7.0], &[0.0; 3], &[]),
            vec![2, 0]
        );
        let top1 = MetricSpec::new(MetricModel::TopFlow { n: 1 }, Weights::Unit);
        assert_eq!(select_f(&top1, &[5.0, 5.0], &[0.0; 2], &[]), vec![0]);
        let comp = MetricSpec::composite(1);
        assert_eq!(
            select_f(&comp, &[5.0, 2.0, 7.0], &[0.0; 3], &[1]),
            vec![2, 1]
        );
        assert_eq!(select_f(&comp, &[5.0, 2.0, 7.0], &[0.0; 3], &[2]), vec![2]);
    }

    #[test]
    fn barrier() {
        let g = grid(2);
        let spec = MetricSpec::new(MetricModel::LogBarrier, Weights::Unit);
        let v = metric_eval(
            &spec,
            &g,
            &[0.0; 2],
            &[2.0, 1.0 + 1.0_f64.exp()],
            Some(&[1.0, 1.0]),
            &[],
        )
        .unwrap();
        assert!((v + 1.0).abs() < 1e-12);
        let v = metric_eval(&spec, &g, &[0.0; 2], &[1.0, 3.0], Some(&[1.0, 1.0]), &[]).unwrap();
        assert_eq!(v, f64::INFINITY);
        assert!(metric_eval(&spec, &g, &[0.0; 2], &[1.0, 3.0], None, &[]).is_err());
    }

    #[test]
    fn parse_and_print() {
        let s: MetricSpec = "composite:N=100".parse().unwrap();
        assert_eq!(s.model, MetricModel::Composite { n: 100 });
        assert_eq!(s.to_string(), "composite:N=100");
        let s: MetricSpec = "sum:inverse-limit".parse().unwrap();
        assert_eq!(s.weights, Weights::InverseLimitSquared);
        assert!("top-flow".parse::<MetricSpec>().is_err());
        assert!("bogus".parse::<MetricSpec>().is_err());
        assert!(
            MetricSpec::new(MetricModel::TopFlow { n: 9 }, Weights::Unit)
                .check(&grid(3))
                .is_err()
        );
    }
}
