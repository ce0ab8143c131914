//! Stochastic injections, participation matrices, and closed-form variance formulas.
//!
//! Fluctuations `ω` are nonzero only at source buses; their covariance `Ω` is
//! stored on the sources. A participation matrix is stored compactly as
//! `|participants| × |sources|`. For every source, the participation column
//! sums to one so that `Σ_i (ω − 𝒜ω)_i = 0` for every `ω`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::grid::{BusId, Generator, Grid, Violation};
use crate::linalg::SusceptanceSystem;

/// Tolerance on participation balance and on the global-policy equality.
pub const PARTICIPATION_TOLERANCE: f64 = 1e-9;

/// Relative tolerance on negative eigenvalues of `Ω`.
pub const PSD_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct StochasticModel {
    pub sources: Vec<BusId>,
    pub mu: Vec<f64>,
    pub omega: DMatrix<f64>,
    pub participants: Vec<BusId>,
    omega_sqrt: DMatrix<f64>,
}

impl StochasticModel {
    /// Validates dimensions, distinctness and positive semidefiniteness. Mildly
    /// negative eigenvalues are clipped to zero.
    pub fn new(
        sources: Vec<BusId>,
        mu: Vec<f64>,
        omega: DMatrix<f64>,
        participants: Vec<BusId>,
    ) -> Result<Self> {
        let s = sources.len();
        if mu.len() != s || omega.nrows() != s || omega.ncols() != s {
            return Err(Error::Dimension(format!(
                "{} sources but mean has length {} and covariance is {}x{}",
                s,
                mu.len(),
                omega.nrows(),
                omega.ncols()
            )));
        }
        if has_duplicates(&sources) {
            return Err(Error::InvalidParameter(
                "source buses must be distinct".into(),
            ));
        }
        if has_duplicates(&participants) {
            return Err(Error::InvalidParameter(
                "participant buses must be distinct".into(),
            ));
        }
        if omega.iter().chain(mu.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "mean and covariance must be finite".into(),
            ));
        }
        let norm = omega.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        for i in 0..s {
            for j in 0..i {
                if (omega[(i, j)] - omega[(j, i)]).abs() > 1e-12 * norm.max(1.0) {
                    return Err(Error::InvalidParameter(
                        "covariance is not symmetric".into(),
                    ));
                }
            }
        }
        let (omega, omega_sqrt) = if s == 0 {
            (omega, DMatrix::zeros(0, 0))
        } else {
            let eig = SymmetricEigen::new(omega.clone());
            let min = eig.eigenvalues.min();
            if min < -PSD_TOLERANCE * norm {
                return Err(Error::NotPsd {
                    min_eigenvalue: min,
                });
            }
            if min < 0.0 {
                log::warn!("clipping covariance eigenvalue {min:e} to zero");
            }
            let clipped = eig.eigenvalues.map(|v| v.max(0.0));
            let v = &eig.eigenvectors;
            let sqrt = v * DMatrix::from_diagonal(&clipped.map(f64::sqrt)) * v.transpose();
            let omega = if min < 0.0 {
                v * DMatrix::from_diagonal(&clipped) * v.transpose()
            } else {
                omega
            };
            (omega, sqrt)
        };
        Ok(StochasticModel {
            sources,
            mu,
            omega,
            participants,
            omega_sqrt,
        })
    }

    /// No sources and no participants.
    pub fn deterministic() -> Self {
        Self::new(vec![], vec![], DMatrix::zeros(0, 0), vec![]).expect("empty model is valid")
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn n_participants(&self) -> usize {
        self.participants.len()
    }

    /// Symmetric square root `Ω^½` (so `Ω = Ω^½ Ω^½ᵀ`).
    pub fn omega_sqrt(&self) -> &DMatrix<f64> {
        &self.omega_sqrt
    }

    /// Bus-indexed mean vector.
    pub fn mu_full(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (k, &bus) in self.sources.iter().enumerate() {
            out[bus] += self.mu[k];
        }
        out
    }

    /// Position of `bus` among the participants.
    pub fn participant_index(&self, bus: BusId) -> Option<usize> {
        self.participants.iter().position(|&b| b == bus)
    }

    /// Same sources and participants with `Ω` replaced.
    pub fn with_omega(&self, omega: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.sources.clone(),
            self.mu.clone(),
            omega,
            self.participants.clone(),
        )
    }

    /// Checks that every source and participant is a bus of `grid`.
    pub fn check_against(&self, grid: &Grid) -> Result<()> {
        let n = grid.n_buses();
        if let Some(&b) = self
            .sources
            .iter()
            .chain(&self.participants)
            .find(|&&b| b >= n)
        {
            return Err(Error::InvalidParameter(format!(
                "bus index {b} out of range"
            )));
        }
        Ok(())
    }
}

fn has_duplicates(v: &[BusId]) -> bool {
    let mut sorted = v.to_vec();
    sorted.sort_unstable();
    sorted.windows(2).any(|w| w[0] == w[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    #[default]
    Free,
    /// Each participant absorbs the same share of every source.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryBound {
    /// Participant position.
    pub row: usize,
    /// Source position.
    pub col: usize,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

/// Convex side constraints on participation matrices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PatternK {
    pub policy: Policy,
    pub nonnegative: bool,
    pub bounds: Vec<EntryBound>,
}

impl PatternK {
    pub fn nonnegative() -> Self {
        PatternK {
            nonnegative: true,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticipationMatrix {
    pub participants: Vec<BusId>,
    pub sources: Vec<BusId>,
    /// `|participants| × |sources|`.
    pub entries: DMatrix<f64>,
}

impl ParticipationMatrix {
    pub fn new(stoch: &StochasticModel, entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() != stoch.n_participants() || entries.ncols() != stoch.n_sources() {
            return Err(Error::Dimension(format!(
                "participation matrix is {}x{}, expected {}x{}",
                entries.nrows(),
                entries.ncols(),
                stoch.n_participants(),
                stoch.n_sources()
            )));
        }
        Ok(ParticipationMatrix {
            participants: stoch.participants.clone(),
            sources: stoch.sources.clone(),
            entries,
        })
    }

    pub fn zeros(stoch: &StochasticModel) -> Self {
        ParticipationMatrix {
            participants: stoch.participants.clone(),
            sources: stoch.sources.clone(),
            entries: DMatrix::zeros(stoch.n_participants(), stoch.n_sources()),
        }
    }

    /// Every participant absorbs `1/|participants|` of every source.
    pub fn uniform(stoch: &StochasticModel) -> Self {
        let r = stoch.n_participants();
        let mut a = Self::zeros(stoch);
        if r > 0 {
            a.entries.fill(1.0 / r as f64);
        }
        a
    }

    pub fn n_rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.entries.ncols()
    }

    /// Bus-indexed `n × |sources|` matrix with zero rows off the participants.
    pub fn padded(&self, n: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, self.n_cols());
        for (r, &bus) in self.participants.iter().enumerate() {
            for k in 0..self.n_cols() {
                out[(bus, k)] = self.entries[(r, k)];
            }
        }
        out
    }

    /// `(1 − t) self + t other`.
    pub fn lerp(&self, other: &Self, t: f64) -> Self {
        ParticipationMatrix {
            participants: self.participants.clone(),
            sources: self.sources.clone(),
            entries: &self.entries * (1.0 - t) + &other.entries * t,
        }
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.n_cols())
            .map(|k| self.entries.column(k).sum())
            .collect()
    }

    /// `(participant_bus, source_bus, alpha)` for every entry.
    pub fn triplets(&self) -> Vec<(BusId, BusId, f64)> {
        let mut out = Vec::with_capacity(self.entries.len());
        for (r, &p) in self.participants.iter().enumerate() {
            for (k, &s) in self.sources.iter().enumerate() {
                out.push((p, s, self.entries[(r, k)]));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

/// Checks balance, finiteness, sign, bounds and the global policy.
pub fn validate_participation(a: &ParticipationMatrix, pattern: &PatternK) -> ParticipationReport {
    let tol = PARTICIPATION_TOLERANCE;
    let mut violations = Vec::new();
    let mut push = |code: &str, message: String| {
        violations.push(Violation {
            code: code.into(),
            message,
        })
    };
    if a.entries.nrows() != a.participants.len() || a.entries.ncols() != a.sources.len() {
        push(
            "dimension",
            "entries do not match participants and sources".into(),
        );
        return ParticipationReport {
            ok: false,
            violations,
        };
    }
    if a.entries.iter().any(|v| !v.is_finite()) {
        push(
            "non_finite",
            "participation matrix has non-finite entries".into(),
        );
    }
    for (k, sum) in a.column_sums().into_iter().enumerate() {
        if (sum - 1.0).abs() > tol {
            push("balance", format!("source {k}: balance sum {sum}"));
        }
    }
    for r in 0..a.n_rows() {
        for k in 0..a.n_cols() {
            let v = a.entries[(r, k)];
            if pattern.nonnegative && v < -tol {
                push("negative", format!("entry ({r}, {k}) is {v}"));
            }
        }
        if pattern.policy == Policy::Global {
            let row = a.entries.row(r);
            if row.iter().any(|v| (v - row[0]).abs() > tol) {
                push(
                    "global_policy",
                    format!("participant {r}: global policy broken"),
                );
            }
        }
    }
    for b in &pattern.bounds {
        if b.row >= a.n_rows() || b.col >= a.n_cols() {
            push(
                "bound",
                format!("bound on ({}, {}) is out of range", b.row, b.col),
            );
            continue;
        }
        let v = a.entries[(b.row, b.col)];
        if b.lower.is_some_and(|lo| v < lo - tol) || b.upper.is_some_and(|hi| v > hi + tol) {
            push(
                "bound",
                format!("entry ({}, {}) = {v} violates its bounds", b.row, b.col),
            );
        }
    }
    ParticipationReport {
        ok: violations.is_empty(),
        violations,
    }
}

/// `D = B̆𝒜` (`n × |sources|`) and `γ` (`m × |sources|`) with
/// `γ_{ij,k} = B̆_{i,s_k} − B̆_{j,s_k} − D_{ik} + D_{jk}`.
pub fn gamma_matrix(
    sys: &SusceptanceSystem,
    a: &ParticipationMatrix,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = sys.n();
    let s = a.n_cols();
    let padded = a.padded(n);
    let mut d = DMatrix::zeros(n, s);
    let mut gamma = DMatrix::zeros(sys.n_lines(), s);
    for k in 0..s {
        let col: Vec<f64> = padded.column(k).iter().copied().collect();
        let dk = sys.breve_apply(&col);
        // B̆ is symmetric, so column s_k equals row s_k
        let ek = sys.breve_row(a.sources[k]);
        for i in 0..n {
            d[(i, k)] = dk[i];
        }
        for l in 0..sys.n_lines() {
            let (from, to) = sys.line_endpoints(l);
            gamma[(l, k)] = (ek[from] - dk[from]) - (ek[to] - dk[to]);
        }
    }
    (d, gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    /// `b² γ Ω γᵀ` through `D = B̆𝒜`.
    GammaForm,
    /// `b² πᵀ(I − 𝒜)Ω(I − 𝒜ᵀ)π` through the line factors.
    PiForm,
}

fn quad_form(omega: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(omega * v))
}

fn checked_variance(raw: f64, scale: f64, line: usize) -> Result<f64> {
    if raw < -1e-9 * scale.max(1.0) {
        return Err(Error::Consistency(format!(
            "line {line} has negative variance {raw:e}"
        )));
    }
    Ok(raw.max(0.0))
}

/// Per-line flow variances `s²` (MW²).
pub fn line_variances(
    sys: &SusceptanceSystem,
    stoch: &StochasticModel,
    a: &ParticipationMatrix,
    method: VarianceMethod,
) -> Result<Vec<f64>> {
    let m = sys.n_lines();
    let s = stoch.n_sources();
    if a.n_cols() != s {
        return Err(Error::Dimension(
            "participation matrix does not match the sources".into(),
        ));
    }
    let omega = &stoch.omega;
    let omega_norm = omega.iter().fold(0.0_f64, |x, v| x.max(v.abs()));
    match method {
        VarianceMethod::GammaForm => {
            let (_, gamma) = gamma_matrix(sys, a);
            (0..m)
                .map(|l| {
                    let g: DVector<f64> = gamma.row(l).transpose();
                    let b2 = sys.susceptance(l).powi(2);
                    checked_variance(
                        b2 * quad_form(omega, &g),
                        b2 * g.norm_squared() * omega_norm,
                        l,
                    )
                })
                .collect()
        }
        VarianceMethod::PiForm => (0..m)
            .map(|l| {
                let pi = sys.line_factor(l).pi;
                let v = DVector::from_fn(s, |k, _| {
                    let absorbed: f64 = a
                        .participants
                        .iter()
                        .enumerate()
                        .map(|(r, &bus)| a.entries[(r, k)] * pi[bus])
                        .sum();
                    pi[a.sources[k]] - absorbed
                });
                let b2 = sys.susceptance(l).powi(2);
                checked_variance(
                    b2 * quad_form(omega, &v),
                    b2 * v.norm_squared() * omega_norm,
                    l,
                )
            })
            .collect(),
    }
}

/// `𝒜_r Ω 𝒜_rᵀ` for participant position `r`.
pub fn participant_variance(stoch: &StochasticModel, a: &ParticipationMatrix, r: usize) -> f64 {
    let row: DVector<f64> = a.entries.row(r).transpose();
    quad_form(&stoch.omega, &row).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub variance: f64,
    pub expected_cost: f64,
}

/// Output variance and expected cost of the generator at `gen.bus` dispatched at `p_bar`.
pub fn generation_stats(
    stoch: &StochasticModel,
    a: &ParticipationMatrix,
    gen: &Generator,
    p_bar: f64,
) -> GenerationStats {
    let variance = a
        .participants
        .iter()
        .position(|&b| b == gen.bus)
        .map_or(0.0, |r| participant_variance(stoch, a, r));
    let c = gen.cost;
    GenerationStats {
        variance,
        expected_cost: c.quadratic * (p_bar * p_bar + variance) + c.linear * p_bar + c.constant,
    }
}

/// Safety parameter for a two-sided chance level: `Φ⁻¹(1 − ε)`.
pub fn nu_from_epsilon(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon {epsilon} must lie in (0, 1)"
        )));
    }
    let normal = Normal::standard();
    Ok(-normal.inverse_cdf(epsilon))
}

/// Tail probability `1 − Φ(ν)`.
pub fn epsilon_from_nu(nu: f64) -> f64 {
    Normal::standard().cdf(-nu)
}

/// `q(t) = a t² + b t + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Quadratic {
    /// Interpolates values at `t = 0, ½, 1`.
    pub fn through(q0: f64, q_half: f64, q1: f64) -> Self {
        Quadratic {
            a: 2.0 * (q1 - 2.0 * q_half + q0),
            b: 4.0 * q_half - 3.0 * q0 - q1,
            c: q0,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        (self.a * t + self.b) * t + self.c
    }
}

/// Line-variance quadratics along `(1 − t) a0 + t a1`.
pub fn line_variance_path(
    sys: &SusceptanceSystem,
    stoch: &StochasticModel,
    a0: &ParticipationMatrix,
    a1: &ParticipationMatrix,
) -> Result<Vec<Quadratic>> {
    let v0 = line_variances(sys, stoch, a0, VarianceMethod::GammaForm)?;
    let vh = line_variances(sys, stoch, &a0.lerp(a1, 0.5), VarianceMethod::GammaForm)?;
    let v1 = line_variances(sys, stoch, a1, VarianceMethod::GammaForm)?;
    Ok((0..v0.len())
        .map(|l| Quadratic::through(v0[l], vh[l], v1[l]))
        .collect())
}

/// Participant-variance quadratics along `(1 − t) a0 + t a1`.
pub fn participant_variance_path(
    stoch: &StochasticModel,
    a0: &ParticipationMatrix,
    a1: &ParticipationMatrix,
) -> Vec<Quadratic> {
    let mid = a0.lerp(a1, 0.5);
    (0..a0.n_rows())
        .map(|r| {
            Quadratic::through(
                participant_variance(stoch, a0, r),
                participant_variance(stoch, &mid, r),
                participant_variance(stoch, a1, r),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SourceEntry {
    bus: u64,
    mean: f64,
    std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum Correlation {
    Named(String),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BoundEntry {
    participant: u64,
    source: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    upper: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StochasticFile {
    sources: Vec<SourceEntry>,
    correlation: Correlation,
    participants: Vec<u64>,
    #[serde(default)]
    policy: Policy,
    #[serde(default)]
    nonnegative: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    bounds: Vec<BoundEntry>,
}

/// Parses a stochastic model file; buses are referenced by case-file label.
pub fn parse_stochastic(text: &str, grid: &Grid) -> Result<(StochasticModel, PatternK)> {
    let file: StochasticFile = serde_json::from_str(text)?;
    let bus = |label: u64| grid.bus_by_label(label).ok_or(Error::UnknownBus(label));
    let s = file.sources.len();
    let sources = file
        .sources
        .iter()
        .map(|e| bus(e.bus))
        .collect::<Result<Vec<_>>>()?;
    let participants = file
        .participants
        .iter()
        .map(|&l| bus(l))
        .collect::<Result<Vec<_>>>()?;
    let std: Vec<f64> = file.sources.iter().map(|e| e.std).collect();
    if std.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::parse(
            "stochastic model",
            "standard deviations must be nonnegative",
        ));
    }
    let corr = match file.correlation {
        Correlation::Named(name) if name == "identity" => DMatrix::identity(s, s),
        Correlation::Named(name) => {
            return Err(Error::parse(
                "stochastic model",
                format!("unknown correlation '{name}'"),
            ));
        }
        Correlation::Matrix(rows) => {
            if rows.len() != s || rows.iter().any(|r| r.len() != s) {
                return Err(Error::parse(
                    "stochastic model",
                    format!("correlation must be {s}x{s}"),
                ));
            }
            DMatrix::from_fn(s, s, |i, j| rows[i][j])
        }
    };
    let omega = DMatrix::from_fn(s, s, |i, j| std[i] * corr[(i, j)] * std[j]);
    let model = StochasticModel::new(
        sources,
        file.sources.iter().map(|e| e.mean).collect(),
        omega,
        participants,
    )?;
    let mut bounds = Vec::with_capacity(file.bounds.len());
    for b in &file.bounds {
        let p = bus(b.participant)?;
        let q = bus(b.source)?;
        let row = model.participant_index(p).ok_or_else(|| {
            Error::parse(
                "stochastic model",
                format!("bound names non-participant {}", b.participant),
            )
        })?;
        let col = model.sources.iter().position(|&x| x == q).ok_or_else(|| {
            Error::parse(
                "stochastic model",
                format!("bound names non-source {}", b.source),
            )
        })?;
        bounds.push(EntryBound {
            row,
            col,
            lower: b.lower,
            upper: b.upper,
        });
    }
    let pattern = PatternK {
        policy: file.policy,
        nonnegative: file.nonnegative,
        bounds,
    };
    Ok((model, pattern))
}

/// Serializes a model in the format read by [`parse_stochastic`].
pub fn serialize_stochastic(
    model: &StochasticModel,
    pattern: &PatternK,
    grid: &Grid,
) -> Result<String> {
    let s = model.n_sources();
    let std: Vec<f64> = (0..s)
        .map(|i| model.omega[(i, i)].max(0.0).sqrt())
        .collect();
    let corr: Vec<Vec<f64>> = (0..s)
        .map(|i| {
            (0..s)
                .map(|j| {
                    if i == j {
                        1.0
                    } else if std[i] > 0.0 && std[j] > 0.0 {
                        model.omega[(i, j)] / (std[i] * std[j])
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let is_identity = (0..s).all(|i| (0..s).all(|j| i == j || corr[i][j] == 0.0));
    let file = StochasticFile {
        sources: (0..s)
            .map(|k| SourceEntry {
                bus: grid.label(model.sources[k]),
                mean: model.mu[k],
                std: std[k],
            })
            .collect(),
        correlation: if is_identity {
            Correlation::Named("identity".into())
        } else {
            Correlation::Matrix(corr)
        },
        participants: model.participants.iter().map(|&b| grid.label(b)).collect(),
        policy: pattern.policy,
        nonnegative: pattern.nonnegative,
        bounds: pattern
            .bounds
            .iter()
            .map(|b| BoundEntry {
                participant: grid.label(model.participants[b.row]),
                source: grid.label(model.sources[b.col]),
                lower: b.lower,
                upper: b.upper,
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}
