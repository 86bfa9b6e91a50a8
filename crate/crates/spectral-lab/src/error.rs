use thiserror::Error;

use crate::lattice::DualIndex;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("degenerate step {n}: scale cut {m_n} does not exceed previous cut {m_prev}")]
    DegenerateStep { n: usize, m_prev: u32, m_n: u32 },
    #[error("cutoff too small: only {dim} indices retained")]
    CutoffTooSmall { dim: usize },
    #[error("resonant index: vanishing denominator at offset {q:?}")]
    ResonantIndex { q: DualIndex },
    #[error("quadrature node on pole: nearest unperturbed level {nearest}")]
    NodeOnPole { nearest: f64 },
    #[error("quadrature unresolved after {nodes} nodes (last change {change:e})")]
    QuadratureUnresolved { nodes: usize, change: f64 },
    #[error("outside perturbative regime: coupling estimate {estimate}")]
    OutsidePerturbativeRegime { estimate: f64 },
    #[error("on spectrum: smallest singular value {sigma:e}")]
    OnSpectrum { sigma: f64 },
    #[error("degenerate shift: {0}")]
    DegenerateShift(String),
    #[error("outside strip relevance: p = {p}")]
    OutsideStrip { p: f64 },
    #[error("no neighbor modes below k^s1")]
    NoNeighborModes,
    #[error("fully resonant: real trace is empty")]
    FullyResonant,
    #[error("regime mismatch: {0}")]
    RegimeMismatch(String),
    #[error("boundary too close to pole (winding {winding})")]
    BoundaryNearPole { winding: f64 },
    #[error("truncation unresolved: {0}")]
    TruncationUnresolved(String),
    #[error("scale collapse: {0}")]
    ScaleCollapse(String),
    #[error("too many roots: {0}")]
    TooManyRoots(String),
    #[error("window violated at phi = {phi}: {detail}")]
    WindowViolated { phi: f64, detail: String },
    #[error("multiple roots in window at phi = {phi}")]
    MultipleRoots { phi: f64 },
    #[error("not simple here: {count} eigenvalues in window")]
    NotSimple { count: usize },
    #[error("series-oracle mismatch: overlap {overlap}")]
    SeriesOracleMismatch { overlap: f64 },
    #[error("re-index failure at {m:?}")]
    ReindexFailure { m: DualIndex },
    #[error("under-resolved grid: spacing {h} exceeds {limit}")]
    UnderResolved { h: f64, limit: f64 },
    #[error("trend failure: {0}")]
    Trend(String),
    #[error("stage not run: {0}")]
    StageNotRun(String),
    #[error("invariant failure: {0}")]
    Invariant(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("toml parse: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("toml write: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl LabError {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        use LabError::*;
        match self {
            Validation(_) | Config(_) | DegenerateStep { .. } | TomlDe(_) => 2,
            Invariant(_)
            | NotSimple { .. }
            | MultipleRoots { .. }
            | TooManyRoots(_)
            | SeriesOracleMismatch { .. }
            | ReindexFailure { .. }
            | FullyResonant
            | RegimeMismatch(_) => 3,
            Trend(_) => 4,
            _ => 5,
        }
    }
}
