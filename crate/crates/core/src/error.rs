use thiserror::Error;

use crate::model::ValidationReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem spec:\n{0}")]
    InvalidSpec(ValidationReport),

    #[error("{what}: time {t} outside [0, {horizon}]")]
    DomainError { what: &'static str, t: f64, horizon: f64 },

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch { what: String, expected: String, got: String },

    #[error("{what} blew up at t = {time:.6} (entry beyond {bound:.3e})")]
    Singularity { what: &'static str, time: f64, bound: f64 },

    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    #[error("fixed-point system singular: {details}")]
    FixedPointSingular { details: String },

    #[error("simulation diverged on path {path} at step {step}")]
    SimulationDiverged { path: usize, step: usize },

    #[error("unidentifiable jump of size {observed} in mark space E{space}")]
    UnidentifiableJump { observed: f64, space: usize },

    #[error("degenerate particle filter at step {step}: all weights underflowed (increase n_particles or refine dt)")]
    DegenerateFilter { step: usize },

    #[error("missing series {0} in path bundle")]
    MissingSeries(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
