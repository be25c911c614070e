use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("interior grid {rows}x{cols} too small: need at least 2x2")]
    GridTooSmall { rows: usize, cols: usize },

    #[error("link length {0} m shorter than the 100 m sensor zone")]
    LinkTooShort(f64),

    #[error("unknown node id {0}")]
    UnknownNode(usize),

    #[error("node {0} is not a boundary node")]
    NotBoundary(usize),

    #[error("route endpoints coincide at node {0}")]
    DegenerateRoute(usize),

    #[error("no route from node {from} to node {to}")]
    NoRoute { from: usize, to: usize },

    #[error("flow group {name}: {reason}")]
    BadFlowGroup { name: String, reason: String },

    #[error("simulation step size {0} must be positive and finite")]
    BadStepSize(f64),

    #[error("cycle length {got} s not in the admissible set {set:?}")]
    CycleNotInSet { got: u32, set: Vec<u32> },

    #[error("splits {0:?} are not usable: {1}")]
    BadSplits(Vec<f64>, String),

    #[error("cycle length {k} s cannot fit {phases} phases of {g_min} s minimum green plus {y} s yellow")]
    CycleTooShort { k: u32, phases: usize, g_min: u32, y: u32 },

    #[error("tensor shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("loss over an empty batch")]
    EmptyBatch,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("state vector length {got}, layout requires {expected}")]
    StateLength { expected: usize, got: usize },

    #[error("neighbor digest count {got} does not match mask length {expected}")]
    DigestMask { expected: usize, got: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint architecture hash {got:#018x} does not match the running configuration {expected:#018x}")]
    ArchitectureMismatch { expected: u64, got: u64 },

    #[error("config field `{field}`: {reason}")]
    BadConfig { field: &'static str, reason: String },

    #[error("unsupported format version {got} (this build reads version {expected})")]
    FormatVersion { expected: u32, got: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}
