use thiserror::Error;

use crate::grid::CubeId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("cube generation {generation} out of range for depth {depth}")]
    GenerationOutOfRange { generation: u32, depth: u32 },

    #[error("cube {0} does not belong to this model")]
    ForeignCube(CubeId),

    #[error("step functions live on different models")]
    ModelMismatch,

    #[error("measure of cube {0} is zero or below the underflow guard")]
    DegenerateMeasure(CubeId),

    #[error("weight density must be strictly positive and finite (leaf {leaf}: {value})")]
    NonPositiveDensity { leaf: usize, value: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("A2 target {target} is out of reach at this depth (best {best})")]
    UnreachableTarget { target: f64, best: f64 },

    #[error("block at {cube} needs generation {needed} but the model stops at {depth}")]
    UnresolvedBlock { cube: CubeId, needed: u32, depth: u32 },

    #[error("cube {0} is not a block of this shift")]
    UnknownCube(CubeId),

    #[error("cube {0} is not on the martingale ladder")]
    NotOnLadder(CubeId),

    #[error("shift is not separated: {0}")]
    NotSeparated(String),

    #[error("function is identically zero")]
    DegenerateFunction,

    #[error("problem too large: {0}")]
    SizeGuard(String),

    #[error("singular value iteration did not converge after {iterations} products (residual {residual:e}, value {value:e})")]
    NonConvergence { iterations: usize, residual: f64, value: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("decomposition identity violated: total {total:e}, sum of parts {parts:e}")]
    IdentityViolation { total: f64, parts: f64 },

    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, LabError>;
