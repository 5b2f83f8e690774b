//! Operator runtime prediction and MoE layer composition.

mod features;
mod forest;
mod model;
mod moe;
pub mod roofline;
mod routing;
pub mod synthetic;

use thiserror::Error;

pub use features::{
    attention_features, AttentionFeatures, AttnDims, CountMode, GroupedGemmFeatures, LengthStats, Phase,
    ATTENTION_FEATURES, GROUPED_GEMM_FEATURES,
};
pub use forest::{ensemble_predict, Hyperparams, Node, TargetScale, Tree};
pub use model::{
    eval_model, fit_model, ConstantPredictor, CostModel, Dataset, ErrorCdf, FitReport, Forest, OpPredictor, Predictor,
    Schema, MIN_TRAINING_ROWS,
};
pub use moe::{moe_layer_latency, MoeBreakdown, MoeLayout};
pub use routing::{route_tokens, ExpertAssignment, RoutingPolicy};

#[derive(Debug, Error)]
pub enum CostError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid features: {0}")]
    InvalidFeatures(String),
    #[error("schema mismatch: expected {expected}, found {found}")]
    SchemaMismatch { expected: String, found: String },
    #[error("unknown feature schema `{0}`")]
    UnknownSchema(String),
    #[error("non-positive GEMM dimension ({m}, {n}, {k})")]
    NonPositiveDim { m: u64, n: u64, k: u64 },
    #[error("insufficient data: {rows} rows, need at least {min}")]
    InsufficientData { rows: usize, min: usize },
    #[error("degenerate target: {0}")]
    DegenerateTarget(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("top_k {top_k} outside 1..={num_experts}")]
    InvalidTopK { top_k: u32, num_experts: u32 },
    #[error("invalid routing trace: {0}")]
    InvalidTrace(String),
    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid model file: {0}")]
    ModelFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
