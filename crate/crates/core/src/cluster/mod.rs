//! Per-replica scheduling, KV memory, and batch execution.

mod batch;
mod exec;
mod kv;
mod policy;

use thiserror::Error;

use crate::cost::CostError;
use crate::workload::RequestId;

pub use batch::{build_batch, BatchMember, BatchPhase, BatchPlan, Candidate, Running};
pub use exec::{derive_seed, ExecContext, ExecOutcome};
pub use kv::{KvPool, MemoryMode};
pub use policy::{Admission, Batching, PriorityKey, SchedulerPolicy};

#[derive(Debug, Error)]
pub enum ClusterError {
    /// Not enough KV headroom; the caller retries after memory frees up.
    #[error("backpressure: requested {requested} KV tokens, headroom {headroom}")]
    Backpressure { requested: u64, headroom: u64 },
    #[error("request {0} holds no KV allocation")]
    UnknownAllocation(RequestId),
    #[error("invalid scheduler policy: {0}")]
    InvalidPolicy(String),
    #[error("request {request} can never be scheduled: {detail}")]
    RequestTooLarge { request: RequestId, detail: String },
    #[error(transparent)]
    Cost(#[from] CostError),
}
