use serde::{Deserialize, Serialize};

use super::kv::MemoryMode;
use super::ClusterError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorityKey {
    /// Fewest prompt tokens first.
    ShortestPrompt,
    /// Fewest prompt plus output tokens first.
    ShortestJob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Admission {
    /// Arrival order; a request that does not fit blocks everything behind it.
    Fcfs,
    /// Arrival order, but requests that do not fit are skipped over.
    FcfsSkip,
    /// Ascending key, ties by arrival order; blocks like `fcfs`.
    Priority { key: PriorityKey },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Batching {
    /// Iteration-level batching under a seat and a token budget.
    Continuous { max_num_seqs: u32, max_batch_tokens: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerPolicy {
    #[serde(default = "default_admission")]
    pub admission: Admission,
    #[serde(default = "default_batching")]
    pub batching: Batching,
    #[serde(default = "default_memory")]
    pub memory: MemoryMode,
}

fn default_admission() -> Admission {
    Admission::Fcfs
}

fn default_batching() -> Batching {
    Batching::Continuous { max_num_seqs: 256, max_batch_tokens: 8192 }
}

fn default_memory() -> MemoryMode {
    MemoryMode::Paged { block_tokens: 16 }
}

impl Default for SchedulerPolicy {
    fn default() -> Self {
        SchedulerPolicy { admission: default_admission(), batching: default_batching(), memory: default_memory() }
    }
}

impl SchedulerPolicy {
    pub fn max_num_seqs(&self) -> u32 {
        let Batching::Continuous { max_num_seqs, .. } = self.batching;
        max_num_seqs
    }

    pub fn max_batch_tokens(&self) -> u32 {
        let Batching::Continuous { max_batch_tokens, .. } = self.batching;
        max_batch_tokens
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.max_num_seqs() == 0 || self.max_batch_tokens() == 0 {
            return Err(ClusterError::InvalidPolicy("max_num_seqs and max_batch_tokens must be positive".into()));
        }
        if let MemoryMode::Paged { block_tokens: 0 } = self.memory {
            return Err(ClusterError::InvalidPolicy("block_tokens must be positive".into()));
        }
        Ok(())
    }
}
