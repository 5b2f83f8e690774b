use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::workload::RequestId;

use super::ClusterError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MemoryMode {
    /// Allocations round up to whole blocks of `block_tokens`.
    Paged {
        block_tokens: u64,
    },
    Exact,
}

impl MemoryMode {
    pub fn round(self, tokens: u64) -> u64 {
        match self {
            MemoryMode::Paged { block_tokens } => tokens.div_ceil(block_tokens) * block_tokens,
            MemoryMode::Exact => tokens,
        }
    }
}

/// KV-cache token pool of one replica.
#[derive(Debug, Clone, PartialEq)]
pub struct KvPool {
    capacity_tokens: u64,
    used_tokens: u64,
    mode: MemoryMode,
    allocations: BTreeMap<RequestId, u64>,
}

impl KvPool {
    pub fn new(capacity_tokens: u64, mode: MemoryMode) -> Self {
        KvPool { capacity_tokens, used_tokens: 0, mode, allocations: BTreeMap::new() }
    }

    pub fn capacity_tokens(&self) -> u64 {
        self.capacity_tokens
    }

    pub fn used_tokens(&self) -> u64 {
        self.used_tokens
    }

    pub fn headroom(&self) -> u64 {
        self.capacity_tokens - self.used_tokens
    }

    pub fn mode(&self) -> MemoryMode {
        self.mode
    }

    pub fn allocation(&self, request: RequestId) -> Option<u64> {
        self.allocations.get(&request).copied()
    }

    pub fn allocations(&self) -> &BTreeMap<RequestId, u64> {
        &self.allocations
    }

    /// Whether `tokens` more could be reserved right now.
    pub fn fits(&self, tokens: u64) -> bool {
        self.mode.round(tokens) <= self.headroom()
    }

    /// Grows `request`'s allocation by `tokens` (rounded per the memory
    /// mode). Returns the tokens actually charged.
    pub fn reserve(&mut self, request: RequestId, tokens: u64) -> Result<u64, ClusterError> {
        if tokens == 0 {
            return Ok(0);
        }
        let charged = self.mode.round(tokens);
        if charged > self.headroom() {
            return Err(ClusterError::Backpressure { requested: charged, headroom: self.headroom() });
        }
        self.used_tokens += charged;
        *self.allocations.entry(request).or_insert(0) += charged;
        Ok(charged)
    }

    /// Frees `request`'s whole allocation; returns the freed tokens.
    pub fn release(&mut self, request: RequestId) -> Result<u64, ClusterError> {
        let freed = self.allocations.remove(&request).ok_or(ClusterError::UnknownAllocation(request))?;
        self.used_tokens -= freed;
        Ok(freed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserve_zero_is_noop() {
        let mut p = KvPool::new(100, MemoryMode::Exact);
        assert_eq!(p.reserve(1, 0).unwrap(), 0);
        assert_eq!(p.used_tokens(), 0);
        assert!(p.allocations().is_empty());
    }

    #[test]
    fn backpressure_when_headroom_short() {
        let mut p = KvPool::new(100, MemoryMode::Exact);
        p.reserve(1, 60).unwrap();
        assert!(matches!(p.reserve(2, 50), Err(ClusterError::Backpressure { requested: 50, headroom: 40 })));
        assert_eq!(p.used_tokens(), 60);
    }

    #[test]
    fn paged_rounds_up() {
        let mut p = KvPool::new(100, MemoryMode::Paged { block_tokens: 16 });
        assert_eq!(p.reserve(1, 17).unwrap(), 32);
        assert_eq!(p.used_tokens(), 32);
    }

    #[test]
    fn release_restores_headroom() {
        let mut p = KvPool::new(100, MemoryMode::Exact);
        p.reserve(1, 70).unwrap();
        assert_eq!(p.release(1).unwrap(), 70);
        assert_eq!(p.used_tokens(), 0);
        p.reserve(2, 70).unwrap();
        p.release(2).unwrap();
        assert!(matches!(p.release(2), Err(ClusterError::UnknownAllocation(2))));
    }
}
