use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SimTime;

/// Vocabulary of simulated events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    RequestArrival,
    BatchStart,
    BatchComplete,
    PrefillComplete,
    MemoryAvailable,
    /// A decode-side KV reservation succeeded; always precedes the matching
    /// `KvCacheTransferStart` at the same timestamp.
    KvReserved,
    KvCacheTransferStart,
    KvCacheTransferDone,
    AttnComputeDone,
    AToFTransferDone,
    FfnComputeDone,
    FToATransferDone,
    TokenEmitted,
    RequestComplete,
}

impl EventKind {
    pub const ALL: [EventKind; 14] = [
        EventKind::RequestArrival,
        EventKind::BatchStart,
        EventKind::BatchComplete,
        EventKind::PrefillComplete,
        EventKind::MemoryAvailable,
        EventKind::KvReserved,
        EventKind::KvCacheTransferStart,
        EventKind::KvCacheTransferDone,
        EventKind::AttnComputeDone,
        EventKind::AToFTransferDone,
        EventKind::FfnComputeDone,
        EventKind::FToATransferDone,
        EventKind::TokenEmitted,
        EventKind::RequestComplete,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::RequestArrival => "REQUEST_ARRIVAL",
            EventKind::BatchStart => "BATCH_START",
            EventKind::BatchComplete => "BATCH_COMPLETE",
            EventKind::PrefillComplete => "PREFILL_COMPLETE",
            EventKind::MemoryAvailable => "MEMORY_AVAILABLE",
            EventKind::KvReserved => "KV_RESERVED",
            EventKind::KvCacheTransferStart => "KV_CACHE_TRANSFER_START",
            EventKind::KvCacheTransferDone => "KV_CACHE_TRANSFER_DONE",
            EventKind::AttnComputeDone => "ATTN_COMPUTE_DONE",
            EventKind::AToFTransferDone => "A_TO_F_TRANSFER_DONE",
            EventKind::FfnComputeDone => "FFN_COMPUTE_DONE",
            EventKind::FToATransferDone => "F_TO_A_TRANSFER_DONE",
            EventKind::TokenEmitted => "TOKEN_EMITTED",
            EventKind::RequestComplete => "REQUEST_COMPLETE",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EventKind::ALL.iter().copied().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown event kind `{s}`"))
    }
}

/// Kind-specific event data. Unused fields are omitted from the serialized
/// form, which keeps trace lines short and the field order fixed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventPayload {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub request: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cluster: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub replica: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub micro_batch: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub layer: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub phase: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub members: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tokens: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bytes: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub duration_ns: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kv_used: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kv_capacity: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub imbalance: Option<Vec<f64>>,
    /// Attention-executor idle fraction of an AF decode step.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bubble: Option<f64>,
}

impl EventPayload {
    pub fn request(mut self, id: u64) -> Self {
        self.request = Some(id);
        self
    }

    pub fn cluster(mut self, id: u32) -> Self {
        self.cluster = Some(id);
        self
    }

    pub fn replica(mut self, id: u32) -> Self {
        self.replica = Some(id);
        self
    }

    pub fn step(mut self, step: u64) -> Self {
        self.step = Some(step);
        self
    }

    /// One-based micro-batch and layer indices of an AF pipeline node.
    pub fn node(mut self, micro_batch: u32, layer: u32) -> Self {
        self.micro_batch = Some(micro_batch);
        self.layer = Some(layer);
        self
    }

    pub fn phase(mut self, phase: impl Into<String>) -> Self {
        self.phase = Some(phase.into());
        self
    }

    pub fn members(mut self, n: u32) -> Self {
        self.members = Some(n);
        self
    }

    pub fn tokens(mut self, n: u64) -> Self {
        self.tokens = Some(n);
        self
    }

    pub fn bytes(mut self, n: u64) -> Self {
        self.bytes = Some(n);
        self
    }

    pub fn duration_ns(mut self, ns: u64) -> Self {
        self.duration_ns = Some(ns);
        self
    }

    pub fn kv(mut self, used: u64, capacity: u64) -> Self {
        self.kv_used = Some(used);
        self.kv_capacity = Some(capacity);
        self
    }

    pub fn imbalance(mut self, series: Vec<f64>) -> Self {
        self.imbalance = Some(series);
        self
    }

    pub fn bubble(mut self, idle_fraction: f64) -> Self {
        self.bubble = Some(idle_fraction);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("payload serialization is infallible")
    }
}

/// A scheduled unit of simulated work.
#[derive(Debug, Clone, PartialEq)]
pub struct SimEvent {
    pub timestamp: SimTime,
    pub seq: u64,
    pub kind: EventKind,
    pub payload: EventPayload,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in EventKind::ALL {
            assert_eq!(k.as_str().parse::<EventKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.as_str()));
        }
        assert!("NOPE".parse::<EventKind>().is_err());
    }

    #[test]
    fn payload_omits_empty_fields() {
        assert_eq!(EventPayload::default().to_json(), "{}");
        let p = EventPayload::default().request(3).node(1, 2);
        assert_eq!(p.to_json(), r#"{"request":3,"micro_batch":1,"layer":2}"#);
    }
}
