use serde::{Deserialize, Serialize};

use crate::workload::RequestId;

use super::kv::KvPool;
use super::policy::{Admission, PriorityKey, SchedulerPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchPhase {
    Prefill,
    Decode,
    Mixed,
}

impl BatchPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            BatchPhase::Prefill => "prefill",
            BatchPhase::Decode => "decode",
            BatchPhase::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchMember {
    pub request: RequestId,
    pub query_len: u32,
    pub context_len: u32,
    pub prefill: bool,
    /// KV tokens reserved when this member was admitted by this plan.
    pub kv_charge: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BatchPlan {
    pub members: Vec<BatchMember>,
    /// Running members first (in running order), then admitted ones.
    pub admitted: Vec<RequestId>,
    pub tokens: u64,
}

impl BatchPlan {
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn phase(&self) -> Option<BatchPhase> {
        let pre = self.members.iter().any(|m| m.prefill);
        let dec = self.members.iter().any(|m| !m.prefill);
        match (pre, dec) {
            (true, true) => Some(BatchPhase::Mixed),
            (true, false) => Some(BatchPhase::Prefill),
            (false, true) => Some(BatchPhase::Decode),
            (false, false) => None,
        }
    }

    pub fn prefill_members(&self) -> impl Iterator<Item = &BatchMember> {
        self.members.iter().filter(|m| m.prefill)
    }

    pub fn decode_members(&self) -> impl Iterator<Item = &BatchMember> {
        self.members.iter().filter(|m| !m.prefill)
    }
}

/// A request waiting for admission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub request: RequestId,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    /// Prefill candidates run their whole prompt; others join as decoders.
    pub prefill: bool,
    pub context_len: u32,
    /// KV tokens to reserve on admission (before paging).
    pub kv_need: u64,
}

impl Candidate {
    fn query_len(&self) -> u32 {
        if self.prefill {
            self.prompt_tokens
        } else {
            1
        }
    }
}

/// An admitted request that decodes one token per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Running {
    pub request: RequestId,
    pub context_len: u32,
}

/// Plans the next iteration: every running request decodes, then queued
/// requests (given in arrival order) are admitted in policy order while
/// seats, tokens, and KV headroom allow. Pure; the caller applies the
/// reservations.
pub fn build_batch(queue: &[Candidate], running: &[Running], policy: &SchedulerPolicy, pool: &KvPool) -> BatchPlan {
    let mut plan = BatchPlan::default();
    for r in running {
        plan.members.push(BatchMember {
            request: r.request,
            query_len: 1,
            context_len: r.context_len,
            prefill: false,
            kv_charge: 0,
        });
        plan.tokens += 1;
    }
    let mut order: Vec<&Candidate> = queue.iter().collect();
    let strict = match policy.admission {
        Admission::Fcfs => true,
        Admission::FcfsSkip => false,
        Admission::Priority { key } => {
            order.sort_by_key(|c| match key {
                PriorityKey::ShortestPrompt => c.prompt_tokens as u64,
                PriorityKey::ShortestJob => c.prompt_tokens as u64 + c.output_tokens as u64,
            });
            true
        }
    };
    let mut headroom = pool.headroom();
    for c in order {
        let charge = pool.mode().round(c.kv_need);
        let fits = plan.members.len() < policy.max_num_seqs() as usize
            && plan.tokens + c.query_len() as u64 <= policy.max_batch_tokens() as u64
            && charge <= headroom;
        if !fits {
            if strict {
                break;
            }
            continue;
        }
        headroom -= charge;
        plan.tokens += c.query_len() as u64;
        plan.admitted.push(c.request);
        plan.members.push(BatchMember {
            request: c.request,
            query_len: c.query_len(),
            context_len: c.context_len,
            prefill: c.prefill,
            kv_charge: c.kv_need,
        });
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{Batching, MemoryMode};

    fn prefill(id: u64, prompt: u32, kv: u64) -> Candidate {
        Candidate {
            request: id,
            prompt_tokens: prompt,
            output_tokens: 1,
            prefill: true,
            context_len: prompt,
            kv_need: kv,
        }
    }

    fn policy(admission: Admission, seqs: u32, tokens: u32) -> SchedulerPolicy {
        SchedulerPolicy {
            admission,
            batching: Batching::Continuous { max_num_seqs: seqs, max_batch_tokens: tokens },
            memory: MemoryMode::Exact,
        }
    }

    #[test]
    fn empty_plan() {
        let p = build_batch(&[], &[], &SchedulerPolicy::default(), &KvPool::new(10, MemoryMode::Exact));
        assert!(p.is_empty());
        assert_eq!(p.phase(), None);
    }

    #[test]
    fn token_budget_admits_two() {
        let q = [prefill(1, 100, 100), prefill(2, 100, 100), prefill(3, 100, 100)];
        let p = build_batch(&q, &[], &policy(Admission::Fcfs, 8, 250), &KvPool::new(10_000, MemoryMode::Exact));
        assert_eq!(p.admitted, vec![1, 2]);
        assert_eq!(p.tokens, 200);
    }

    #[test]
    fn strict_fcfs_blocks_on_memory() {
        let pool = KvPool::new(4000, MemoryMode::Exact);
        let q = [prefill(1, 10, 5000), prefill(2, 10, 100)];
        assert!(build_batch(&q, &[], &policy(Admission::Fcfs, 8, 1000), &pool).is_empty());
        let skip = build_batch(&q, &[], &policy(Admission::FcfsSkip, 8, 1000), &pool);
        assert_eq!(skip.admitted, vec![2]);
    }

    #[test]
    fn running_members_are_never_dropped() {
        let running = [Running { request: 9, context_len: 50 }];
        let q = [prefill(1, 10, 10)];
        let p = build_batch(&q, &running, &policy(Admission::Fcfs, 1, 1000), &KvPool::new(100, MemoryMode::Exact));
        assert_eq!(p.members.len(), 1);
        assert_eq!(p.members[0].request, 9);
        assert_eq!(p.phase(), Some(BatchPhase::Decode));
    }

    #[test]
    fn priority_orders_by_key() {
        let q = [prefill(1, 300, 10), prefill(2, 100, 10), prefill(3, 200, 10)];
        let p = build_batch(
            &q,
            &[],
            &policy(Admission::Priority { key: PriorityKey::ShortestPrompt }, 2, 1000),
            &KvPool::new(100, MemoryMode::Exact),
        );
        assert_eq!(p.admitted, vec![2, 3]);
    }
}
