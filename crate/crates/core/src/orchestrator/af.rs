//! Attention/FFN disaggregated decode as a micro-batch dependency graph.
//!
//! Every micro-batch walks `ATTN -> A_TO_F -> FFN -> F_TO_A` through each
//! layer, except that the last layer ends at `FFN`. The four resources
//! (attention executor, A->F link, FFN executor, F->A link) each serve
//! their nodes in a fixed claim order, layer first and micro-batch second,
//! so micro-batch `i+1` can use the attention executor while micro-batch
//! `i` is on the wire.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cluster::{derive_seed, BatchMember, ExecContext};
use crate::sim::{
    Engine, EventKind, EventPayload, EventTrace, Handler, Scheduler, SimDuration, SimError, SimEvent, SimTime,
};
use crate::topology::{transfer_time, Link};

use super::OrchestratorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AfNodeKind {
    Attn,
    AToF,
    Ffn,
    FToA,
}

impl AfNodeKind {
    pub const ALL: [AfNodeKind; 4] = [AfNodeKind::Attn, AfNodeKind::AToF, AfNodeKind::Ffn, AfNodeKind::FToA];

    /// Index of the resource this kind occupies; also its stage order
    /// within a layer.
    pub fn resource(self) -> usize {
        self as usize
    }

    pub fn event_kind(self) -> EventKind {
        match self {
            AfNodeKind::Attn => EventKind::AttnComputeDone,
            AfNodeKind::AToF => EventKind::AToFTransferDone,
            AfNodeKind::Ffn => EventKind::FfnComputeDone,
            AfNodeKind::FToA => EventKind::FToATransferDone,
        }
    }

    pub fn from_event_kind(kind: EventKind) -> Option<Self> {
        AfNodeKind::ALL.into_iter().find(|k| k.event_kind() == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AfNode {
    pub kind: AfNodeKind,
    /// 1-based.
    pub micro_batch: u32,
    /// 1-based; 0 marks the carried-in return transfer of the previous step.
    pub layer: u32,
    pub duration: SimDuration,
    /// Data dependencies (indices into `AfGraph::nodes`).
    pub deps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AfGraph {
    pub micro_batches: u32,
    pub layers: u32,
    /// Topologically ordered by (layer, stage, micro-batch).
    pub nodes: Vec<AfNode>,
    /// Per resource, the order in which nodes claim it.
    pub claim_order: [Vec<usize>; 4],
}

impl AfGraph {
    /// `m * (4L - 1)` nodes, plus one if a return transfer is carried in.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn dependency_edge_count(&self) -> usize {
        self.nodes.iter().map(|n| n.deps.len()).sum()
    }

    pub fn find(&self, kind: AfNodeKind, micro_batch: u32, layer: u32) -> Option<usize> {
        self.nodes.iter().position(|n| n.kind == kind && n.micro_batch == micro_batch && n.layer == layer)
    }
}

/// Builds the step graph for `m` micro-batches over `layers` layers.
/// `carry_in` adds the previous step's `F_TO_A(m, L)` as a layer-0 node
/// that `ATTN(m, 1)` must wait for.
pub fn build_af_graph(
    m: u32,
    layers: u32,
    carry_in: Option<SimDuration>,
    mut duration: impl FnMut(AfNodeKind, u32, u32) -> SimDuration,
) -> AfGraph {
    assert!(m >= 1 && layers >= 1, "m and L must be positive");
    let mut nodes = Vec::new();
    let add = |nodes: &mut Vec<AfNode>, kind, i, k, d, deps| {
        nodes.push(AfNode { kind, micro_batch: i, layer: k, duration: d, deps });
        nodes.len() - 1
    };
    let carry = carry_in.map(|d| add(&mut nodes, AfNodeKind::FToA, m, 0, d, vec![]));
    // Last node of each micro-batch's chain so far.
    let mut tail: Vec<Option<usize>> = vec![None; m as usize];
    tail[m as usize - 1] = carry;
    for k in 1..=layers {
        for kind in AfNodeKind::ALL {
            if kind == AfNodeKind::FToA && k == layers {
                continue;
            }
            for i in 1..=m {
                let deps = tail[i as usize - 1].into_iter().collect();
                let d = duration(kind, i, k);
                tail[i as usize - 1] = Some(add(&mut nodes, kind, i, k, d, deps));
            }
        }
    }
    let mut claim_order: [Vec<usize>; 4] = Default::default();
    for (idx, n) in nodes.iter().enumerate() {
        claim_order[n.kind.resource()].push(idx);
    }
    AfGraph { micro_batches: m, layers, nodes, claim_order }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BusyInterval {
    pub resource: AfNodeKind,
    pub micro_batch: u32,
    pub layer: u32,
    pub start: SimTime,
    pub end: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AfStepResult {
    /// Last completion minus step start; the last node is `FFN(m, L)`.
    pub duration: SimDuration,
    pub trace: EventTrace,
    pub intervals: Vec<BusyInterval>,
}

impl AfStepResult {
    pub fn busy(&self, resource: AfNodeKind) -> SimDuration {
        self.intervals.iter().filter(|b| b.resource == resource).map(|b| b.end.saturating_since(b.start)).sum()
    }

    /// Fraction of the step during which the attention executor is idle.
    pub fn attention_idle_fraction(&self) -> f64 {
        if self.duration.0 == 0 {
            return 0.0;
        }
        1.0 - self.busy(AfNodeKind::Attn).as_nanos() as f64 / self.duration.as_nanos() as f64
    }

    /// Whether some A->F transfer overlaps attention compute in time.
    pub fn has_overlap(&self) -> bool {
        let of = |r| self.intervals.iter().filter(move |b: &&BusyInterval| b.resource == r);
        of(AfNodeKind::AToF).any(|t| of(AfNodeKind::Attn).any(|a| a.start.max(t.start) < a.end.min(t.end)))
    }
}

struct GraphRunner<'g> {
    graph: &'g AfGraph,
    index: HashMap<(AfNodeKind, u32, u32), usize>,
    pending: Vec<usize>,
    successors: Vec<Vec<usize>>,
    start: SimTime,
    intervals: Vec<BusyInterval>,
}

impl GraphRunner<'_> {
    fn launch(&self, idx: usize, sched: &mut Scheduler) -> Result<(), SimError> {
        let n = &self.graph.nodes[idx];
        let payload = EventPayload::default().node(n.micro_batch, n.layer).duration_ns(n.duration.as_nanos());
        sched.schedule(sched.now() + n.duration, n.kind.event_kind(), payload)?;
        Ok(())
    }
}

impl Handler for GraphRunner<'_> {
    type Error = SimError;

    fn handle(&mut self, ev: &SimEvent, sched: &mut Scheduler) -> Result<(), SimError> {
        let kind = AfNodeKind::from_event_kind(ev.kind).ok_or(SimError::UnhandledEventKind(ev.kind))?;
        let (i, k) = (ev.payload.micro_batch.unwrap_or(0), ev.payload.layer.unwrap_or(0));
        let idx = self.index[&(kind, i, k)];
        let n = &self.graph.nodes[idx];
        self.intervals.push(BusyInterval {
            resource: kind,
            micro_batch: i,
            layer: k,
            start: SimTime(ev.timestamp.0 - n.duration.0),
            end: ev.timestamp,
        });
        for s in self.successors[idx].clone() {
            self.pending[s] -= 1;
            if self.pending[s] == 0 {
                self.launch(s, sched)?;
            }
        }
        Ok(())
    }
}

/// Executes `graph` on the event engine starting at `start`. A node starts
/// when its data dependencies and its resource predecessor have finished.
pub fn simulate_af_graph(graph: &AfGraph, start: SimTime) -> Result<AfStepResult, SimError> {
    let n = graph.nodes.len();
    let mut successors = vec![Vec::new(); n];
    let mut pending = vec![0usize; n];
    for (idx, node) in graph.nodes.iter().enumerate() {
        for &d in &node.deps {
            successors[d].push(idx);
            pending[idx] += 1;
        }
    }
    for chain in &graph.claim_order {
        for w in chain.windows(2) {
            successors[w[0]].push(w[1]);
            pending[w[1]] += 1;
        }
    }
    let index = graph.nodes.iter().enumerate().map(|(i, n)| ((n.kind, n.micro_batch, n.layer), i)).collect();
    let mut runner = GraphRunner { graph, index, pending, successors, start, intervals: Vec::new() };
    let mut engine = Engine::new();
    engine.run_until(start, &mut runner)?;
    for idx in 0..n {
        if runner.pending[idx] == 0 {
            runner.launch(idx, engine.scheduler())?;
        }
    }
    let trace = engine.run_to_completion(&mut runner)?;
    let end = runner.intervals.iter().map(|b| b.end).max().unwrap_or(start);
    debug_assert_eq!(runner.intervals.len(), n, "every node runs exactly once");
    Ok(AfStepResult { duration: end.saturating_since(runner.start), trace, intervals: runner.intervals })
}

/// Splits `members` into `min(m, len)` contiguous micro-batches whose
/// sizes differ by at most one (earlier ones take the remainder).
pub fn partition<T: Clone>(members: &[T], m: u32) -> Vec<Vec<T>> {
    let parts = (m as usize).min(members.len()).max(1);
    let (base, extra) = (members.len() / parts, members.len() % parts);
    let mut out = Vec::with_capacity(parts);
    let mut at = 0;
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        out.push(members[at..at + size].to_vec());
        at += size;
    }
    out
}

/// Costing context for one attention replica paired with the FFN cluster.
#[derive(Clone)]
pub struct AfStage {
    pub attention: ExecContext,
    pub ffn: ExecContext,
    pub link: Link,
    pub micro_batches: u32,
}

impl AfStage {
    fn transfer(&self, tokens: u64) -> SimDuration {
        let bytes = tokens * self.attention.model.d_model * self.attention.model.dtype_bytes as u64;
        SimDuration::from_secs_f64(transfer_time(bytes, &self.link))
    }

    /// Builds one decode step's graph for `members` (each decodes one token).
    pub fn step_graph(&self, members: &[BatchMember], carry_in: bool, seed: u64) -> Result<AfGraph, OrchestratorError> {
        let parts = partition(members, self.micro_batches);
        let m = parts.len() as u32;
        let layers = self.attention.model.num_layers;
        let mut attn = Vec::with_capacity(parts.len());
        for p in &parts {
            attn.push(SimDuration::from_micros(self.attention.attention_layer_us(p)?));
        }
        let mut ffn = HashMap::new();
        for (i, p) in parts.iter().enumerate() {
            for k in 1..=layers {
                let s = derive_seed(&[seed, i as u64 + 1, k as u64]);
                ffn.insert((i as u32 + 1, k), SimDuration::from_micros(self.ffn.ffn_layer_us(p.len() as u64, s)?.0));
            }
        }
        let wire: Vec<SimDuration> = parts.iter().map(|p| self.transfer(p.len() as u64)).collect();
        let carry = carry_in.then(|| wire[m as usize - 1]);
        Ok(build_af_graph(m, layers, carry, |kind, i, k| match kind {
            AfNodeKind::Attn => attn[i as usize - 1],
            AfNodeKind::AToF | AfNodeKind::FToA => wire[i as usize - 1],
            AfNodeKind::Ffn => ffn[&(i, k)],
        }))
    }

    pub fn run_decode_step(
        &self,
        members: &[BatchMember],
        carry_in: bool,
        start: SimTime,
        seed: u64,
    ) -> Result<AfStepResult, OrchestratorError> {
        let g = self.step_graph(members, carry_in, seed)?;
        Ok(simulate_af_graph(&g, start)?)
    }
}

/// Decodes `batch` (`(context_len, tokens_to_generate)` per member) to
/// completion, one AF step per token position; finished members leave the
/// batch. Members enter with their previous token on the FFN side, so
/// every step, including the first, waits on an F->A return. Returns each
/// step's latency.
pub fn generate_token_af(
    stage: &AfStage,
    batch: &[(u32, u32)],
    seed: u64,
) -> Result<Vec<SimDuration>, OrchestratorError> {
    let mut live: Vec<(u64, u32, u32)> = batch.iter().enumerate().map(|(i, &(c, t))| (i as u64, c, t)).collect();
    live.retain(|m| m.2 > 0);
    let mut series = Vec::new();
    let mut now = SimTime::ZERO;
    while !live.is_empty() {
        let members: Vec<BatchMember> = live
            .iter()
            .map(|&(id, c, _)| BatchMember { request: id, query_len: 1, context_len: c, prefill: false, kv_charge: 0 })
            .collect();
        let step = stage.run_decode_step(&members, true, now, derive_seed(&[seed, series.len() as u64]))?;
        now += step.duration;
        series.push(step.duration);
        for m in &mut live {
            m.1 += 1;
            m.2 -= 1;
        }
        live.retain(|m| m.2 > 0);
    }
    Ok(series)
}
