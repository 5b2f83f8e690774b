//! End-to-end serving workflows: co-located, prefill/decode disaggregated,
//! and attention/FFN disaggregated.
//!
//! One [`EventKind::BatchComplete`] handler drives every replica. Memory is
//! reserved when a batch is planned, and freed memory is announced with
//! `MEMORY_AVAILABLE`, which is what re-arms blocked prefills and queued KV
//! transfers.

pub mod af;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{
    build_batch, derive_seed, BatchPlan, Candidate, ClusterError, ExecContext, KvPool, Running, SchedulerPolicy,
};
use crate::cost::{CostError, CostModel, OpPredictor, RoutingPolicy};
use crate::metrics::{compute_metrics, MetricsBundle, MetricsError};
use crate::sim::{Engine, EventKind, EventPayload, EventTrace, Handler, Scheduler, SimError, SimEvent, SimTime};
use crate::topology::{
    kv_bytes_per_token, transfer_time, ClusterSpec, Deployment, MoeSplit, ServingMode, StageRole, TopologyError,
};
use crate::workload::{Request, RequestId, RequestState, WorkloadError};

use af::AfStage;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Setup(String),
}

impl From<CostError> for OrchestratorError {
    fn from(e: CostError) -> Self {
        OrchestratorError::Cluster(ClusterError::Cost(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AfConfig {
    /// Micro-batches per decode step.
    #[serde(default = "default_micro_batches")]
    pub micro_batches: u32,
}

fn default_micro_batches() -> u32 {
    2
}

impl Default for AfConfig {
    fn default() -> Self {
        AfConfig { micro_batches: default_micro_batches() }
    }
}

/// Everything a run needs besides the requests.
#[derive(Clone)]
pub struct RunSetup {
    /// Must already be validated.
    pub deployment: Deployment,
    pub policy: SchedulerPolicy,
    pub routing: RoutingPolicy,
    pub af: AfConfig,
    /// Per-cluster predictors; clusters not listed use the analytic model
    /// of their own hardware.
    pub predictors: BTreeMap<u32, Arc<dyn OpPredictor + Send + Sync>>,
    pub seed: u64,
    pub event_budget: Option<u64>,
}

impl RunSetup {
    pub fn new(deployment: Deployment) -> Result<Self, OrchestratorError> {
        Ok(RunSetup {
            deployment: crate::topology::validate(&deployment)?,
            policy: SchedulerPolicy::default(),
            routing: RoutingPolicy::Uniform,
            af: AfConfig::default(),
            predictors: BTreeMap::new(),
            seed: 0,
            event_budget: None,
        })
    }

    pub fn predictor(&self, cluster: &ClusterSpec) -> Arc<dyn OpPredictor + Send + Sync> {
        self.predictors.get(&cluster.id).cloned().unwrap_or_else(|| {
            Arc::new(CostModel::analytic(cluster.hardware.profile(), self.deployment.model.dtype_bytes))
        })
    }

    fn exec(&self, cluster: &ClusterSpec, split: MoeSplit, tp: u32) -> Result<ExecContext, OrchestratorError> {
        Ok(ExecContext::new(
            self.deployment.model.clone(),
            self.predictor(cluster),
            split,
            tp,
            cluster.parallelism.pp,
            self.deployment.network.clone(),
            self.routing.clone(),
        )?)
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: EventTrace,
    pub requests: Vec<Request>,
    pub metrics: MetricsBundle,
}

struct Replica {
    cluster: u32,
    index: u32,
    role: StageRole,
    exec: ExecContext,
    af: Option<AfStage>,
    pool: KvPool,
    queue: VecDeque<usize>,
    running: Vec<usize>,
    inflight: Option<BatchPlan>,
    batches: u64,
    /// End of this replica's last AF decode step.
    last_af_end: Option<SimTime>,
    /// Prompt tokens of requests routed here and not yet handed off.
    outstanding: u64,
}

struct World<'s> {
    setup: &'s RunSetup,
    requests: Vec<Request>,
    slot: HashMap<RequestId, usize>,
    replicas: Vec<Replica>,
    by_id: HashMap<(u32, u32), usize>,
    front: Vec<usize>,
    decode: Vec<usize>,
    rr_next: usize,
    transfers: VecDeque<usize>,
    home: Vec<usize>,
    decode_home: Vec<Option<usize>>,
    kv_bytes_per_token: u64,
}

fn rep_payload(r: &Replica) -> EventPayload {
    EventPayload::default().cluster(r.cluster).replica(r.index)
}

impl<'s> World<'s> {
    fn new(setup: &'s RunSetup, requests: Vec<Request>) -> Result<Self, OrchestratorError> {
        let d = &setup.deployment;
        let mut replicas = Vec::new();
        let ffn = d.clusters_with_role(StageRole::Ffn).next();
        for c in &d.clusters {
            if c.role == StageRole::Ffn {
                continue;
            }
            let derived = c.derived();
            let (exec, af) = match (c.role, ffn) {
                (StageRole::Attention, Some(f)) => {
                    let fs = f.derived().split;
                    let split = MoeSplit { moe_tp: fs.moe_tp, moe_ep: fs.moe_ep, ..derived.split };
                    let stage = AfStage {
                        attention: setup.exec(c, derived.split, derived.split.attn_tp)?,
                        ffn: setup.exec(f, fs, f.parallelism.tp)?,
                        link: d.network.inter_cluster,
                        micro_batches: setup.af.micro_batches,
                    };
                    (setup.exec(c, split, derived.split.attn_tp)?, Some(stage))
                }
                _ => (setup.exec(c, derived.split, c.parallelism.tp)?, None),
            };
            for index in 0..c.num_replicas {
                replicas.push(Replica {
                    cluster: c.id,
                    index,
                    role: c.role,
                    exec: exec.clone(),
                    af: af.clone(),
                    pool: KvPool::new(derived.kv_capacity_tokens, setup.policy.memory),
                    queue: VecDeque::new(),
                    running: Vec::new(),
                    inflight: None,
                    batches: 0,
                    last_af_end: None,
                    outstanding: 0,
                });
            }
        }
        let by_id = replicas.iter().enumerate().map(|(i, r)| ((r.cluster, r.index), i)).collect();
        let front = (0..replicas.len()).filter(|&i| replicas[i].role != StageRole::Decode).collect();
        let decode = (0..replicas.len()).filter(|&i| replicas[i].role == StageRole::Decode).collect();
        let mut slot = HashMap::new();
        for (i, r) in requests.iter().enumerate() {
            if slot.insert(r.id, i).is_some() {
                return Err(OrchestratorError::Setup(format!("duplicate request id {}", r.id)));
            }
        }
        let n = requests.len();
        let w = World {
            setup,
            requests,
            slot,
            replicas,
            by_id,
            front,
            decode,
            rr_next: 0,
            transfers: VecDeque::new(),
            home: vec![usize::MAX; n],
            decode_home: vec![None; n],
            kv_bytes_per_token: kv_bytes_per_token(&d.model),
        };
        w.check_schedulable()?;
        Ok(w)
    }

    /// Rejects requests that no replica could ever admit, which would
    /// otherwise stall the run forever.
    fn check_schedulable(&self) -> Result<(), OrchestratorError> {
        let policy = &self.setup.policy;
        for r in &self.requests {
            let too_large = |detail: String| ClusterError::RequestTooLarge { request: r.id, detail };
            if r.prompt_tokens > policy.max_batch_tokens() {
                return Err(too_large(format!(
                    "prompt of {} tokens exceeds max_batch_tokens {}",
                    r.prompt_tokens,
                    policy.max_batch_tokens()
                ))
                .into());
            }
            for &f in &self.front {
                let need = self.front_kv_need(&self.replicas[f], r);
                if policy.memory.round(need) > self.replicas[f].pool.capacity_tokens() {
                    return Err(too_large(format!(
                        "needs {need} KV tokens, cluster {} holds {}",
                        self.replicas[f].cluster,
                        self.replicas[f].pool.capacity_tokens()
                    ))
                    .into());
                }
            }
            let total = r.prompt_tokens as u64 + r.output_tokens as u64;
            if !self.decode.is_empty()
                && !self.decode.iter().any(|&d| policy.memory.round(total) <= self.replicas[d].pool.capacity_tokens())
            {
                return Err(too_large(format!("needs {total} KV tokens, no decode pool is that large")).into());
            }
        }
        Ok(())
    }

    fn front_kv_need(&self, rep: &Replica, r: &Request) -> u64 {
        match rep.role {
            StageRole::Prefill => r.prompt_tokens as u64,
            _ => r.prompt_tokens as u64 + r.output_tokens as u64,
        }
    }

    fn rep(&self, ev: &SimEvent) -> Result<usize, OrchestratorError> {
        let key = (ev.payload.cluster.unwrap_or(u32::MAX), ev.payload.replica.unwrap_or(u32::MAX));
        self.by_id
            .get(&key)
            .copied()
            .ok_or_else(|| OrchestratorError::Setup(format!("event {} names unknown replica {key:?}", ev.kind)))
    }

    fn req_slot(&self, ev: &SimEvent) -> Result<usize, OrchestratorError> {
        ev.payload
            .request
            .and_then(|id| self.slot.get(&id).copied())
            .ok_or_else(|| OrchestratorError::Setup(format!("event {} names unknown request", ev.kind)))
    }

    fn choose_front(&mut self) -> usize {
        if self.setup.deployment.mode == ServingMode::Colocated {
            let r = self.front[self.rr_next % self.front.len()];
            self.rr_next += 1;
            return r;
        }
        // Least outstanding work; ties go to the lowest (cluster, replica).
        *self
            .front
            .iter()
            .min_by_key(|&&i| (self.replicas[i].outstanding, self.replicas[i].cluster, self.replicas[i].index))
            .expect("validated deployments have a front stage")
    }

    fn on_arrival(&mut self, ev: &SimEvent, sched: &mut Scheduler) -> Result<(), OrchestratorError> {
        let s = self.req_slot(ev)?;
        let r = self.choose_front();
        self.home[s] = r;
        self.replicas[r].outstanding += self.requests[s].prompt_tokens as u64;
        self.replicas[r].queue.push_back(s);
        self.try_start(r, sched)
    }

    fn candidate(&self, rep: &Replica, s: usize) -> Candidate {
        let r = &self.requests[s];
        let decode_side = rep.role == StageRole::Decode;
        Candidate {
            request: r.id,
            prompt_tokens: r.prompt_tokens,
            output_tokens: r.output_tokens,
            prefill: !decode_side,
            context_len: r.context_tokens(),
            kv_need: if decode_side { 0 } else { self.front_kv_need(rep, r) },
        }
    }

    fn try_start(&mut self, ri: usize, sched: &mut Scheduler) -> Result<(), OrchestratorError> {
        let rep = &self.replicas[ri];
        if rep.inflight.is_some() || (rep.queue.is_empty() && rep.running.is_empty()) {
            return Ok(());
        }
        let queue: Vec<Candidate> = rep.queue.iter().map(|&s| self.candidate(rep, s)).collect();
        let running: Vec<Running> = rep
            .running
            .iter()
            .map(|&s| Running { request: self.requests[s].id, context_len: self.requests[s].context_tokens() })
            .collect();
        let plan = build_batch(&queue, &running, &self.setup.policy, &rep.pool);
        if plan.is_empty() {
            return Ok(());
        }
        let now = sched.now();
        let rep = &mut self.replicas[ri];
        for m in plan.members.iter().filter(|m| m.kv_charge > 0) {
            rep.pool.reserve(m.request, m.kv_charge)?;
        }
        for &id in &plan.admitted {
            let s = self.slot[&id];
            let req = &mut self.requests[s];
            if req.state == RequestState::Queued {
                req.transition(RequestState::PrefillRunning, now)?;
            } else {
                req.transition(RequestState::Decoding, now)?;
                rep.running.push(s);
            }
        }
        let admitted: std::collections::HashSet<RequestId> = plan.admitted.iter().copied().collect();
        let requests = &self.requests;
        rep.queue.retain(|&s| !admitted.contains(&requests[s].id));

        let seed = derive_seed(&[self.setup.seed, rep.cluster as u64, rep.index as u64, rep.batches]);
        let mut done = rep_payload(rep)
            .step(rep.batches)
            .phase(plan.phase().expect("non-empty").as_str())
            .members(plan.members.len() as u32)
            .tokens(plan.tokens);
        let start = done.clone().kv(rep.pool.used_tokens(), rep.pool.capacity_tokens());
        let duration = match &rep.af {
            Some(stage) => {
                let pre = BatchPlan {
                    members: plan.prefill_members().copied().collect(),
                    admitted: vec![],
                    tokens: plan.prefill_members().map(|m| m.query_len as u64).sum(),
                };
                let mut d = rep.exec.execute_batch(&pre, seed)?.duration;
                let dec: Vec<_> = plan.decode_members().copied().collect();
                if !dec.is_empty() {
                    let carry = rep.last_af_end == Some(now) && pre.is_empty();
                    let step = stage.run_decode_step(&dec, carry, now + d, seed)?;
                    d += step.duration;
                    done = done.bubble(step.attention_idle_fraction());
                }
                d
            }
            None => {
                let out = rep.exec.execute_batch(&plan, seed)?;
                if !out.rank_imbalance.is_empty() {
                    done = done.imbalance(out.rank_imbalance);
                }
                out.duration
            }
        };
        sched.schedule(now, EventKind::BatchStart, start)?;
        sched.schedule(now + duration, EventKind::BatchComplete, done.duration_ns(duration.as_nanos()))?;
        rep.inflight = Some(plan);
        rep.batches += 1;
        Ok(())
    }

    fn complete(&mut self, s: usize, ri: usize, sched: &mut Scheduler) -> Result<(), OrchestratorError> {
        let now = sched.now();
        self.requests[s].transition(RequestState::Complete, now)?;
        let id = self.requests[s].id;
        let rep = &mut self.replicas[ri];
        let freed = rep.pool.release(id)?;
        if rep.role != StageRole::Decode {
            rep.outstanding -= self.requests[s].prompt_tokens as u64;
        }
        sched.schedule(now, EventKind::RequestComplete, rep_payload(rep).request(id))?;
        let mem = rep_payload(rep).tokens(freed).kv(rep.pool.used_tokens(), rep.pool.capacity_tokens());
        sched.schedule(now, EventKind::MemoryAvailable, mem)?;
        Ok(())
    }

    fn emit(&mut self, s: usize, ri: usize, sched: &mut Scheduler) -> Result<bool, OrchestratorError> {
        let req = &mut self.requests[s];
        let finished = req.emit_token();
        let p = rep_payload(&self.replicas[ri]).request(req.id).tokens(req.tokens_emitted as u64);
        sched.schedule(sched.now(), EventKind::TokenEmitted, p)?;
        Ok(finished)
    }

    fn on_batch_complete(&mut self, ev: &SimEvent, sched: &mut Scheduler) -> Result<(), OrchestratorError> {
        let ri = self.rep(ev)?;
        let now = sched.now();
        let plan = self.replicas[ri]
            .inflight
            .take()
            .ok_or_else(|| OrchestratorError::Setup("batch completed on an idle replica".into()))?;
        let role = self.replicas[ri].role;
        for m in &plan.members {
            let s = self.slot[&m.request];
            if m.prefill {
                self.requests[s].transition(RequestState::PrefillComplete, now)?;
                let finished = self.emit(s, ri, sched)?;
                let p = rep_payload(&self.replicas[ri]).request(m.request).tokens(m.query_len as u64);
                sched.schedule(now, EventKind::PrefillComplete, p)?;
                if role == StageRole::Prefill {
                    continue;
                }
                if finished {
                    self.complete(s, ri, sched)?;
                } else {
                    self.requests[s].transition(RequestState::DecodeQueued, now)?;
                    self.requests[s].transition(RequestState::Decoding, now)?;
                    self.replicas[ri].running.push(s);
                }
            } else if self.emit(s, ri, sched)? {
                self.replicas[ri].running.retain(|&x| x != s);
                self.complete(s, ri, sched)?;
            }
        }
        if plan.decode_members().next().is_some() && self.replicas[ri].af.is_some() {
            self.replicas[ri].last_af_end = Some(now);
        }
        self.try_start(ri, sched)
    }

    /// Starts KV transfers from the head of the FIFO while some decode
    /// replica can reserve the request's full KV footprint.
    fn try_transfers(&mut self, sched: &mut Scheduler) -> Result<(), OrchestratorError> {
        let now = sched.now();
        while let Some(&s) = self.transfers.front() {
            let r = &self.requests[s];
            let need = r.prompt_tokens as u64 + r.output_tokens as u64;
            let target = self.decode.iter().copied().filter(|&d| self.replicas[d].pool.fits(need)).min_by_key(|&d| {
                let rep = &self.replicas[d];
                (rep.queue.len() + rep.running.len(), rep.cluster, rep.index)
            });
            let Some(d) = target else { break };
            self.transfers.pop_front();
            let id = r.id;
            let bytes = self.kv_bytes_per_token * r.prompt_tokens as u64;
            let rep = &mut self.replicas[d];
            let charged = rep.pool.reserve(id, need)?;
            self.decode_home[s] = Some(d);
            self.requests[s].transition(RequestState::KvTransferring, now)?;
            let base = rep_payload(rep).request(id);
            sched.schedule(
                now,
                EventKind::KvReserved,
                base.clone().tokens(charged).kv(rep.pool.used_tokens(), rep.pool.capacity_tokens()),
            )?;
            sched.schedule(now, EventKind::KvCacheTransferStart, base.clone().bytes(bytes))?;
            let dt = crate::sim::SimDuration::from_secs_f64(transfer_time(
                bytes,
                &self.setup.deployment.network.inter_cluster,
            ));
            sched.schedule(now + dt, EventKind::KvCacheTransferDone, base.bytes(bytes).duration_ns(dt.as_nanos()))?;
        }
        Ok(())
    }

    fn on_transfer_done(&mut self, ev: &SimEvent, sched: &mut Scheduler) -> Result<(), OrchestratorError> {
        let s = self.req_slot(ev)?;
        let now = sched.now();
        let id = self.requests[s].id;
        let p = self.home[s];
        let prompt = self.requests[s].prompt_tokens as u64;
        let rep = &mut self.replicas[p];
        let freed = rep.pool.release(id)?;
        rep.outstanding -= prompt;
        let mem = rep_payload(rep).tokens(freed).kv(rep.pool.used_tokens(), rep.pool.capacity_tokens());
        sched.schedule(now, EventKind::MemoryAvailable, mem)?;
        let d = self.decode_home[s].expect("transfer target recorded");
        self.requests[s].transition(RequestState::DecodeQueued, now)?;
        if self.requests[s].is_finished() {
            return self.complete(s, d, sched);
        }
        self.replicas[d].queue.push_back(s);
        self.try_start(d, sched)
    }
}

impl Handler for World<'_> {
    type Error = OrchestratorError;

    fn handle(&mut self, ev: &SimEvent, sched: &mut Scheduler) -> Result<(), OrchestratorError> {
        let pd = self.setup.deployment.mode == ServingMode::Pd;
        match ev.kind {
            EventKind::RequestArrival => self.on_arrival(ev, sched),
            EventKind::BatchComplete => self.on_batch_complete(ev, sched),
            EventKind::PrefillComplete if pd => {
                let s = self.req_slot(ev)?;
                self.transfers.push_back(s);
                self.try_transfers(sched)
            }
            EventKind::MemoryAvailable => {
                let ri = self.rep(ev)?;
                if pd && self.replicas[ri].role == StageRole::Decode {
                    self.try_transfers(sched)?;
                }
                self.try_start(ri, sched)
            }
            EventKind::KvCacheTransferDone => self.on_transfer_done(ev, sched),
            EventKind::BatchStart
            | EventKind::PrefillComplete
            | EventKind::KvReserved
            | EventKind::KvCacheTransferStart
            | EventKind::TokenEmitted
            | EventKind::RequestComplete => Ok(()),
            other => Err(SimError::UnhandledEventKind(other).into()),
        }
    }
}

/// Runs `requests` through the deployment's serving mode to completion.
pub fn run(setup: &RunSetup, mut requests: Vec<Request>) -> Result<RunResult, OrchestratorError> {
    setup.policy.validate()?;
    if setup.af.micro_batches == 0 {
        return Err(OrchestratorError::Setup("af.micro_batches must be at least 1".into()));
    }
    requests.sort_by_key(|r| r.arrival);
    let mut world = World::new(setup, requests)?;
    let mut engine = Engine::new();
    if let Some(b) = setup.event_budget {
        engine = engine.with_event_budget(b);
    }
    for r in &world.requests {
        engine.schedule(
            r.arrival,
            EventKind::RequestArrival,
            EventPayload::default().request(r.id).tokens(r.prompt_tokens as u64),
        )?;
    }
    let trace = engine.run_to_completion(&mut world)?;
    let metrics = compute_metrics(&trace, &setup.deployment)?;
    Ok(RunResult { trace, requests: world.requests, metrics })
}

fn run_mode(setup: &RunSetup, requests: Vec<Request>, mode: ServingMode) -> Result<RunResult, OrchestratorError> {
    if setup.deployment.mode != mode {
        return Err(OrchestratorError::Setup(format!(
            "deployment mode is {:?}, expected {mode:?}",
            setup.deployment.mode
        )));
    }
    run(setup, requests)
}

pub fn run_colocated(setup: &RunSetup, requests: Vec<Request>) -> Result<RunResult, OrchestratorError> {
    run_mode(setup, requests, ServingMode::Colocated)
}

pub fn run_pd(setup: &RunSetup, requests: Vec<Request>) -> Result<RunResult, OrchestratorError> {
    run_mode(setup, requests, ServingMode::Pd)
}

pub fn run_af(setup: &RunSetup, requests: Vec<Request>) -> Result<RunResult, OrchestratorError> {
    run_mode(setup, requests, ServingMode::Af)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::ConstantPredictor;
    use crate::presets;

    fn stub(mut setup: RunSetup) -> RunSetup {
        for c in &setup.deployment.clusters {
            setup.predictors.insert(c.id, Arc::new(ConstantPredictor { us: 1.0 }));
        }
        setup
    }

    fn at_zero(n: u64, prompt: u32, output: u32) -> Vec<Request> {
        (0..n).map(|i| Request::new(i, SimTime::ZERO, prompt, output)).collect()
    }

    #[test]
    fn single_request_ttft_is_prefill_duration() {
        let setup = stub(RunSetup::new(presets::colocated(presets::dense_7b(), 1, 1)).unwrap());
        let res = run_colocated(&setup, at_zero(1, 64, 4)).unwrap();
        let first = res.trace.of_kind(EventKind::BatchComplete).next().unwrap();
        assert_eq!(first.payload.phase.as_deref(), Some("prefill"));
        let ttft = res.requests[0].transitions[&RequestState::PrefillComplete];
        assert_eq!(ttft.as_nanos(), first.payload.duration_ns.unwrap());
        assert!((res.metrics.ttft_s.mean - ttft.as_nanos() as f64 * 1e-9).abs() < 1e-15);
    }

    #[test]
    fn round_robin_balances_batches() {
        let setup = stub(RunSetup::new(presets::colocated(presets::dense_7b(), 2, 1)).unwrap());
        let reqs: Vec<Request> = (0..10).map(|i| Request::new(i, SimTime(i * 1_000_000), 32, 3)).collect();
        let res = run(&setup, reqs).unwrap();
        let count = |rep| res.trace.of_kind(EventKind::BatchStart).filter(|r| r.payload.replica == Some(rep)).count();
        assert!(count(0).abs_diff(count(1)) <= 1, "{} vs {}", count(0), count(1));
    }

    fn pd_setup(decode_capacity: Option<u64>) -> RunSetup {
        let mut d = presets::pd(presets::dense_7b(), 1, 1, 1);
        d.clusters[1].kv_capacity_tokens = decode_capacity;
        stub(RunSetup::new(d).unwrap())
    }

    #[test]
    fn pd_transfers_serialize_behind_memory_available() {
        // 64 + 32 tokens is exactly six 16-token blocks.
        let res = run_pd(&pd_setup(Some(96)), at_zero(3, 64, 32)).unwrap();
        let recs = res.trace.records();
        let starts: Vec<usize> = (0..recs.len()).filter(|&i| recs[i].kind == EventKind::KvCacheTransferStart).collect();
        assert_eq!(starts.len(), 3);
        for w in starts.windows(2) {
            let freed = recs[w[0]..w[1]].iter().any(|r| {
                r.kind == EventKind::MemoryAvailable && r.payload.cluster == Some(1) && r.time == recs[w[1]].time
            });
            assert!(freed, "transfer at {} not released by decode memory", recs[w[1]].time.as_nanos());
            let done = recs[w[0]..w[1]].iter().filter(|r| r.kind == EventKind::RequestComplete).count();
            assert_eq!(done, 1);
        }
        let n = |k| res.trace.of_kind(k).count();
        assert_eq!(n(EventKind::PrefillComplete), 3);
        assert_eq!(n(EventKind::KvCacheTransferDone), 3);
        assert_eq!(n(EventKind::RequestComplete), 3);
    }

    #[test]
    fn pd_without_backpressure_transfers_immediately() {
        let res = run_pd(&pd_setup(None), at_zero(5, 128, 8)).unwrap();
        let recs = res.trace.records();
        for (i, r) in recs.iter().enumerate().filter(|(_, r)| r.kind == EventKind::PrefillComplete) {
            let next = recs[i + 1..]
                .iter()
                .find(|x| x.kind == EventKind::KvCacheTransferStart && x.payload.request == r.payload.request)
                .unwrap();
            assert_eq!(next.time, r.time);
            assert!(next.seq > r.seq);
        }
        for r in &res.requests {
            assert_eq!(r.state, RequestState::Complete);
        }
    }

    #[test]
    fn oversized_request_is_rejected_upfront() {
        let err = run_pd(&pd_setup(Some(64)), at_zero(1, 64, 32)).unwrap_err();
        assert!(matches!(err, OrchestratorError::Cluster(ClusterError::RequestTooLarge { request: 0, .. })));
    }

    fn af_stage() -> AfStage {
        let d = crate::topology::validate(&presets::af(presets::moe_16b(), 2, 1, 1, 2)).unwrap();
        let setup = stub(RunSetup::new(d).unwrap());
        let world = World::new(&setup, vec![]).unwrap();
        world.replicas[0].af.clone().unwrap()
    }

    #[test]
    fn af_token_series_contracts_with_membership() {
        let stage = af_stage();
        assert_eq!(af::generate_token_af(&stage, &[(10, 1), (10, 1)], 0).unwrap().len(), 1);
        let series = af::generate_token_af(&stage, &[(10, 1), (10, 3), (20, 3), (5, 2)], 0).unwrap();
        assert_eq!(series.len(), 3);
        assert!(series.windows(2).all(|w| w[1] <= w[0]), "{series:?}");
    }

    #[test]
    fn af_run_completes_and_reports_bubbles() {
        let d = presets::af(presets::moe_16b(), 2, 1, 1, 2);
        let res = run_af(&stub(RunSetup::new(d).unwrap()), at_zero(6, 32, 5)).unwrap();
        assert_eq!(res.metrics.num_requests, 6);
        let bubble = res.metrics.pipeline_bubble.unwrap();
        assert!((0.0..=1.0).contains(&bubble));
    }

    #[test]
    fn wrong_mode_is_rejected() {
        let setup = RunSetup::new(presets::colocated(presets::dense_7b(), 1, 1)).unwrap();
        assert!(matches!(run_pd(&setup, at_zero(1, 8, 1)), Err(OrchestratorError::Setup(_))));
    }
}
