//! Run metrics computed from event traces alone, plus report helpers.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::ErrorCdf;
use crate::sim::{EventKind, EventTrace, SimTime};
use crate::topology::Deployment;

/// Thresholds reported by default for cost-model error CDFs.
pub const DEFAULT_CDF_THRESHOLDS: [f64; 2] = [0.06, 0.10];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("incomplete trace: {count} request(s) never completed (first: {first})")]
    IncompleteTrace { count: usize, first: u64 },
    #[error("trace contains no requests")]
    EmptyTrace,
    #[error("empty evaluation")]
    EmptyDataset,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub id: u64,
    pub arrival_s: f64,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    pub ttft_s: f64,
    /// `None` for single-token requests.
    pub tpot_s: Option<f64>,
    pub e2e_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Summary {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: nearest_rank(&v, 0.50),
            p90: nearest_rank(&v, 0.90),
            p99: nearest_rank(&v, 0.99),
        }
    }
}

/// Nearest-rank percentile of sorted `v`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceBusy {
    pub cluster: u32,
    pub replica: u32,
    pub batches: u64,
    /// Time spent executing batches over the makespan.
    pub busy_fraction: f64,
}

/// One row in the shape of a throughput table: batch, average input,
/// output, throughput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    /// Largest decode batch observed.
    pub batch_size: u32,
    pub avg_input: f64,
    pub output: f64,
    pub throughput: f64,
}

pub const THROUGHPUT_TABLE_HEADER: [&str; 4] = ["batch_size", "avg_input", "output", "throughput"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub num_requests: usize,
    pub total_tokens: u64,
    pub total_gpus: u64,
    pub makespan_s: f64,
    pub throughput_tokens_per_s_per_gpu: f64,
    pub ttft_s: Summary,
    pub tpot_s: Summary,
    pub e2e_s: Summary,
    /// Time-averaged number of requests in the system over the makespan.
    pub mean_in_system: f64,
    pub resources: Vec<ResourceBusy>,
    /// Mean attention-executor idle fraction over AF decode steps.
    pub pipeline_bubble: Option<f64>,
    /// Busiest EP rank's load over the mean, per MoE layer invocation.
    pub expert_imbalance: Vec<f64>,
    pub table: ThroughputRow,
    pub requests: Vec<RequestMetrics>,
}

fn secs(ns: u64) -> f64 {
    ns as f64 / 1e9
}

#[derive(Default)]
struct ReqTrack {
    arrival: Option<SimTime>,
    prompt: u64,
    tokens: u64,
    first_token: Option<SimTime>,
    done: Option<SimTime>,
}

/// Derives every metric from `trace`. Pure: the same trace always yields
/// the same bundle.
pub fn compute_metrics(trace: &EventTrace, deployment: &Deployment) -> Result<MetricsBundle, MetricsError> {
    let mut reqs: BTreeMap<u64, ReqTrack> = BTreeMap::new();
    let mut busy: BTreeMap<(u32, u32), (u64, u64)> = BTreeMap::new();
    let mut bubbles = Vec::new();
    let mut imbalance = Vec::new();
    let mut max_decode_batch = 0u32;
    for r in trace.iter() {
        let p = &r.payload;
        match r.kind {
            EventKind::RequestArrival => {
                let t = reqs.entry(p.request.unwrap_or_default()).or_default();
                t.arrival = Some(r.time);
                t.prompt = p.tokens.unwrap_or(0);
            }
            EventKind::TokenEmitted => {
                let t = reqs.entry(p.request.unwrap_or_default()).or_default();
                t.tokens += 1;
                t.first_token.get_or_insert(r.time);
            }
            EventKind::RequestComplete => {
                reqs.entry(p.request.unwrap_or_default()).or_default().done = Some(r.time);
            }
            EventKind::BatchComplete => {
                let e = busy.entry((p.cluster.unwrap_or(0), p.replica.unwrap_or(0))).or_default();
                e.0 += 1;
                e.1 += p.duration_ns.unwrap_or(0);
                if let Some(b) = p.bubble {
                    bubbles.push(b);
                }
                if let Some(series) = &p.imbalance {
                    imbalance.extend_from_slice(series);
                }
                if p.phase.as_deref() == Some("decode") {
                    max_decode_batch = max_decode_batch.max(p.members.unwrap_or(0));
                }
            }
            _ => {}
        }
    }
    if reqs.is_empty() {
        return Err(MetricsError::EmptyTrace);
    }
    let missing: Vec<u64> =
        reqs.iter().filter(|(_, t)| t.done.is_none() || t.arrival.is_none()).map(|(&id, _)| id).collect();
    if let Some(&first) = missing.first() {
        return Err(MetricsError::IncompleteTrace { count: missing.len(), first });
    }

    let mut per = Vec::with_capacity(reqs.len());
    let mut points: Vec<(SimTime, i64)> = Vec::with_capacity(2 * reqs.len());
    for (&id, t) in &reqs {
        let arrival = t.arrival.expect("checked");
        let done = t.done.expect("checked");
        let first = t.first_token.unwrap_or(done);
        let ttft = secs(first.saturating_since(arrival).as_nanos());
        let e2e = secs(done.saturating_since(arrival).as_nanos());
        points.push((arrival, 1));
        points.push((done, -1));
        per.push(RequestMetrics {
            id,
            arrival_s: secs(arrival.as_nanos()),
            prompt_tokens: t.prompt,
            output_tokens: t.tokens,
            ttft_s: ttft,
            tpot_s: (t.tokens > 1).then(|| (e2e - ttft) / (t.tokens - 1) as f64),
            e2e_s: e2e,
        });
    }
    let start = reqs.values().filter_map(|t| t.arrival).min().expect("non-empty");
    let end = reqs.values().filter_map(|t| t.done).max().expect("non-empty");
    let makespan_ns = end.saturating_since(start).as_nanos();
    let makespan_s = secs(makespan_ns);
    let total_tokens: u64 = reqs.values().map(|t| t.tokens).sum();
    let total_gpus = deployment.total_gpus();
    let throughput = throughput_per_gpu(total_tokens, makespan_s, total_gpus);

    // Integrate N(t) over the makespan; departures sort before arrivals at
    // equal timestamps, which does not change the integral.
    points.sort();
    let (mut area, mut n, mut last) = (0u128, 0i64, start);
    for (t, delta) in points {
        area += n as u128 * t.saturating_since(last).as_nanos() as u128;
        n += delta;
        last = t;
    }
    let mean_in_system = if makespan_ns > 0 { area as f64 / makespan_ns as f64 } else { 0.0 };

    let ttfts: Vec<f64> = per.iter().map(|r| r.ttft_s).collect();
    let tpots: Vec<f64> = per.iter().filter_map(|r| r.tpot_s).collect();
    let e2es: Vec<f64> = per.iter().map(|r| r.e2e_s).collect();
    let n_req = per.len() as f64;
    Ok(MetricsBundle {
        num_requests: per.len(),
        total_tokens,
        total_gpus,
        makespan_s,
        throughput_tokens_per_s_per_gpu: throughput,
        ttft_s: Summary::of(&ttfts),
        tpot_s: Summary::of(&tpots),
        e2e_s: Summary::of(&e2es),
        mean_in_system,
        resources: busy
            .into_iter()
            .map(|((cluster, replica), (batches, ns))| ResourceBusy {
                cluster,
                replica,
                batches,
                busy_fraction: if makespan_ns > 0 { ns as f64 / makespan_ns as f64 } else { 0.0 },
            })
            .collect(),
        pipeline_bubble: (!bubbles.is_empty()).then(|| bubbles.iter().sum::<f64>() / bubbles.len() as f64),
        expert_imbalance: imbalance,
        table: ThroughputRow {
            batch_size: max_decode_batch,
            avg_input: per.iter().map(|r| r.prompt_tokens as f64).sum::<f64>() / n_req,
            output: per.iter().map(|r| r.output_tokens as f64).sum::<f64>() / n_req,
            throughput,
        },
        requests: per,
    })
}

/// Tokens per second per GPU; 0 for an empty makespan.
pub fn throughput_per_gpu(tokens: u64, makespan_s: f64, gpus: u64) -> f64 {
    if makespan_s > 0.0 && gpus > 0 {
        tokens as f64 / makespan_s / gpus as f64
    } else {
        0.0
    }
}

impl MetricsBundle {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    /// `config_hash,throughput,ttft_p50,...,makespan_s` header and one row.
    pub fn write_summary_csv<W: io::Write>(&self, config_hash: &str, w: W) -> Result<(), MetricsError> {
        let mut cw = csv::Writer::from_writer(w);
        cw.write_record(SUMMARY_HEADER)?;
        cw.write_record(self.summary_record(config_hash))?;
        cw.flush()?;
        Ok(())
    }

    pub fn summary_record(&self, config_hash: &str) -> Vec<String> {
        let f = |v: f64| v.to_string();
        vec![
            config_hash.to_string(),
            f(self.throughput_tokens_per_s_per_gpu),
            f(self.ttft_s.p50),
            f(self.ttft_s.p90),
            f(self.ttft_s.p99),
            f(self.tpot_s.p50),
            f(self.tpot_s.p90),
            f(self.tpot_s.p99),
            f(self.makespan_s),
        ]
    }

    pub fn write_throughput_table<W: io::Write>(&self, w: W) -> Result<(), MetricsError> {
        let mut cw = csv::Writer::from_writer(w);
        cw.write_record(THROUGHPUT_TABLE_HEADER)?;
        let t = &self.table;
        cw.write_record([
            t.batch_size.to_string(),
            t.avg_input.to_string(),
            t.output.to_string(),
            t.throughput.to_string(),
        ])?;
        cw.flush()?;
        Ok(())
    }
}

pub const SUMMARY_HEADER: [&str; 9] =
    ["config_hash", "throughput", "ttft_p50", "ttft_p90", "ttft_p99", "tpot_p50", "tpot_p90", "tpot_p99", "makespan_s"];

/// `(threshold, fraction within threshold)` rows, thresholds ascending.
pub fn error_cdf_report(cdf: &ErrorCdf, thresholds: &[f64]) -> Result<Vec<(f64, f64)>, MetricsError> {
    if cdf.is_empty() {
        return Err(MetricsError::EmptyDataset);
    }
    let mut t = thresholds.to_vec();
    t.sort_by(f64::total_cmp);
    Ok(t.into_iter().map(|x| (x, cdf.cdf(x))).collect())
}

/// Indices of points not dominated in (higher throughput, lower p90 TPOT).
/// A point is dominated when another is at least as good on both axes and
/// strictly better on one.
pub fn pareto_frontier(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[b].0.total_cmp(&points[a].0).then(points[a].1.total_cmp(&points[b].1)));
    let mut frontier = Vec::new();
    // Lowest latency among strictly higher-throughput points seen so far.
    let mut best_lat = f64::INFINITY;
    for group in order.chunk_by(|&a, &b| points[a].0 == points[b].0) {
        let lat = points[group[0]].1;
        if lat < best_lat {
            frontier.extend(group.iter().copied().filter(|&i| points[i].1 == lat));
        }
        best_lat = best_lat.min(lat);
    }
    frontier.sort_unstable();
    frontier
}
