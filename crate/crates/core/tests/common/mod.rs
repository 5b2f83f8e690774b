#![allow(dead_code)]

use std::collections::{HashMap, HashSet};

use stagesim::orchestrator::af::AfNodeKind;
use stagesim::sim::{EventKind, EventTrace};

/// Longest path through the AF step graph with per-resource sequencing,
/// derived straight from the dependency rules rather than from a built
/// graph. Resource index: 0 attention, 1 A->F link, 2 FFN, 3 F->A link.
/// Nodes on one resource run in (layer, micro-batch) order; the optional
/// carry-in F->A node for micro-batch `m` at layer 0 runs first.
pub fn oracle_step_ns(m: u32, layers: u32, carry: Option<u64>, dur: &dyn Fn(AfNodeKind, u32, u32) -> u64) -> u64 {
    const KINDS: [AfNodeKind; 4] = [AfNodeKind::Attn, AfNodeKind::AToF, AfNodeKind::Ffn, AfNodeKind::FToA];
    let exists = |r: usize, k: u32| !(r == 3 && k == layers);
    let mut finish: HashMap<(usize, u32, u32), u64> = HashMap::new();
    if let Some(c) = carry {
        finish.insert((3, m, 0), c);
    }
    // (layer, resource, micro-batch) order visits every predecessor first.
    for k in 1..=layers {
        #[allow(clippy::needless_range_loop)]
        for r in 0..4 {
            if !exists(r, k) {
                continue;
            }
            for i in 1..=m {
                let data = if r > 0 {
                    finish.get(&(r - 1, i, k)).copied()
                } else if k > 1 {
                    finish.get(&(3, i, k - 1)).copied()
                } else {
                    finish.get(&(3, i, 0)).copied()
                };
                let resource = if i > 1 {
                    finish.get(&(r, i - 1, k)).copied()
                } else {
                    (0..k).rev().find(|&kk| kk == 0 || exists(r, kk)).and_then(|kk| finish.get(&(r, m, kk)).copied())
                };
                let start = data.unwrap_or(0).max(resource.unwrap_or(0));
                finish.insert((r, i, k), start + dur(KINDS[r], i, k));
            }
        }
    }
    finish.values().copied().max().unwrap_or(0)
}

/// `(resource, start_ns, end_ns)` busy intervals recovered from the
/// `*_DONE` records of an AF step trace.
pub fn af_busy_from_trace(trace: &EventTrace) -> Vec<(AfNodeKind, u64, u64)> {
    trace
        .iter()
        .filter_map(|r| {
            let kind = AfNodeKind::from_event_kind(r.kind)?;
            let d = r.payload.duration_ns?;
            Some((kind, r.time.0 - d, r.time.0))
        })
        .collect()
}

pub fn link_and_attention_overlap(busy: &[(AfNodeKind, u64, u64)]) -> bool {
    busy.iter()
        .filter(|b| b.0 == AfNodeKind::AToF)
        .any(|l| busy.iter().filter(|b| b.0 == AfNodeKind::Attn).any(|a| a.1.max(l.1) < a.2.min(l.2)))
}

/// Checks the PD invariants on a finished trace using nothing but the
/// trace: every transfer start follows a reservation for the same request,
/// the replayed decode pool never exceeds `capacity`, and prefill
/// completions, transfer completions and request completions balance.
pub fn check_pd_trace(trace: &EventTrace, decode_cluster: u32, capacity: u64) -> Result<(), String> {
    let mut reserved = HashSet::new();
    let mut used: u64 = 0;
    for r in trace.iter() {
        let p = &r.payload;
        let on_decode = p.cluster == Some(decode_cluster);
        match r.kind {
            EventKind::KvReserved => {
                reserved.insert(p.request.ok_or("reservation without request")?);
                used += p.tokens.ok_or("reservation without tokens")?;
            }
            EventKind::KvCacheTransferStart => {
                let id = p.request.ok_or("transfer without request")?;
                if !reserved.contains(&id) {
                    return Err(format!("transfer for request {id} at {} before any reservation", r.time.0));
                }
            }
            EventKind::MemoryAvailable if on_decode => {
                used = used.checked_sub(p.tokens.unwrap_or(0)).ok_or("decode pool freed more than it held")?;
            }
            _ => {}
        }
        if used > capacity {
            return Err(format!("decode pool holds {used} > {capacity} tokens at {}", r.time.0));
        }
        if let (true, Some((u, c))) = (on_decode, p.kv_used.zip(p.kv_capacity)) {
            if u > c {
                return Err(format!("reported decode usage {u} > {c} at {}", r.time.0));
            }
        }
    }
    let n = |k| trace.of_kind(k).count();
    let (a, b, c) = (n(EventKind::PrefillComplete), n(EventKind::KvCacheTransferDone), n(EventKind::RequestComplete));
    if a != b || b != c {
        return Err(format!("conservation broken: {a} prefill, {b} transfers, {c} completions"));
    }
    Ok(())
}
