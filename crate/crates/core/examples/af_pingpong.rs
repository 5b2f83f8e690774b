//! Attention/FFN disaggregation: the micro-batch graph on its own, then a
//! full decode run at several micro-batch counts.

use stagesim::orchestrator::af::{build_af_graph, simulate_af_graph, AfNodeKind};
use stagesim::orchestrator::{run_af, RunSetup};
use stagesim::presets;
use stagesim::sim::{SimDuration, SimTime};
use stagesim::workload::Request;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Balanced stages: micro-batch 2's attention runs while micro-batch 1
    // is on the wire.
    let g = build_af_graph(2, 2, None, |_, _, _| SimDuration(100));
    let step = simulate_af_graph(&g, SimTime::ZERO)?;
    println!("m=2 L=2: {} nodes, step {} ns, overlap {}", g.node_count(), step.duration.0, step.has_overlap());
    for kind in AfNodeKind::ALL {
        let mut spans: Vec<_> = step.intervals.iter().filter(|b| b.resource == kind).collect();
        spans.sort_by_key(|b| b.start);
        let s: Vec<String> = spans.iter().map(|b| format!("({},{})@{}", b.micro_batch, b.layer, b.start.0)).collect();
        println!("  {kind:?}: {}", s.join(" "));
    }

    // A memory-heavy batch: long contexts make attention comparable to the
    // expert GEMMs.
    let requests: Vec<Request> = (0..128).map(|i| Request::new(i, SimTime::ZERO, 4096, 16)).collect();
    for m in 1..=4 {
        let mut setup = RunSetup::new(presets::af(presets::moe_16b(), 4, 1, 1, 4))?;
        setup.af.micro_batches = m;
        let res = run_af(&setup, requests.clone())?;
        println!(
            "m={m}: tpot p50 {:.3} ms, attention idle {:.3}, {:.1} tok/s/GPU",
            res.metrics.tpot_s.p50 * 1e3,
            res.metrics.pipeline_bubble.unwrap_or(0.0),
            res.metrics.throughput_tokens_per_s_per_gpu
        );
    }
    Ok(())
}
