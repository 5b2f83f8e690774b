//! Prefill/decode disaggregation with a decode pool that fits one request:
//! KV transfers queue until decode memory is released.

use stagesim::orchestrator::{run_pd, RunSetup};
use stagesim::presets;
use stagesim::sim::{EventKind, SimTime};
use stagesim::workload::Request;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut deployment = presets::pd(presets::dense_7b(), 1, 1, 1);
    deployment.clusters[1].kv_capacity_tokens = Some(512 + 64);
    let setup = RunSetup::new(deployment)?;
    let requests = (0..4).map(|i| Request::new(i, SimTime::ZERO, 512, 64)).collect();
    let res = run_pd(&setup, requests)?;

    for r in res.trace.iter() {
        let p = &r.payload;
        let line = match r.kind {
            EventKind::PrefillComplete => format!("prefill done      req {}", p.request.unwrap()),
            EventKind::KvReserved => {
                format!(
                    "decode reserve    req {} (pool {}/{})",
                    p.request.unwrap(),
                    p.kv_used.unwrap(),
                    p.kv_capacity.unwrap()
                )
            }
            EventKind::KvCacheTransferStart => {
                format!("transfer start    req {} ({} bytes)", p.request.unwrap(), p.bytes.unwrap())
            }
            EventKind::MemoryAvailable if p.cluster == Some(1) => {
                format!(
                    "decode memory     freed {} (pool {}/{})",
                    p.tokens.unwrap(),
                    p.kv_used.unwrap(),
                    p.kv_capacity.unwrap()
                )
            }
            EventKind::RequestComplete => format!("complete          req {}", p.request.unwrap()),
            _ => continue,
        };
        println!("{:>10.3} ms  {line}", r.time.0 as f64 / 1e6);
    }
    let m = &res.metrics;
    println!("ttft p50 {:.2} ms, p99 {:.2} ms", m.ttft_s.p50 * 1e3, m.ttft_s.p99 * 1e3);
    Ok(())
}
