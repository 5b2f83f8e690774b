//! A small configuration sweep in code: PD prefill:decode ratios crossed
//! with decode batch caps, reduced to its throughput/latency frontier.

use rayon::prelude::*;
use stagesim::cluster::{Batching, SchedulerPolicy};
use stagesim::metrics::pareto_frontier;
use stagesim::orchestrator::{run_pd, RunSetup};
use stagesim::presets;
use stagesim::workload::{generate, ArrivalProcess, LengthDist, WorkloadSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let requests = generate(&WorkloadSpec {
        arrival: ArrivalProcess::Poisson { rate_rps: 20.0 },
        prompt_len: LengthDist::Uniform { lo: 256, hi: 2048 },
        output_len: LengthDist::Uniform { lo: 64, hi: 256 },
        num_requests: 400,
        seed: 5,
    })?;
    let mut grid = Vec::new();
    for (p, d) in [(1, 1), (1, 2), (2, 1), (1, 3)] {
        for seqs in [8, 32, 128] {
            grid.push((p, d, seqs));
        }
    }
    let results: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&(p, d, seqs)| {
            let mut setup = RunSetup::new(presets::pd(presets::dense_7b(), p, d, 1)).unwrap();
            setup.policy = SchedulerPolicy {
                batching: Batching::Continuous { max_num_seqs: seqs, max_batch_tokens: 8192 },
                ..SchedulerPolicy::default()
            };
            let m = run_pd(&setup, requests.clone()).unwrap().metrics;
            (m.throughput_tokens_per_s_per_gpu, m.tpot_s.p90)
        })
        .collect();
    let frontier = pareto_frontier(&results);
    println!("{:>4} {:>7} {:>9} {:>14} {:>13}", "P:D", "max_seq", "frontier", "tok/s/GPU", "tpot p90 ms");
    for (i, (&(p, d, seqs), &(tput, tpot))) in grid.iter().zip(&results).enumerate() {
        let mark = if frontier.contains(&i) { "*" } else { "" };
        println!("{:>4} {seqs:>7} {mark:>9} {tput:>14.1} {:>13.2}", format!("{p}:{d}"), tpot * 1e3);
    }
    Ok(())
}
