//! Co-located serving under Poisson load with three admission policies.

use stagesim::cluster::{Admission, PriorityKey, SchedulerPolicy};
use stagesim::orchestrator::{run_colocated, RunSetup};
use stagesim::presets;
use stagesim::workload::{generate, ArrivalProcess, LengthDist, WorkloadSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut deployment = presets::colocated(presets::dense_7b(), 2, 1);
    // A tight pool makes admission order matter.
    deployment.clusters[0].kv_capacity_tokens = Some(24_000);
    let spec = WorkloadSpec {
        arrival: ArrivalProcess::Poisson { rate_rps: 9.0 },
        prompt_len: LengthDist::Lognormal { mu: 6.5, sigma: 1.0, lo: 16, hi: 8000 },
        output_len: LengthDist::Uniform { lo: 16, hi: 512 },
        num_requests: 2000,
        seed: 3,
    };
    let requests = generate(&spec)?;
    for admission in [Admission::Fcfs, Admission::FcfsSkip, Admission::Priority { key: PriorityKey::ShortestPrompt }] {
        let mut setup = RunSetup::new(deployment.clone())?;
        setup.policy = SchedulerPolicy { admission, ..SchedulerPolicy::default() };
        let m = run_colocated(&setup, requests.clone())?.metrics;
        println!(
            "{admission:?}: ttft p50 {:.3}s p99 {:.3}s, tpot p90 {:.2} ms, {:.1} tok/s/GPU, busy {:.2}",
            m.ttft_s.p50,
            m.ttft_s.p99,
            m.tpot_s.p90 * 1e3,
            m.throughput_tokens_per_s_per_gpu,
            m.resources[0].busy_fraction
        );
    }
    Ok(())
}
