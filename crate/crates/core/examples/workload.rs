//! Generating a workload, writing it as a trace CSV, and reading it back.

use stagesim::workload::{generate, parse_trace, write_trace, ArrivalProcess, LengthDist, WorkloadSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = WorkloadSpec {
        arrival: ArrivalProcess::Poisson { rate_rps: 100.0 },
        prompt_len: LengthDist::Lognormal { mu: 5.5, sigma: 1.0, lo: 8, hi: 8192 },
        output_len: LengthDist::Uniform { lo: 32, hi: 512 },
        num_requests: 10_000,
        seed: 1,
    };
    let reqs = generate(&spec)?;
    let span = reqs.last().unwrap().arrival.0 as f64 / 1e9;
    let mean_prompt = reqs.iter().map(|r| r.prompt_tokens as f64).sum::<f64>() / reqs.len() as f64;
    println!("{} requests over {span:.2}s, mean gap {:.3} ms", reqs.len(), span / (reqs.len() - 1) as f64 * 1e3);
    println!("mean prompt {mean_prompt:.1} tokens (lognormal median {:.1})", 5.5f64.exp());

    let mut csv = Vec::new();
    write_trace(&reqs[..5], &mut csv)?;
    print!("{}", String::from_utf8(csv.clone())?);
    let back = parse_trace(csv.as_slice())?;
    assert_eq!(back, reqs[..5]);
    println!("round-tripped {} rows", back.len());
    Ok(())
}
