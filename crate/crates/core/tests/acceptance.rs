//! Runs every acceptance criterion and prints one PASS/FAIL line each.
//! Exits non-zero when any criterion fails.

#[path = "common/mod.rs"]
mod common;

use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stagesim::cli::main_with_args;
use stagesim::config::{load_config, METRICS_FILE, THROUGHPUT_FILE, TRACE_FILE};
use stagesim::cost::synthetic::{
    attention_dataset, attention_suite, grouped_gemm_dataset, grouped_gemm_suite, skewed_prefill_suite,
    sqrt_proxy_dataset, SUITE_LENGTH_SIGMA,
};
use stagesim::cost::{
    eval_model, fit_model, moe_layer_latency, route_tokens, CostModel, CountMode, GroupedGemmFeatures, Hyperparams,
    MoeLayout, OpPredictor, RoutingPolicy,
};
use stagesim::orchestrator::af::{build_af_graph, simulate_af_graph, AfNodeKind};
use stagesim::orchestrator::{run, RunSetup};
use stagesim::presets;
use stagesim::sim::{Engine, EventKind, EventPayload, EventTrace, Handlers, SimDuration, SimError, SimTime};
use stagesim::topology::{validate, MoeSplit, TopologyError, EP_EQUATION};
use stagesim::workload::{generate, ArrivalProcess, LengthDist, Request, WorkloadSpec};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn within(limit: Duration, started: Instant) -> Result<Duration, String> {
    let took = started.elapsed();
    if took <= limit {
        Ok(took)
    } else {
        Err(format!("took {took:?}, limit {limit:?}"))
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_event_run(seed: u64) -> Result<(EventTrace, Vec<(u64, u64)>), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut engine = Engine::new();
    let mut expected = Vec::with_capacity(10_000);
    for _ in 0..10_000 {
        // A narrow range forces many timestamp ties.
        let t = rng.random_range(0..2_000u64);
        let id =
            engine.schedule(SimTime(t), EventKind::TokenEmitted, EventPayload::default()).map_err(|e| e.to_string())?;
        expected.push((t, id));
    }
    let mut h: Handlers<SimError> = Handlers::new().ignore(&[EventKind::TokenEmitted]);
    let trace = engine.run_to_completion(&mut h).map_err(|e| e.to_string())?;
    Ok((trace, expected))
}

fn c1_event_engine() -> Outcome {
    let start = Instant::now();
    let (trace, mut oracle) = random_event_run(42)?;
    oracle.sort_by_key(|&(t, _)| t);
    let popped: Vec<(u64, u64)> = trace.iter().map(|r| (r.time.0, r.seq)).collect();
    ensure(popped == oracle, || "pop order differs from the stable-sort oracle".into())?;
    let (again, _) = random_event_run(42)?;
    ensure(trace.hash_hex() == again.hash_hex(), || "same seed gave different trace hashes".into())?;
    let took = within(Duration::from_secs(1), start)?;
    Ok(format!("10000 events match the oracle, hashes equal, {took:.2?}"))
}

fn c2_af_critical_path() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    for m in 1..=4u32 {
        for layers in 1..=4u32 {
            for trial in 0..50 {
                let table: Vec<u64> = (0..4 * m * layers).map(|_| rng.random_range(1..1_000_000)).collect();
                let dur =
                    |kind: AfNodeKind, i: u32, k: u32| table[((kind as u32 * layers + k - 1) * m + i - 1) as usize];
                let carry = (trial % 2 == 1).then(|| rng.random_range(1..1_000_000u64));
                let g = build_af_graph(m, layers, carry.map(SimDuration), |kind, i, k| SimDuration(dur(kind, i, k)));
                let sim = simulate_af_graph(&g, SimTime(trial * 7)).map_err(|e| e.to_string())?;
                let expect = common::oracle_step_ns(m, layers, carry, &dur);
                ensure(sim.duration.0 == expect, || {
                    format!("m={m} L={layers} trial {trial}: simulated {} ns, oracle {expect} ns", sim.duration.0)
                })?;
                checked += 1;
            }
        }
    }
    let took = within(Duration::from_secs(10), start)?;
    Ok(format!("{checked} graphs equal the longest-path oracle, {took:.2?}"))
}

fn c3_overlap_witness() -> Outcome {
    let t = SimDuration(1_000);
    let overlap = |m| -> Result<bool, String> {
        let g = build_af_graph(m, 4, None, |_, _, _| t);
        let r = simulate_af_graph(&g, SimTime::ZERO).map_err(|e| e.to_string())?;
        Ok(common::link_and_attention_overlap(&common::af_busy_from_trace(&r.trace)))
    };
    ensure(overlap(2)?, || "m=2: no interval with both A->F link and attention busy".into())?;
    ensure(!overlap(1)?, || "m=1: link and attention overlapped".into())?;
    // The same holds for a costed stage on the real model.
    let d = validate(&presets::af(presets::moe_16b(), 2, 1, 1, 2)).map_err(|e| e.to_string())?;
    let mut setup = RunSetup::new(d).map_err(|e| e.to_string())?;
    setup.af.micro_batches = 2;
    let reqs: Vec<Request> = (0..32).map(|i| Request::new(i, SimTime::ZERO, 256, 4)).collect();
    let res = run(&setup, reqs).map_err(|e| e.to_string())?;
    let bubble = res.metrics.pipeline_bubble.ok_or("AF run reported no bubble fraction")?;
    Ok(format!("overlap with m=2, none with m=1; full AF run bubble {bubble:.3}"))
}

fn c4_pd_backpressure() -> Outcome {
    let mut d = presets::pd(presets::dense_7b(), 1, 1, 1);
    let (prompt, output) = (512u32, 128u32);
    let capacity = (prompt + output) as u64;
    d.clusters[1].kv_capacity_tokens = Some(capacity);
    let setup = RunSetup::new(d).map_err(|e| e.to_string())?;
    let reqs: Vec<Request> = (0..10).map(|i| Request::new(i, SimTime::ZERO, prompt, output)).collect();
    let res = run(&setup, reqs).map_err(|e| e.to_string())?;
    common::check_pd_trace(&res.trace, 1, capacity)?;
    let reserved = res.trace.of_kind(EventKind::KvReserved).count();
    let starts = res.trace.of_kind(EventKind::KvCacheTransferStart).count();
    ensure(reserved == 10 && starts == 10, || format!("{reserved} reservations, {starts} transfers"))?;
    Ok(format!("10 transfers each behind a reservation, decode pool <= {capacity} tokens throughout"))
}

fn c5_moe_straggler() -> Outcome {
    let model = presets::moe_16b();
    let network = presets::default_network();
    let analytic = CostModel::analytic(presets::a800().profile(), 2);
    let (gg, _) = fit_model(
        &grouped_gemm_dataset(&grouped_gemm_suite(300, 9)),
        &Hyperparams { n_trees: 10, ..Default::default() },
    )
    .map_err(|e| e.to_string())?;
    let learned = CostModel::analytic(presets::a800().profile(), 2)
        .with_grouped_gemm_model(Arc::new(gg))
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let moe = model.moe.clone().ok_or("preset has no MoE")?;
    for trial in 0..100u64 {
        let ep = [1u32, 2, 4, 8, 16][rng.random_range(0..5)];
        let moe_tp = [1u32, 2][rng.random_range(0..2)];
        let split = MoeSplit { attn_tp: moe_tp * ep, attn_dp: 1, moe_tp, moe_ep: ep };
        let layout = MoeLayout::new(&model, &split, &network).map_err(|e| e.to_string())?;
        let policy = if trial % 2 == 0 {
            RoutingPolicy::Uniform
        } else {
            RoutingPolicy::DirichletSkew { alpha: rng.random_range(0.05..3.0) }
        };
        let tokens = rng.random_range(1..4096);
        let assign = route_tokens(tokens, moe.num_experts, moe.top_k, &policy, trial).map_err(|e| e.to_string())?;
        let predictor: &dyn OpPredictor = if trial % 3 == 0 { &learned } else { &analytic };
        let (total, b) = moe_layer_latency(&assign, &layout, predictor).map_err(|e| e.to_string())?;
        let mut expect = 0.0f64;
        for counts in assign.rank_counts(ep).map_err(|e| e.to_string())? {
            let routed: u64 = counts.iter().sum();
            if routed == 0 {
                continue;
            }
            let f = GroupedGemmFeatures::new(
                counts,
                routed,
                moe.top_k,
                CountMode::LocalShard,
                model.d_model,
                moe.expert_d_ff / moe_tp as u64,
                if model.gated_ffn { 3 } else { 2 },
            )
            .map_err(|e| e.to_string())?;
            expect = expect.max(predictor.grouped_gemm(&f).map_err(|e| e.to_string())?);
        }
        ensure(b.expert_us == expect, || {
            format!("trial {trial}: expert term {} != max per-rank {expect}", b.expert_us)
        })?;
        let max_rank = b.per_rank_us.iter().copied().fold(0.0, f64::max);
        ensure(b.expert_us == max_rank, || format!("trial {trial}: breakdown max mismatch"))?;
        ensure(total == b.total_us(), || format!("trial {trial}: total {total} != breakdown sum"))?;
    }
    Ok("100 assignments: expert term equals the max of independent per-rank predictions".into())
}

fn c6_topology_gate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let degrees = [1u32, 2, 4, 8];
    let (mut accepted, mut rejected) = (0, 0);
    for i in 0..100 {
        let pick = |rng: &mut ChaCha8Rng| degrees[rng.random_range(0..4)];
        let (dp, tp, mtp) = (pick(&mut rng), pick(&mut rng), pick(&mut rng));
        // Half the matrix is built to satisfy the equation when possible.
        let mep = if i % 2 == 0 && (dp * tp) % mtp == 0 { dp * tp / mtp } else { pick(&mut rng) };
        let expect = dp * tp == mtp * mep;
        let got = validate(&presets::af(presets::moe_16b(), dp, tp, mtp, mep));
        match (&got, expect) {
            (Ok(_), true) => accepted += 1,
            (Err(TopologyError::TopologyConstraintViolated { equation, .. }), false) if equation == EP_EQUATION => {
                rejected += 1
            }
            _ => return Err(format!("dp={dp} tp={tp} moe_tp={mtp} moe_ep={mep}: expected {expect}, got {got:?}")),
        }
    }
    Ok(format!("100 configurations: {accepted} accepted, {rejected} rejected, all as arithmetic dictates"))
}

fn c7_cost_model_accuracy() -> Outcome {
    let start = Instant::now();
    let hp = Hyperparams::default();
    let attn = attention_dataset(&attention_suite(5000, SUITE_LENGTH_SIGMA, 7));
    let (train, test) = attn.split_holdout(0.2, 7);
    let (forest, _) = fit_model(&train, &hp).map_err(|e| e.to_string())?;
    let a = eval_model(&forest, &test).map_err(|e| e.to_string())?.cdf(0.10);
    let gg = grouped_gemm_dataset(&grouped_gemm_suite(5000, 8));
    let (train, test) = gg.split_holdout(0.2, 8);
    let (forest, _) = fit_model(&train, &hp).map_err(|e| e.to_string())?;
    let g = eval_model(&forest, &test).map_err(|e| e.to_string())?.cdf(0.06);
    let took = within(Duration::from_secs(60), start)?;
    let msg = format!("attention held-out cdf(0.10) = {a:.3}, grouped GEMM cdf(0.06) = {g:.3}, {took:.1?}");
    ensure(a >= 0.90 && g >= 0.90, || msg.clone())?;
    Ok(msg)
}

fn c8_sqrt_proxy() -> Outcome {
    let suite = skewed_prefill_suite(4000, 8);
    let hp = Hyperparams::default();
    let score = |ds: stagesim::cost::Dataset| -> Result<f64, String> {
        let (train, test) = ds.split_holdout(0.2, 8);
        let (f, _) = fit_model(&train, &hp).map_err(|e| e.to_string())?;
        Ok(eval_model(&f, &test).map_err(|e| e.to_string())?.cdf(0.10))
    };
    let rich = score(attention_dataset(&suite))?;
    let proxy = score(sqrt_proxy_dataset(&suite))?;
    let msg = format!("cdf(0.10): rich features {rich:.3}, sqrt proxy {proxy:.3}");
    ensure(proxy < rich, || msg.clone())?;
    Ok(msg)
}

fn c9_littles_law() -> Outcome {
    let start = Instant::now();
    let setup = RunSetup::new(presets::colocated(presets::dense_7b(), 1, 1)).map_err(|e| e.to_string())?;
    let (prompt_len, output_len) = (LengthDist::Uniform { lo: 64, hi: 512 }, LengthDist::Uniform { lo: 16, hi: 112 });
    // Service time of a mean-sized request running alone sets the scale.
    let alone = run(&setup, vec![Request::new(0, SimTime::ZERO, 288, 64)]).map_err(|e| e.to_string())?;
    let service_s = alone.metrics.e2e_s.mean;
    let rate = 0.3 / service_s;
    let spec = WorkloadSpec {
        arrival: ArrivalProcess::Poisson { rate_rps: rate },
        prompt_len,
        output_len,
        num_requests: 6000,
        seed: 9,
    };
    let reqs = generate(&spec).map_err(|e| e.to_string())?;
    let res = run(&setup, reqs).map_err(|e| e.to_string())?;
    let l = res.metrics.mean_in_system;
    let lw = rate * res.metrics.e2e_s.mean;
    let err = (l - lw).abs() / lw;
    let took = within(Duration::from_secs(30), start)?;
    let msg = format!(
        "6000 requests at {rate:.2} req/s: mean in system {l:.4}, rate x latency {lw:.4}, error {:.2}%, {took:.1?}",
        err * 100.0
    );
    ensure(err <= 0.05, || msg.clone())?;
    Ok(msg)
}

fn cli(args: &[&str]) -> i32 {
    main_with_args(["stagesim", "--quiet"].into_iter().chain(args.iter().copied()))
}

fn configs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn c10_throughput_identity() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut report = Vec::new();
    for name in ["pd", "colocated", "af", "moe"] {
        let path = configs().join(format!("{name}.json"));
        let out = tmp.path().join(name);
        let code = cli(&["run", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        ensure(code == 0, || format!("{name}: run exited {code}"))?;
        let trace_text = std::fs::read_to_string(out.join(TRACE_FILE)).map_err(|e| e.to_string())?;
        let trace = EventTrace::parse_export(&trace_text).map_err(|e| e.to_string())?;
        let metrics: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join(METRICS_FILE)).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        let tokens = trace.of_kind(EventKind::TokenEmitted).count() as f64;
        let first = trace.of_kind(EventKind::RequestArrival).map(|r| r.time.0).min().ok_or("no arrivals")?;
        let last = trace.of_kind(EventKind::RequestComplete).map(|r| r.time.0).max().ok_or("no completions")?;
        let makespan_s = (last - first) as f64 / 1e9;
        let gpus = load_config(&path).map_err(|e| e.to_string())?.deployment.total_gpus() as f64;
        let expect = tokens / makespan_s / gpus;
        let got = metrics["throughput_tokens_per_s_per_gpu"].as_f64().ok_or("throughput missing")?;
        ensure(got == expect, || format!("{name}: metrics {got} != trace identity {expect}"))?;
        report.push(format!("{name} {got:.2}"));
    }
    let table = std::fs::read_to_string(tmp.path().join("pd").join(THROUGHPUT_FILE)).map_err(|e| e.to_string())?;
    let mut lines = table.lines();
    ensure(lines.next() == Some("batch_size,avg_input,output,throughput"), || format!("table header: {table}"))?;
    let row = lines.next().ok_or("empty throughput table")?;
    Ok(format!("identity exact on {} (tok/s/GPU); 1:1 PD table row {row}", report.join(", ")))
}

fn c11_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for name in ["pd", "af", "moe"] {
        let path = configs().join(format!("{name}.json"));
        let mut bytes = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("{name}{rep}"));
            let code = cli(&["run", path.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()]);
            ensure(code == 0, || format!("{name}: run exited {code}"))?;
            bytes.push(std::fs::read(out.join(METRICS_FILE)).map_err(|e| e.to_string())?);
        }
        ensure(bytes[0] == bytes[1], || format!("{name}: metrics JSON differs between runs"))?;
        outputs.push(format!("{name} ({} bytes)", bytes[0].len()));
    }
    Ok(format!("identical metrics JSON for {}", outputs.join(", ")))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("event-engine oracle equivalence", c1_event_engine),
        ("AF critical-path exactness", c2_af_critical_path),
        ("ping-pong overlap witness", c3_overlap_witness),
        ("PD backpressure safety", c4_pd_backpressure),
        ("MoE straggler exactness", c5_moe_straggler),
        ("topology gate", c6_topology_gate),
        ("synthetic cost-model accuracy", c7_cost_model_accuracy),
        ("sqrt-proxy critique", c8_sqrt_proxy),
        ("Little's law sanity", c9_littles_law),
        ("throughput identity", c10_throughput_identity),
        ("end-to-end determinism", c11_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
