use std::fs;
use std::path::{Path, PathBuf};

use stagesim::cli::main_with_args;
use stagesim::config::{METRICS_FILE, SUMMARY_FILE, THROUGHPUT_FILE, TRACE_FILE};
use stagesim::cost::synthetic::{attention_dataset, attention_suite, grouped_gemm_dataset, grouped_gemm_suite};
use stagesim::sim::EventTrace;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cli(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("stagesim").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_is_byte_deterministic_and_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("pd.json");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(cli(&["run", s(&cfg), "--seed", "7", "--out", s(&a)]), 0);
    assert_eq!(cli(&["run", s(&cfg), "--seed", "7", "--out", s(&b)]), 0);
    for f in [TRACE_FILE, METRICS_FILE, SUMMARY_FILE, THROUGHPUT_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let trace = EventTrace::parse_export(&fs::read_to_string(a.join(TRACE_FILE)).unwrap()).unwrap();
    assert!(!trace.is_empty());
    let table = fs::read_to_string(a.join(THROUGHPUT_FILE)).unwrap();
    assert!(table.starts_with("batch_size,avg_input,output,throughput\n"));
}

#[test]
fn different_seeds_change_generated_workloads() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = configs().join("colocated.json");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(cli(&["run", s(&cfg), "--seed", "1", "--out", s(&a)]), 0);
    assert_eq!(cli(&["run", s(&cfg), "--seed", "2", "--out", s(&b)]), 0);
    assert_ne!(fs::read(a.join(METRICS_FILE)).unwrap(), fs::read(b.join(METRICS_FILE)).unwrap());
}

#[test]
fn exit_codes_separate_validation_from_runtime() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["run", "/definitely/missing.json"]), 1);
    let bad = tmp.path().join("bad.json");
    let mut doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(configs().join("af.json")).unwrap()).unwrap();
    doc["deployment"]["clusters"][1]["parallelism"]["moe_ep"] = 8.into();
    fs::write(&bad, doc.to_string()).unwrap();
    assert_eq!(cli(&["validate-config", s(&bad)]), 1);
    // A request larger than every KV pool only fails once the run starts.
    let big = tmp.path().join("big.json");
    let mut doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(configs().join("colocated.json")).unwrap()).unwrap();
    doc["deployment"]["clusters"][0]["kv_capacity_tokens"] = 64.into();
    fs::write(&big, doc.to_string()).unwrap();
    assert_eq!(cli(&["run", s(&big), "--out", s(&tmp.path().join("o"))]), 2);
    assert_eq!(cli(&["validate-config", s(&configs().join("moe.json"))]), 0);
}

#[test]
fn one_point_sweep_equals_run() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = tmp.path().join("grid.json");
    fs::write(&grid, r#"{"af.micro_batches": [2]}"#).unwrap();
    let cfg = configs().join("af.json");
    let (run_dir, sweep_dir) = (tmp.path().join("run"), tmp.path().join("sweep"));
    assert_eq!(cli(&["run", s(&cfg), "--out", s(&run_dir)]), 0);
    assert_eq!(cli(&["sweep", s(&cfg), "--grid", s(&grid), "--out", s(&sweep_dir)]), 0);
    let summary = fs::read_to_string(run_dir.join(SUMMARY_FILE)).unwrap();
    let run_row = summary.lines().nth(1).unwrap();
    let sweep = fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(sweep.as_bytes());
    let row = rdr.records().next().unwrap().unwrap();
    let sweep_row: Vec<&str> = row.iter().skip(4).take(9).collect();
    assert_eq!(sweep_row.join(","), run_row);
}

#[test]
fn sweep_rows_and_frontier() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = tmp.path().join("grid.json");
    fs::write(
        &grid,
        r#"{"policy.batching.max_num_seqs": [1, 8, 64], "deployment.clusters.0.num_replicas": [1, 2, 3]}"#,
    )
    .unwrap();
    let mut doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(configs().join("colocated.json")).unwrap()).unwrap();
    doc["workload"]["generate"]["num_requests"] = 40.into();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, doc.to_string()).unwrap();
    let (one, four) = (tmp.path().join("j1"), tmp.path().join("j4"));
    assert_eq!(cli(&["sweep", s(&cfg), "--grid", s(&grid), "--out", s(&one)]), 0);
    assert_eq!(cli(&["sweep", s(&cfg), "--grid", s(&grid), "--jobs", "4", "--out", s(&four)]), 0);
    let text = fs::read_to_string(one.join("sweep.csv")).unwrap();
    assert_eq!(text, fs::read_to_string(four.join("sweep.csv")).unwrap());
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 9);
    let point = |r: &csv::StringRecord| -> (f64, f64) { (r[5].parse().unwrap(), r[10].parse().unwrap()) };
    for r in &rows {
        let dominated = rows.iter().any(|o| {
            let (a, b) = (point(o), point(r));
            a.0 >= b.0 && a.1 <= b.1 && (a.0 > b.0 || a.1 < b.1)
        });
        assert_eq!(&r[13] == "true", !dominated);
    }
}

#[test]
fn fit_then_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("attn.csv");
    attention_dataset(&attention_suite(600, 1.0, 1)).write_csv(fs::File::create(&csv).unwrap()).unwrap();
    let (m1, m2) = (tmp.path().join("m1.json"), tmp.path().join("m2.json"));
    let fit = |out: &Path| cli(&["fit", s(&csv), "--op", "attention", "--out", s(out), "--trees", "20", "--seed", "3"]);
    assert_eq!(fit(&m1), 0);
    assert_eq!(fit(&m2), 0);
    assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    assert_eq!(cli(&["eval-cost-model", s(&m1), s(&csv)]), 0);

    let gg = tmp.path().join("gg.csv");
    grouped_gemm_dataset(&grouped_gemm_suite(100, 2)).write_csv(fs::File::create(&gg).unwrap()).unwrap();
    assert_eq!(cli(&["fit", s(&gg), "--op", "attention", "--out", s(&tmp.path().join("x"))]), 1);
    assert_eq!(cli(&["eval-cost-model", s(&m1), s(&gg)]), 1);
}

#[test]
fn learned_cost_model_drives_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("attn.csv");
    attention_dataset(&attention_suite(400, 1.0, 5)).write_csv(fs::File::create(&csv).unwrap()).unwrap();
    let model = tmp.path().join("attn.model");
    assert_eq!(cli(&["fit", s(&csv), "--op", "attention", "--out", s(&model), "--trees", "10"]), 0);
    let mut doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(configs().join("colocated.json")).unwrap()).unwrap();
    doc["cost_model"] = serde_json::json!({"kind": "learned", "attention": "attn.model"});
    doc["workload"]["generate"]["num_requests"] = 20.into();
    let cfg = tmp.path().join("learned.json");
    fs::write(&cfg, doc.to_string()).unwrap();
    assert_eq!(cli(&["run", s(&cfg), "--out", s(&tmp.path().join("out"))]), 0);
}
