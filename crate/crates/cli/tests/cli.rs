use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Duration;

use opgrain_core::records::load_records;
use opgrain_gateway::stub::{StatusCode, StubServer};
use serde_json::{json, Value};
use tempfile::TempDir;

fn opgrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opgrain"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = opgrain(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    opgrain(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sim_config(n: usize, target: f64, rounding: Value, seed: u64) -> Value {
    json!({
        "n": n,
        "subpops": [{
            "weight": 1.0,
            "latent_auroc_target": target,
            "calibration_map": "identity",
            "rounding": rounding,
        }],
        "samples_per_record": 20,
        "sample_jitter_sd": 0.05,
        "seed": seed,
    })
}

/// Keeps every score below 1, where upward noise has no room.
fn shifted_down(mut config: Value) -> Value {
    config["subpops"][0]["calibration_map"] = json!({"shifted": -0.1});
    config
}

fn grid_005() -> Value {
    json!({"p_grid_005": 1.0, "p_grid_01": 0.0, "p_two_decimals": 0.0})
}

fn two_decimals() -> Value {
    json!({"p_grid_005": 0.0, "p_grid_01": 0.0, "p_two_decimals": 1.0})
}

fn write_json(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn simulated(dir: &Path, name: &str, config: Value) -> PathBuf {
    let cfg = write_json(dir, &format!("{name}.config.json"), &config);
    let out = dir.join(format!("{name}.jsonl"));
    ok(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    out
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn analyze(input: &Path) -> Value {
    let out = ok(&["analyze", s(input)]);
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn simulate_writes_one_line_per_record_deterministically() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "c.json", &sim_config(300, 0.8, grid_005(), 7));
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    ok(&["simulate", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&b)]);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 301);
    assert!(text.lines().next().unwrap().starts_with("{\"_meta\""));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(a.with_extension("latent.json").exists());
    assert_eq!(load_records(&a).unwrap().records.len(), 300);
}

#[test]
fn simulate_seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "c.json", &sim_config(50, 0.8, grid_005(), 1));
    let (x, y) = (dir.path().join("x.jsonl"), dir.path().join("y.jsonl"));
    ok(&["simulate", "--config", s(&cfg), "--seed", "9", "--out", s(&x)]);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&y)]);
    assert_ne!(fs::read(&x).unwrap(), fs::read(&y).unwrap());
    let meta = load_records(&x).unwrap().meta.unwrap();
    assert_eq!(meta.seed, Some(9));
    assert_eq!(meta.inputs.len(), 1);
}

#[test]
fn bad_weights_exit_with_config_code() {
    let dir = TempDir::new().unwrap();
    let mut cfg = sim_config(10, 0.8, grid_005(), 1);
    cfg["subpops"][0]["weight"] = json!(0.7);
    let p = write_json(dir.path(), "bad.json", &cfg);
    let out = opgrain(&["simulate", "--config", s(&p), "--out", s(&dir.path().join("o.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("weight"));
}

#[test]
fn analyze_reports_metric_suite_and_plots() {
    let dir = TempDir::new().unwrap();
    let input = simulated(dir.path(), "sim", sim_config(400, 0.8, grid_005(), 3));
    let plots = dir.path().join("plots");
    let report_path = dir.path().join("report.json");
    ok(&["analyze", s(&input), "--plots-dir", s(&plots), "--out", s(&report_path)]);
    let report = read_json(&report_path);
    let m = &report["methods"][0];
    assert_eq!(m["method"], "score_pos");
    assert!(m["cardinality"].as_u64().unwrap() <= 21);
    assert_eq!(m["n_records"], 400);
    for key in ["g_precision", "g_recall", "g_fpr"] {
        assert!(m["granularity"][key].as_f64().unwrap() > 0.0);
    }
    assert!(m["prauc"]["trapezoid"].is_f64() && m["prauc"]["average_precision"].is_f64());
    assert!(m["auroc"].is_f64() && m["ece"].is_f64());
    assert_eq!(report["metadata"]["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(report["metadata"]["seed"], 3);
    assert!(plots.join("pr.svg").exists() && plots.join("roc.svg").exists());
}

#[test]
fn analyze_aggregates_and_csv() {
    let dir = TempDir::new().unwrap();
    let input = simulated(dir.path(), "sim", sim_config(200, 0.8, grid_005(), 4));
    let out = ok(&["analyze", s(&input), "--aggregate", "sample_prob,sample_label", "--format", "csv"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("method,calls_per_instance,cardinality"));
    assert!(lines[2].starts_with("sample_prob,"));
}

#[test]
fn analyze_rejects_empty_and_single_class_data() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert_eq!(code(&["analyze", s(&empty)]), 3);
    let single = dir.path().join("single.jsonl");
    fs::write(
        &single,
        "{\"id\":\"a\",\"label\":1,\"score_pos\":0.4}\n{\"id\":\"b\",\"label\":1,\"score_pos\":0.9}\n",
    )
    .unwrap();
    let out = opgrain(&["analyze", s(&single)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate"));
}

#[test]
fn unsupervised_enrichment_refines_granularity() {
    let dir = TempDir::new().unwrap();
    let input = simulated(dir.path(), "sim", shifted_down(sim_config(1000, 0.85, grid_005(), 5)));
    let enriched = dir.path().join("enriched.jsonl");
    ok(&["enrich", "unsupervised", s(&input), "--seed", "11", "--out", s(&enriched)]);
    let report = analyze(&enriched);
    let methods = report["methods"].as_array().unwrap();
    assert_eq!(methods.len(), 2);
    let (base, enr) = (&methods[0], &methods[1]);
    assert_eq!(enr["method"], "enriched");
    assert_eq!(enr["cardinality"], 1000);
    for key in ["g_precision", "g_recall", "g_fpr"] {
        let b = base["granularity"][key].as_f64().unwrap();
        let e = enr["granularity"][key].as_f64().unwrap();
        assert!(e <= b, "{key}: {e} > {b}");
    }
    let again = dir.path().join("again.jsonl");
    ok(&["enrich", "unsupervised", s(&input), "--seed", "11", "--out", s(&again)]);
    assert_eq!(fs::read(&enriched).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn compare_builds_table_and_checks_alignment() {
    let dir = TempDir::new().unwrap();
    let base = simulated(dir.path(), "base", shifted_down(sim_config(3000, 0.85, grid_005(), 6)));
    let enriched = dir.path().join("enriched.jsonl");
    ok(&["enrich", "unsupervised", s(&base), "--out", s(&enriched)]);
    let table = dir.path().join("table");
    ok(&["compare", s(&base), s(&enriched), s(&base), "--out", s(&table)]);
    let json = read_json(&dir.path().join("table.json"));
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["method"], "simulated");
    assert_eq!(rows[1]["method"], "unsupervised");
    assert_eq!(rows[0]["calls_per_instance"], 1);
    let (cb, ce) = (rows[0]["cardinality"].as_u64().unwrap(), rows[1]["cardinality"].as_u64().unwrap());
    assert!(ce >= 100 * cb, "{ce} vs {cb}");
    assert_eq!(rows[0]["cardinality"], rows[2]["cardinality"]);
    assert_eq!(rows[0]["prauc"], rows[2]["prauc"]);
    let csv = fs::read_to_string(dir.path().join("table.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "method,calls_per_instance,cardinality,g_pre,g_rec,g_fpr,prauc,auroc");
    assert_eq!(csv.lines().count(), 4);

    let flipped = dir.path().join("flipped.jsonl");
    let text = fs::read_to_string(&base).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: Value = serde_json::from_str(&lines[1]).unwrap();
    rec["label"] = json!(1 - rec["label"].as_u64().unwrap());
    lines[1] = rec.to_string();
    fs::write(&flipped, lines.join("\n")).unwrap();
    assert_eq!(code(&["compare", s(&base), s(&flipped), "--out", s(&table)]), 4);

    let fewer = dir.path().join("fewer.jsonl");
    fs::write(&fewer, text.lines().take(1500).collect::<Vec<_>>().join("\n")).unwrap();
    assert_eq!(code(&["compare", s(&base), s(&fewer), "--out", s(&table)]), 4);
}

#[test]
fn train_and_apply_supervised_model() {
    let dir = TempDir::new().unwrap();
    let input = simulated(dir.path(), "sep", sim_config(1000, 0.999, two_decimals(), 8));
    let cfg = write_json(
        dir.path(),
        "train.json",
        &json!({
            "learning_rates": [0.05],
            "lambdas": [0.01],
            "max_epochs": 40,
            "patience": 5,
            "val_fraction": 0.2,
            "seed": 0,
            "batch_size": null,
            "noise_mode": "adaptive",
        }),
    );
    let model = dir.path().join("model.json");
    ok(&["enrich", "train", s(&input), "--variant", "one-call", "--config", s(&cfg), "--seed", "2", "--out", s(&model)]);
    let m = read_json(&model);
    assert!(m["best_val_prauc"].as_f64().unwrap() >= 0.95);
    assert_eq!(m["meta"]["seed"], 2);
    let params: Vec<f64> = m["model"]["weights"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|layer| layer.as_array().unwrap().iter())
        .flat_map(|row| row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()))
        .collect();
    assert!(!params.is_empty() && params.iter().all(|p| p.is_finite()));

    let model_again = dir.path().join("model2.json");
    ok(&["enrich", "train", s(&input), "--config", s(&cfg), "--seed", "2", "--out", s(&model_again)]);
    assert_eq!(fs::read(&model).unwrap(), fs::read(&model_again).unwrap());

    let applied = dir.path().join("applied.jsonl");
    ok(&["enrich", "apply", s(&input), "--model", s(&model), "--out", s(&applied)]);
    let loaded = load_records(&applied).unwrap();
    assert_eq!(loaded.meta.unwrap().method.as_deref(), Some("supervised-1call"));
    assert!(loaded.records.iter().all(|r| r.score_enriched.is_some()));
    let report = analyze(&applied);
    assert_eq!(report["methods"][1]["cardinality"], 1000);
}

#[test]
fn bias_reports_roundness() {
    let dir = TempDir::new().unwrap();
    let input = simulated(dir.path(), "grid", sim_config(300, 0.8, grid_005(), 9));
    let out = ok(&["bias", s(&input)]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let zero = v["roundness"]["ends_zero"].as_f64().unwrap();
    let five = v["roundness"]["ends_five"].as_f64().unwrap();
    assert!((zero + five - 1.0).abs() < 1e-12);
    assert_eq!(v["n_texts"], 300);
}

fn instances_file(dir: &Path, n: usize) -> PathBuf {
    let p = dir.join("instances.jsonl");
    let lines: Vec<String> = (0..n)
        .map(|i| json!({"id": format!("q{i}"), "text": format!("text {i}"), "label": i % 2}).to_string())
        .collect();
    fs::write(&p, lines.join("\n")).unwrap();
    p
}

async fn run_blocking(args: Vec<String>) -> Output {
    tokio::task::spawn_blocking(move || {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        opgrain(&refs)
    })
    .await
    .unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn gateway_classify_against_stub() {
    let dir = TempDir::new().unwrap();
    let stub = StubServer::fixed(r#"{"yes-score": "0.90", "no-score": "0.10", "decision": "yes"}"#).await.unwrap();
    let instances = instances_file(dir.path(), 4);
    let out = dir.path().join("preds.jsonl");
    let args: Vec<String> = [
        "gateway", "classify", "--instances", s(&instances), "--endpoint", &stub.url(), "--classes", "yes,no",
        "--context", "Answer yes or no.", "--template", "two_decimals", "--seed", "3", "--out", s(&out),
    ]
    .iter()
    .map(|x| x.to_string())
    .collect();
    let res = run_blocking(args).await;
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let loaded = load_records(&out).unwrap();
    assert_eq!(loaded.records.len(), 4);
    assert_eq!(loaded.report.rejected, 0);
    assert!(loaded.records.iter().all(|r| r.score_pos == Some(0.9)));
    assert!(loaded.records.iter().all(|r| r.score_pos_text.as_deref() == Some("0.90")));
    let meta = loaded.meta.unwrap();
    assert_eq!(meta.method.as_deref(), Some("two_decimals"));
    assert_eq!(meta.seed, Some(3));
    assert_eq!(stub.requests(), 4);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn gateway_two_stage_against_stub() {
    let dir = TempDir::new().unwrap();
    let stub = StubServer::start(Duration::ZERO, |req| {
        let reply = if req.prompt.contains("<proposed-answer>") {
            r#"{"reasoning": "...", "confidence": 0.7}"#
        } else {
            r#"{"reason": "...", "decision": "no"}"#
        };
        (StatusCode::OK, reply.to_string())
    })
    .await
    .unwrap();
    let instances = instances_file(dir.path(), 3);
    let out = dir.path().join("two.jsonl");
    let args: Vec<String> = [
        "gateway", "two-stage", "--cot", "--instances", s(&instances), "--endpoint", &stub.url(), "--classes", "yes,no",
        "--context", "Answer yes or no.", "--out", s(&out),
    ]
    .iter()
    .map(|x| x.to_string())
    .collect();
    let res = run_blocking(args).await;
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let loaded = load_records(&out).unwrap();
    for r in &loaded.records {
        assert!((r.score_pos.unwrap() - 0.3).abs() < 1e-12);
    }
    assert_eq!(loaded.meta.unwrap().calls_per_instance, Some(2));
    assert_eq!(stub.requests(), 6);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn gateway_all_failed_exits_with_network_code() {
    let dir = TempDir::new().unwrap();
    let stub = StubServer::start(Duration::ZERO, |_| (StatusCode::INTERNAL_SERVER_ERROR, "down".into()))
        .await
        .unwrap();
    let instances = instances_file(dir.path(), 2);
    let args: Vec<String> = [
        "gateway", "classify", "--instances", s(&instances), "--endpoint", &stub.url(), "--classes", "yes,no",
        "--context", "c", "--max-attempts", "2", "--backoff-ms", "1", "--out", s(&dir.path().join("x.jsonl")),
    ]
    .iter()
    .map(|x| x.to_string())
    .collect();
    let res = run_blocking(args).await;
    assert_eq!(res.status.code(), Some(5));
    assert_eq!(stub.requests(), 4);
}

#[test]
fn missing_context_is_config_error() {
    let dir = TempDir::new().unwrap();
    let instances = instances_file(dir.path(), 1);
    let out = dir.path().join("x.jsonl");
    assert_eq!(
        code(&["gateway", "classify", "--instances", s(&instances), "--classes", "a,b", "--out", s(&out)]),
        2
    );
}
