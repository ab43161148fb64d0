use std::path::Path;
use std::process::{Command, Output};

use sinkskip_core::tensor::{write_tensor, Tensor};

fn sinkskip(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sinkskip"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const SMALL: [&str; 8] = ["--layers", "3", "--hq", "8", "--hkv", "4", "--dim", "32"];

#[test]
fn calibrate_requires_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let o = sinkskip(dir.path(), &["calibrate"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--lengths"));
}

#[test]
fn calibrate_with_three_lengths_is_rank_deficient() {
    let dir = tempfile::tempdir().unwrap();
    let o = sinkskip(dir.path(), &["calibrate", "--lengths", "256,512,1024"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("rank-deficient"), "{}", stderr(&o));
    assert!(!dir.path().join("profile.json").exists());
}

#[test]
fn calibrate_hits_target_and_writes_profile() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["calibrate", "--lengths", "256,512,1024,2048", "--samples", "20"];
    args.extend(["--plant-sink-frac", "0.75", "--alignment", "0.5", "--length-shift", "0.3", "--layers", "6"]);
    let o = sinkskip(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let profile = json(dir.path().join("profile.json"));
    assert_eq!(profile["excluded_layers"], serde_json::json!([0, 1]));
    assert_eq!(profile["length_normalizer"], 2048.0);
    let rows = json(dir.path().join("calibration.json"));
    for r in rows.as_array().unwrap() {
        let skip = r["skip_fitted"].as_f64().unwrap();
        assert!((skip - 0.6).abs() <= 0.03, "{r}");
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("skip_fit"));
}

#[test]
fn profile_flag_names_output_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("nested-profile.json");
    let o = sinkskip(
        dir.path(),
        &["--profile", p.to_str().unwrap(), "calibrate", "--lengths", "64,128,192,256", "--samples", "4"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(p.exists());
}

#[test]
fn bench_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["bench", "--lengths", "128,256", "--warmup", "1", "--steps", "3", "--exclude-layers", "none"];
    args.extend(SMALL);
    args.extend(["--plant-sink-frac", "0.5"]);
    let o = sinkskip(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = json(dir.path().join("bench.json"));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r["skip_ratio"], 0.5);
        let (d, rt) = (r["kv_floats_dense"].as_u64().unwrap(), r["kv_floats_routed"].as_u64().unwrap());
        assert_eq!(rt * 2, d);
        assert_eq!(r["kv_floats_avoided"].as_u64().unwrap(), d - rt);
        let speedup = r["speedup"].as_f64().unwrap();
        let ratio = r["dense_ms"].as_f64().unwrap() / r["routed_ms"].as_f64().unwrap();
        assert!((speedup - ratio).abs() < 1e-9);
    }
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("length,steps,dense_ms,routed_ms,speedup,"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn route_eval_planted_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["route-eval", "--lengths", "128", "--steps", "2", "--format", "csv"];
    args.extend(SMALL);
    let o = sinkskip(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = json(dir.path().join("route_eval.json"));
    assert_eq!(s["auprc"], 1.0);
    assert!((s["shuffled_auprc_mean"].as_f64().unwrap() - s["prevalence"].as_f64().unwrap()).abs() < 0.25);
    let f1 = std::fs::read_to_string(dir.path().join("f1_table.csv")).unwrap();
    assert!(f1.lines().any(|l| l.starts_with("0.55,")), "{f1}");
}

#[test]
fn route_eval_without_positives_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["route-eval", "--lengths", "64", "--steps", "1", "--plant-sink-frac", "0"];
    args.extend(SMALL);
    let o = sinkskip(dir.path(), &args);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no positive labels"));
}

#[test]
fn route_eval_replays_dumped_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("dump");
    let mut args = vec!["route-eval", "--lengths", "64", "--steps", "1", "--dump", dump.to_str().unwrap()];
    args.extend(SMALL);
    assert_eq!(code(&sinkskip(dir.path(), &args)), 0);
    let replay = dir.path().join("replay");
    let q = dump.join("queries.snkt");
    let o = sinkskip(
        &replay,
        &["route-eval", "--snapshot", dump.to_str().unwrap(), "--queries", q.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = json(replay.join("route_eval.json"));
    assert_eq!(s["auprc"], 1.0);
    assert_eq!(s["observations"], 4);
    assert!(s["planted_agreement"].is_null());
}

#[test]
fn outputs_are_deterministic() {
    let run = |sub: &str| {
        let dir = tempfile::tempdir().unwrap();
        let mut args = vec!["--seed", "9", "route-eval", "--lengths", "96", "--steps", "2"];
        args.extend(SMALL);
        assert_eq!(code(&sinkskip(dir.path(), &args)), 0);
        std::fs::read(dir.path().join(sub)).unwrap()
    };
    assert_eq!(run("observations.json"), run("observations.json"));
    assert_eq!(run("pr_curve.json"), run("pr_curve.json"));
}

fn fixture(dir: &Path, name: &str, dims: Vec<usize>, data: Vec<f32>) -> String {
    let p = dir.join(name);
    write_tensor(&p, &Tensor::new(dims, data).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn analyze_concentration_row_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = vec![0.8f32, 0.0182];
    data.extend(std::iter::repeat_n(0.1818f32 / 10.0, 10));
    data.extend([0.803f32, 0.197]);
    data.extend(std::iter::repeat_n(0.0f32, 10));
    data.extend([0.410f32, 0.590]);
    data.extend(std::iter::repeat_n(0.0f32, 10));
    let w = fixture(dir.path(), "w.snkt", vec![3, 12], data);
    let o = sinkskip(dir.path(), &["--format", "csv", "analyze", "--weights", &w]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("concentration.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "row,bos_score,max_nonbos,mean_nonbos,ratio,is_sink");
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    assert_eq!(rows.len(), 3);
    assert!((rows[0][4].parse::<f64>().unwrap() - 43.956).abs() < 1e-2, "{:?}", rows[0]);
    let sink: Vec<&str> = rows.iter().map(|r| r[5].as_str()).collect();
    assert_eq!(sink, ["true", "true", "false"]);
    assert!(dir.path().join("concentration_summary.json").exists());
}

#[test]
fn analyze_norms_and_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let values = fixture(dir.path(), "v.snkt", vec![3, 2], vec![0.0, 0.0, 3.0, 4.0, 0.0, 1.0]);
    let keys = fixture(dir.path(), "k.snkt", vec![4, 2], vec![1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 3.0]);
    let o = sinkskip(
        dir.path(),
        &["analyze", "--values", &values, "--keys", &keys, "--bos-rows", "0,1"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let norms = json(dir.path().join("norm_stats.json"));
    assert_eq!(norms[0]["tensor"], "values");
    assert_eq!(norms[0]["bos_norm"], 0.0);
    assert_eq!(norms[0]["mean_nonbos_norm"], 3.0);
    let g = json(dir.path().join("key_geometry.json"));
    assert_eq!(g[0]["mean_cos_within_bos"], 1.0);
    assert_eq!(g[0]["mean_cos_bos_to_rest"], 0.0);
}

#[test]
fn analyze_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let c = fixture(dir.path(), "c.snkt", vec![2, 2], vec![2.0, 0.0, 0.0, 0.0]);
    let r = fixture(dir.path(), "r.snkt", vec![1, 2], vec![0.0, 4.0]);
    let d = fixture(dir.path(), "d.snkt", vec![1, 2], vec![1.0, 0.0]);
    let args = ["analyze", "--residual-c", &c, "--residual-in", &r, "--residual-delta", &d, "--epsilon", "0"];
    let o = sinkskip(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = json(dir.path().join("residual_metrics.json"));
    assert_eq!(rows[0]["r_res"], 0.5);
    assert_eq!(rows[0]["a_align"], 1.0);
    assert_eq!(rows[1]["degenerate"], true);
}

#[test]
fn analyze_rejects_malformed_dump() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.snkt");
    std::fs::write(&p, b"NOPE0000").unwrap();
    let o = sinkskip(dir.path(), &["analyze", "--weights", p.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bad.snkt"), "{}", stderr(&o));
    assert_eq!(code(&sinkskip(dir.path(), &["analyze"])), 1);
}

#[test]
fn selftest_passes_and_catches_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = sinkskip(dir.path(), &["selftest", "--instances", "20"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = sinkskip(dir.path(), &["selftest", "--instances", "20", "--inject-fault", "tie-break"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("failed: routing-semantics"));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&sinkskip(dir.path(), &["--format", "xml", "selftest"])), 2);
    assert_eq!(code(&sinkskip(dir.path(), &["frobnicate"])), 2);
    assert_eq!(code(&sinkskip(dir.path(), &["bench", "--lengths", "abc"])), 2);
}

#[test]
fn missing_profile_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = sinkskip(dir.path(), &["--profile", "/nonexistent/p.json", "bench", "--lengths", "64"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("/nonexistent/p.json"));
}
