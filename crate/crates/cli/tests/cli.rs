use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const CONFIG: &str = "\
synth.accuracy = 0.6, 0.7, 0.75, 0.8, 0.9
synth.n = 3000
structure.threshold = 1.0
batch_size = 500
eval.folds = 5
eval.batches = 10
";

fn incws(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_incws"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "off")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// A directory holding `run.conf` and a simulated `data.jsonl`.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.conf"), CONFIG).unwrap();
    let o = incws(dir.path(), &["simulate", "--config", "run.conf", "--output", "data.jsonl"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn simulate_fit_and_label_round_trip() {
    let dir = workspace();
    let data = fs::read_to_string(dir.path().join("data.jsonl")).unwrap();
    assert_eq!(data.lines().count(), 3000);
    assert!(data.lines().next().unwrap().starts_with(r#"{"id":"0","labels":["#));

    let o = incws(dir.path(), &["fit-stream", "data.jsonl", "--state", "st.json", "--config", "run.conf"]);
    assert!(o.status.success());
    let metrics: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(metrics.len(), 6);
    assert_eq!(metrics[0]["initial"], true);
    assert_eq!(metrics[5]["batch"], 5);
    let acc = metrics[5]["accuracies"].as_array().unwrap();
    assert_eq!(acc.len(), 5);
    // The best source is the last one.
    assert!(acc[4].as_f64().unwrap() > acc[0].as_f64().unwrap());

    let o = incws(dir.path(), &["label", "data.jsonl", "--state", "st.json", "--output", "labels.jsonl"]);
    assert!(o.status.success());
    let labels = fs::read_to_string(dir.path().join("labels.jsonl")).unwrap();
    let truth: Vec<serde_json::Value> = data.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let mut correct = 0;
    for (l, t) in labels.lines().zip(&truth) {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["id"], t["id"]);
        let p: f64 = v["probs"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
        assert!((p - 1.0).abs() < 1e-9);
        correct += usize::from(v["hard"] == t["true_label"]);
    }
    assert!(correct as f64 / 3000.0 > 0.85);
}

#[test]
fn fit_stream_resumes_from_the_state_file() {
    let dir = workspace();
    let data = fs::read_to_string(dir.path().join("data.jsonl")).unwrap();
    let lines: Vec<&str> = data.lines().collect();
    fs::write(dir.path().join("first.jsonl"), lines[..1000].join("\n")).unwrap();
    fs::write(dir.path().join("second.jsonl"), lines[1000..].join("\n")).unwrap();

    let run = |file: &str| incws(dir.path(), &["fit-stream", file, "--state", "st.json", "--config", "run.conf"]);
    assert!(run("first.jsonl").status.success());
    let o = run("second.jsonl");
    assert!(o.status.success());
    let last: serde_json::Value = serde_json::from_str(stdout(&o).lines().last().unwrap()).unwrap();
    assert_eq!(last["batch"], 5);
    let snap: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("st.json")).unwrap()).unwrap();
    assert_eq!(snap["batches_seen"], 6);
    assert!(!dir.path().join("st.json.tmp").exists());
}

#[test]
fn evaluate_writes_reports() {
    let dir = workspace();
    let o = incws(dir.path(), &["evaluate", "data.jsonl", "--config", "run.conf", "--out", "inc"]);
    assert!(o.status.success());
    let csv = fs::read_to_string(dir.path().join("inc/report.csv")).unwrap();
    assert!(csv.starts_with("test,batch,start,size,accuracy,updated,abstained,est_acc_1"));
    assert_eq!(csv.lines().count(), 1 + 5 * 10);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("inc/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mode"], "incremental");
    assert_eq!(summary["tests"][4]["folds"], serde_json::json!([5, 1, 2, 3]));
    assert!(summary["baseline_accuracy"].as_f64().is_some());

    let o = incws(dir.path(), &["evaluate", "data.jsonl", "--config", "run.conf", "--mode", "sweep", "--out", "sw"]);
    assert!(o.status.success());
    let sweep = fs::read_to_string(dir.path().join("sw/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().next().unwrap(), "alpha,0.001,0.01,0.025,0.05,0.1,0.25");
    assert!(dir.path().join("sw/sweep.json").exists());
}

#[test]
fn flags_override_the_config_file() {
    let dir = workspace();
    let o = incws(
        dir.path(),
        &[
            "fit-stream",
            "data.jsonl",
            "--state",
            "st.json",
            "--config",
            "run.conf",
            "--batch-size",
            "1000",
            "--alpha",
            "0.2",
        ],
    );
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 3);
    let snap: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("st.json")).unwrap()).unwrap();
    assert_eq!(snap["alpha"], 0.2);
}

#[test]
fn exit_codes() {
    let dir = workspace();
    let p = dir.path();

    // Missing state.
    assert_eq!(incws(p, &["label", "data.jsonl", "--state", "none.json"]).status.code(), Some(4));
    // Unknown config key.
    fs::write(p.join("bad.conf"), "nope = 1\n").unwrap();
    assert_eq!(incws(p, &["simulate", "--config", "bad.conf", "-n", "5"]).status.code(), Some(2));
    // Malformed record.
    fs::write(p.join("bad.jsonl"), "{\"id\":\"a\",\"labels\":[1,2,9]}\n").unwrap();
    assert_eq!(incws(p, &["fit-stream", "bad.jsonl", "--state", "x.json"]).status.code(), Some(2));
    // Single-example batches cannot be estimated; nothing is saved.
    let o = incws(p, &["fit-stream", "data.jsonl", "--state", "one.json", "--batch-size", "1", "--config", "run.conf"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!p.join("one.json").exists());

    assert!(incws(p, &["fit-stream", "data.jsonl", "--state", "st.json", "--config", "run.conf"]).status.success());
    // Source count differs from the state.
    fs::write(p.join("four.jsonl"), "{\"id\":\"a\",\"labels\":[1,2,1,1]}\n").unwrap();
    assert_eq!(incws(p, &["label", "four.jsonl", "--state", "st.json"]).status.code(), Some(2));
    // Class count differs from the state.
    fs::write(p.join("k3.conf"), "num_classes = 3\n").unwrap();
    assert_eq!(
        incws(p, &["fit-stream", "data.jsonl", "--state", "st.json", "--config", "k3.conf"]).status.code(),
        Some(4)
    );
    // Evaluation needs every truth.
    assert_eq!(incws(p, &["evaluate", "four.jsonl"]).status.code(), Some(2));
}

#[test]
fn a_held_lock_blocks_a_second_writer() {
    let dir = workspace();
    let lock = fs::File::create(dir.path().join("st.json.lock")).unwrap();
    lock.lock().unwrap();
    let o = incws(dir.path(), &["fit-stream", "data.jsonl", "--state", "st.json", "--config", "run.conf"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked"));
}

#[test]
fn simulate_zero_examples_writes_an_empty_file() {
    let dir = workspace();
    let o = incws(dir.path(), &["simulate", "--config", "run.conf", "-n", "0", "--output", "empty.jsonl"]);
    assert!(o.status.success());
    assert_eq!(fs::read(dir.path().join("empty.jsonl")).unwrap().len(), 0);
}
