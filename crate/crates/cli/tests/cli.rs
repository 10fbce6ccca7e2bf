use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tkd_core::pipeline::PipelineReport;
use tkd_core::sim::read_trace;

const SCENES: &str = r#"
[stream]
n_frames = 300

[[scenes]]
scene_id = 1
class_distribution = [0.5, 0.5, 0.0, 0.0]
duration_range = [150, 150]
appearance_shift = 1.0

[[scenes]]
scene_id = 2
class_distribution = [0.0, 0.0, 0.5, 0.5]
duration_range = [150, 150]
appearance_shift = 1.0

[model]
pretrain_frames = 300
pretrain_epochs = 1
"#;

fn tkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tkd")).args(args).output().unwrap()
}

fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generate_is_deterministic_and_readable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "g.toml", &format!("seed = 3\n{SCENES}"));
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let out = tkd(&["generate", "-c", s(&cfg), "-o", s(&a)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("300 frames"), "{stdout}");
    assert!(stdout.contains("class histogram"));
    assert!(tkd(&["generate", "-c", s(&cfg), "-o", s(&b)]).status.success());
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let stream = read_trace(&a).unwrap();
    assert_eq!(stream.len(), 300);
    assert_eq!(stream.change_points(), vec![150]);
}

#[test]
fn missing_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "g.toml", SCENES);
    let out = tkd(&["generate", "-c", s(&cfg), "-o", s(&dir.path().join("t.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("seed"));
    // the flag supplies it
    let out = tkd(&[
        "generate",
        "-c",
        s(&cfg),
        "--seed",
        "4",
        "-o",
        s(&dir.path().join("t.jsonl")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn invalid_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "g.toml", &format!("seed = 3\n{SCENES}"));
    let out = tkd(&["run", "-c", s(&cfg), "--set", "pipeline.distill.lambda=1.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("distill.lambda"), "{}", stderr(&out));
    let out = tkd(&["run", "-c", s(&cfg), "--set", "pipeline.queue_capacity=\"many\""]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("queue_capacity"), "{}", stderr(&out));
}

#[test]
fn frozen_and_oracle_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "r.toml", &format!("seed = 5\n{SCENES}"));
    let report = dir.path().join("frozen.json");
    let out = tkd(&[
        "run",
        "-c",
        s(&cfg),
        "--set",
        "pipeline.mode.kind=frozen_student",
        "-o",
        s(&report),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let r: PipelineReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.key_frame_fraction, 0.0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("F1@0.5"));

    let report = dir.path().join("oracle.json");
    let out = tkd(&[
        "run",
        "-c",
        s(&cfg),
        "--set",
        "pipeline.mode.kind=oracle_only",
        "-o",
        s(&report),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let r: PipelineReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.eval.unwrap().at(0.5).unwrap().f1, 1.0);

    // re-scoring the saved report reproduces it
    let summary = dir.path().join("summary.json");
    let out = tkd(&["eval", "-c", s(&cfg), "--report", s(&report), "-o", s(&summary)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(fs::read_to_string(&summary).unwrap().contains("\"f1\": 1.0"));
}

#[test]
fn run_replays_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let gen = config(dir.path(), "g.toml", &format!("seed = 3\n{SCENES}"));
    let trace = dir.path().join("t.jsonl");
    assert!(tkd(&["generate", "-c", s(&gen), "-o", s(&trace)]).status.success());
    let cfg = config(
        dir.path(),
        "r.toml",
        "seed = 3\n[model]\npretrain_frames = 300\npretrain_epochs = 1\n",
    );
    let out = tkd(&[
        "run",
        "-c",
        s(&cfg),
        "--trace",
        s(&trace),
        "-o",
        s(&dir.path().join("r.json")),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    // both sources at once is ambiguous
    let out = tkd(&["run", "-c", s(&gen), "--trace", s(&trace)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unreadable_trace_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "r.toml", "seed = 3\n");
    let out = tkd(&["run", "-c", s(&cfg), "--trace", s(&dir.path().join("missing.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_writes_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "a.toml", &format!("seed = 6\n{SCENES}"));
    let table = dir.path().join("lambda.csv");
    let out = tkd(&["ablate", "-c", s(&cfg), "-o", s(&table)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut rdr = csv::Reader::from_path(&table).unwrap();
    let lambdas: Vec<f64> = rdr.records().map(|r| r.unwrap()[0].parse().unwrap()).collect();
    assert_eq!(lambdas, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
}

#[test]
fn bench_writes_one_row_per_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "b.toml",
        "seed = 1\n[bench]\ntarget_counts = [1, 10, 25, 50]\ntrials = 30\n",
    );
    let table = dir.path().join("cost.json");
    let out = tkd(&["bench", "-c", s(&cfg), "-o", s(&table)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(&table).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
}

#[test]
fn malformed_config_leaves_no_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "b.toml", "seed = 1\n[bench\ntrials = 30\n");
    let table = dir.path().join("cost.csv");
    let out = tkd(&["bench", "-c", s(&cfg), "-o", s(&table)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!table.exists());
    let cfg = config(dir.path(), "b2.toml", "seed = 1\n[bench]\ntrials = 3\n");
    let out = tkd(&["bench", "-c", s(&cfg), "-o", s(&table)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bench.trials"));
    assert!(!table.exists());
}
