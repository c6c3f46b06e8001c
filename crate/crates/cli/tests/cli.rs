use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn clip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clip")).args(args).env("RUST_LOG", "error").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/corpus")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Benchmark records with `n` questions, `correct` of them right, and rounds
/// summing to `total_rounds`.
fn records(n: usize, correct: usize, total_rounds: u64) -> String {
    let base = total_rounds / n as u64;
    let extra = (total_rounds % n as u64) as usize;
    (0..n)
        .map(|i| {
            let rounds = base + u64::from(i < extra);
            format!(
                "{{\"question_id\":\"q{i}\",\"correct\":{},\"rounds\":{rounds},\"tokens\":{}}}\n",
                i < correct,
                rounds * 480
            )
        })
        .collect()
}

fn summary_f_ae(dir: &Path) -> f64 {
    let csv = fs::read_to_string(dir.join("summary.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == "f_ae").unwrap();
    row[i].parse().unwrap()
}

#[test]
fn score_reproduces_a_reported_benchmark_row() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("records.jsonl");
    fs::write(&input, records(1000, 713, 14_260)).unwrap();
    let out = dir.path().join("out");
    let run = clip(&["score", arg(&input), "--max-rounds", "100", "--out", arg(&out)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    assert!((summary_f_ae(&out) - 0.779).abs() <= 0.002);
    assert!(stdout(&run).contains("F-AE"));
    for name in ["rounds_histogram.csv", "cumulative_accuracy.csv"] {
        assert!(out.join(name).is_file(), "{name}");
    }
}

#[test]
fn tighter_budget_lowers_f_ae() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("records.jsonl");
    fs::write(&input, records(200, 120, 4_000)).unwrap();
    let wide = dir.path().join("wide");
    let tight = dir.path().join("tight");
    assert_eq!(code(&clip(&["score", arg(&input), "--max-rounds", "100", "--out", arg(&wide)])), 0);
    assert_eq!(code(&clip(&["score", arg(&input), "--max-rounds", "50", "--out", arg(&tight)])), 0);
    assert!(summary_f_ae(&tight) < summary_f_ae(&wide));
}

#[test]
fn malformed_record_reports_its_line() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("records.jsonl");
    let mut text = records(10, 5, 50);
    let mut lines: Vec<&str> = text.lines().collect();
    lines[6] = "{\"question_id\": \"q6\", \"correct\": ";
    text = lines.join("\n");
    fs::write(&input, text).unwrap();
    let run = clip(&["score", arg(&input), "--out", arg(&dir.path().join("out"))]);
    assert_eq!(code(&run), 3);
    assert!(stderr(&run).contains("line 7"), "{}", stderr(&run));
}

#[test]
fn empty_records_exit_three() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("records.jsonl");
    fs::write(&input, "\n").unwrap();
    assert_eq!(code(&clip(&["score", arg(&input), "--out", arg(&dir.path().join("out"))])), 3);
}

#[test]
fn zero_budget_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("records.jsonl");
    fs::write(&input, records(4, 2, 8)).unwrap();
    assert_eq!(code(&clip(&["score", arg(&input), "--max-rounds", "0", "--out", arg(&dir.path().join("o"))])), 2);
}

#[test]
fn prune_then_export_on_the_synthetic_corpus() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let config = corpus().join("synthetic.toml");
    let run = clip(&["prune", "--config", arg(&config), "--mock", "--export-graphs", "--out", arg(&out)]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["input_trajectories"], 20);
    assert!(out.join("graphs").read_dir().unwrap().count() > 0);
    let eff = fs::read(out.join("sft_eff.jsonl")).unwrap();

    fs::remove_file(out.join("sft_eff.jsonl")).unwrap();
    let export = clip(&["export", "--mode", "eff", "--out", arg(&out)]);
    assert_eq!(code(&export), 0, "{}", stderr(&export));
    assert_eq!(fs::read(out.join("sft_eff.jsonl")).unwrap(), eff);

    let hybrid = clip(&["export", "--mode", "hybrid", "--out", arg(&out)]);
    assert_eq!(code(&hybrid), 0, "{}", stderr(&hybrid));
    let n = fs::read_to_string(out.join("sft_hybrid.jsonl")).unwrap().lines().count();
    assert!(n > eff.iter().filter(|b| **b == b'\n').count());
}

#[test]
fn export_without_prune_output_exits_three() {
    let dir = TempDir::new().unwrap();
    let run = clip(&["export", "--mode", "eff", "--out", arg(dir.path())]);
    assert_eq!(code(&run), 3, "{}", stderr(&run));
}

#[test]
fn graph_builds_three_runs_per_trajectory() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let c = corpus();
    let run = clip(&[
        "graph",
        arg(&c.join("synthetic.jsonl")),
        "--runs",
        "3",
        "--mock",
        "--mock-script",
        arg(&c.join("synthetic.mock.json")),
        "--out",
        arg(&out),
    ]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    assert_eq!(out.join("graphs").read_dir().unwrap().count(), 60);
    let votes = fs::read_to_string(out.join("graph_votes.jsonl")).unwrap();
    assert_eq!(votes.lines().count(), 20);
}

#[test]
fn prune_of_an_empty_input_exits_three() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    fs::copy(corpus().join("synthetic.mock.json"), dir.path().join("mock.json")).unwrap();
    let config = dir.path().join("c.toml");
    fs::write(&config, "input = \"empty.jsonl\"\nmock = true\nmock_script = \"mock.json\"\n").unwrap();
    let run = clip(&["prune", "--config", arg(&config), "--mock", "--out", arg(&dir.path().join("out"))]);
    assert_eq!(code(&run), 3, "{}", stderr(&run));
}

#[test]
fn bad_config_exits_two() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("c.toml");
    fs::write(&config, "input = \"x.jsonl\"\nno_such_key = 1\n").unwrap();
    let run = clip(&["prune", "--config", arg(&config), "--out", arg(&dir.path().join("out"))]);
    assert_eq!(code(&run), 2, "{}", stderr(&run));
    let missing = clip(&["prune", "--config", arg(&dir.path().join("absent.toml"))]);
    assert_eq!(code(&missing), 2, "{}", stderr(&missing));
}
