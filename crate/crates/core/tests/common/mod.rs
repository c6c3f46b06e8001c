#![allow(dead_code)]

use std::path::{Path, PathBuf};

use trajclip::pipeline::{connect, run_prune, Connection, PipelineConfig, PipelineReport, RunOptions};

pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

pub fn synthetic_config() -> PipelineConfig {
    PipelineConfig::load(&corpus_dir().join("synthetic.toml")).expect("bundled config loads")
}

/// Runs the bundled synthetic corpus through the mock pipeline into `out`.
pub fn run_synthetic(out: &Path) -> (PipelineReport, Connection) {
    let cfg = synthetic_config();
    let conn = connect(&cfg, true).expect("mock connection");
    let report = run_prune(&cfg, &conn, &RunOptions { out: out.to_path_buf(), export_graphs: true }).expect("pipeline runs");
    (report, conn)
}

/// Every file under `dir` except resume state and timing, as (relative path, bytes).
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
            if rel == "state" || rel == "timing.json" {
                continue;
            }
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out
}

pub fn read_jsonl(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}
pub mod graphs;
