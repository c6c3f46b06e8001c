use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{
    mine_runs, process_trajectory, vote_runs, Connection, ExportSummary, FailureRecord, FilterSummary, ForwardPolicy,
    Outcome, PipelineConfig, PipelineError, PipelineReport, ProcessSettings, TrajectoryResult, VoteDiagnostics,
};
use crate::gateway::{Gateway, LlmRole};
use crate::graph::GraphBuildOptions;
use crate::rewrite::{export_sft, query_id, ExportMode, SeamReport};
use crate::trajectory::{parse_trajectories, pass_rate, PassRateBounds, QaRecord, SampledBatch, Trajectory};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub out: PathBuf,
    pub export_graphs: bool,
}

fn io_err(path: &Path, e: std::io::Error) -> PipelineError {
    PipelineError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|i| serde_json::to_string(&i).expect("serializable") + "\n").collect()
}

fn lines(items: impl IntoIterator<Item = String>) -> String {
    items.into_iter().map(|l| l + "\n").collect()
}

fn sha_hex(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' }).collect()
}

/// Reads and validates trajectory JSONL: non-empty, parseable, unique ids.
pub(crate) fn read_trajectories(path: &Path) -> Result<Vec<Trajectory>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    let trajectories = parse_trajectories(&text)
        .map_err(|(line, e)| PipelineError::Input(format!("{} line {line}: {e}", path.display())))?;
    if trajectories.is_empty() {
        return Err(PipelineError::Input(format!("{} contains no trajectories", path.display())));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = trajectories.iter().find(|t| !seen.insert(t.id())) {
        return Err(PipelineError::Input(format!("duplicate run_id `{}` in {}", dup.id(), path.display())));
    }
    Ok(trajectories)
}

fn read_qa(path: &Path) -> Result<HashMap<String, QaRecord>, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: QaRecord = serde_json::from_str(line)
            .map_err(|e| PipelineError::Input(format!("{} line {}: {e}", path.display(), i + 1)))?;
        rec.validate().map_err(|e| PipelineError::Input(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.insert(rec.question.clone(), rec);
    }
    Ok(out)
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))
}

#[derive(Serialize)]
struct FilterRecord<'a> {
    query_id: String,
    dataset: &'a str,
    correct: usize,
    total: usize,
    pass_rate: f64,
    decision: &'static str,
    forwarded: Vec<&'a str>,
}

struct Filtered<'a> {
    forwarded: Vec<&'a Trajectory>,
    records: String,
    failures: Vec<FailureRecord>,
    summary: FilterSummary,
}

/// Judges every trajectory against its query's gold answer and keeps the
/// queries whose pass rate lies in the configured window.
fn filter_stage<'a>(
    trajectories: &'a [Trajectory],
    cfg: &PipelineConfig,
    gw: &Gateway,
    pool: &rayon::ThreadPool,
    state_dir: &Path,
) -> Result<Filtered<'a>, PipelineError> {
    let Some(qa_path) = &cfg.qa else {
        return Ok(Filtered {
            forwarded: trajectories.iter().collect(),
            records: String::new(),
            failures: Vec::new(),
            summary: FilterSummary { trajectories_forwarded: trajectories.len(), ..Default::default() },
        });
    };
    let qa = read_qa(qa_path)?;
    let mut groups: Vec<(&str, Vec<&Trajectory>)> = Vec::new();
    for t in trajectories {
        match groups.iter_mut().find(|(q, _)| *q == t.query()) {
            Some((_, g)) => g.push(t),
            None => groups.push((t.query(), vec![t])),
        }
    }
    if let Some((q, _)) = groups.iter().find(|(q, _)| !qa.contains_key(*q)) {
        return Err(PipelineError::Input(format!("no QA record for query `{q}`")));
    }

    let cache_path = state_dir.join("verdicts.json");
    let mut cache: BTreeMap<String, bool> = match fs::read_to_string(&cache_path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
        Err(_) => BTreeMap::new(),
    };
    let key = |t: &Trajectory| sha_hex(&[t.query(), t.answer(), &qa[t.query()].gold_answer]);
    let pending: Vec<&Trajectory> = trajectories.iter().filter(|t| !cache.contains_key(&key(t))).collect();
    let judged: Vec<(String, Result<bool, FailureRecord>)> = pool.install(|| {
        pending
            .par_iter()
            .map(|t| {
                let gold = &qa[t.query()].gold_answer;
                let verdict = gw.judge_answer(t.query(), t.answer(), gold, t.id()).map_err(|e| {
                    FailureRecord::from_gateway(t.id(), "filter", &e, format!("judge call failed: {e}"))
                });
                (key(t), verdict)
            })
            .collect()
    });
    let mut judge_errors: HashMap<String, FailureRecord> = HashMap::new();
    for (k, v) in judged {
        match v {
            Ok(ok) => {
                cache.insert(k, ok);
            }
            Err(f) => {
                judge_errors.insert(k, f);
            }
        }
    }
    write_file(&cache_path, &serde_json::to_string_pretty(&cache).expect("serializable"))?;

    let bounds: PassRateBounds = cfg.pass_rate;
    let mut out = Filtered {
        forwarded: Vec::new(),
        records: String::new(),
        failures: Vec::new(),
        summary: FilterSummary { applied: true, queries: groups.len(), ..Default::default() },
    };
    let mut records = Vec::new();
    for (query, group) in &groups {
        let record = &qa[*query];
        let failed: Vec<FailureRecord> = group.iter().filter_map(|t| judge_errors.get(&key(t)).cloned()).collect();
        if !failed.is_empty() {
            // Without every verdict the pass rate is unknown; the query is quarantined.
            out.summary.judge_failures += group.len();
            for t in group {
                out.failures.push(judge_errors.get(&key(t)).cloned().unwrap_or_else(|| FailureRecord {
                    trajectory_id: t.id().into(),
                    stage: "filter".into(),
                    code: failed[0].code.clone(),
                    message: "another judge call for this query failed".into(),
                }));
            }
            continue;
        }
        if group.len() != cfg.samples_per_query {
            log::warn!("query {} has {} trajectories, expected {}", query_id(query), group.len(), cfg.samples_per_query);
        }
        let batch = SampledBatch::new(record.clone(), group.iter().map(|t| ((*t).clone(), cache[&key(t)])).collect())
            .expect("non-empty group");
        let pr = pass_rate(&batch);
        let keep = bounds.admits(pr);
        let forwarded: Vec<&Trajectory> = if keep {
            let passing = group.iter().copied().filter(|t| cache[&key(t)]);
            match cfg.forward {
                ForwardPolicy::AllPassing => passing.collect(),
                ForwardPolicy::FirstPassing => passing.take(1).collect(),
            }
        } else {
            Vec::new()
        };
        if keep {
            out.summary.queries_kept += 1;
        } else {
            out.summary.queries_dropped += 1;
        }
        out.summary.trajectories_forwarded += forwarded.len();
        out.summary.trajectories_held_back += group.len() - forwarded.len();
        records.push(FilterRecord {
            query_id: query_id(query),
            dataset: &record.dataset,
            correct: pr.correct,
            total: pr.total,
            pass_rate: pr.value(),
            decision: if keep { "keep" } else { "drop" },
            forwarded: forwarded.iter().map(|t| t.id()).collect(),
        });
        out.forwarded.extend(forwarded);
    }
    out.records = jsonl(records);
    // Keep input order for everything downstream.
    let order: HashMap<&str, usize> = trajectories.iter().enumerate().map(|(i, t)| (t.id(), i)).collect();
    out.forwarded.sort_by_key(|t| order[t.id()]);
    Ok(out)
}

fn fingerprint(cfg: &PipelineConfig, conn: &Connection) -> String {
    #[derive(Serialize)]
    struct Fp<'a> {
        version: &'a str,
        vote_runs: u32,
        workspace_cap: Option<usize>,
        rewrite: crate::rewrite::RewriteOptions,
        prompts: [&'a str; 5],
        mock: Option<String>,
    }
    let p = &conn.gateway.prompts;
    let fp = Fp {
        version: env!("CARGO_PKG_VERSION"),
        vote_runs: cfg.vote_runs,
        workspace_cap: cfg.workspace_cap,
        rewrite: cfg.rewrite_options(),
        prompts: [p.action_node.text(), p.info_edge.text(), p.message_refine.text(), p.judge.text(), p.agent_system.text()],
        mock: conn.mock.as_ref().map(|m| m.script().to_json_pretty()),
    };
    sha_hex(&[&serde_json::to_string(&fp).expect("serializable")])
}

fn sequential(conn: &Connection) -> bool {
    conn.mock.as_ref().is_some_and(|m| m.script().requires_sequential())
}

/// Runs the full pipeline and writes its artifacts under `opts.out`.
pub fn run_prune(cfg: &PipelineConfig, conn: &Connection, opts: &RunOptions) -> Result<PipelineReport, PipelineError> {
    let started = Instant::now();
    let gw = &conn.gateway;
    let trajectories = read_trajectories(&cfg.input)?;
    let out = &opts.out;
    let state_dir = out.join("state");
    fs::create_dir_all(&state_dir).map_err(|e| io_err(&state_dir, e))?;
    let workers = if sequential(conn) { 1 } else { cfg.workers };
    let pool = thread_pool(workers)?;

    let filter_started = Instant::now();
    let filtered = filter_stage(&trajectories, cfg, gw, &pool, &state_dir)?;
    let filter_secs = filter_started.elapsed().as_secs_f64();

    let settings = ProcessSettings {
        vote_runs: cfg.vote_runs,
        graph: GraphBuildOptions { workspace_cap: cfg.workspace_cap, parallel: workers > 1 },
        rewrite: cfg.rewrite_options(),
        oracle: true,
    };
    let fp = fingerprint(cfg, conn);
    let process_started = Instant::now();
    let processed: Vec<(TrajectoryResult, bool)> = pool.install(|| {
        filtered
            .forwarded
            .par_iter()
            .map(|t| {
                let line = t.to_jsonl();
                let path = state_dir.join(format!("{}.json", sha_hex(&[&line, &fp])));
                if let Some(saved) = fs::read_to_string(&path).ok().and_then(|s| serde_json::from_str(&s).ok()) {
                    return Ok((saved, true));
                }
                let result = process_trajectory(t, gw, &settings);
                if result.outcome != Outcome::Failed {
                    write_file(&path, &serde_json::to_string(&result).expect("serializable"))?;
                }
                log::info!("{}: {:?}", t.id(), result.outcome);
                Ok((result, false))
            })
            .collect::<Result<_, PipelineError>>()
    })?;
    let process_secs = process_started.elapsed().as_secs_f64();

    let export_started = Instant::now();
    let mut report = PipelineReport {
        input_trajectories: trajectories.len(),
        filter: filtered.summary.clone(),
        resumed: processed.iter().filter(|(_, resumed)| *resumed).count(),
        ..Default::default()
    };
    let results: Vec<&TrajectoryResult> = processed.iter().map(|(r, _)| r).collect();
    let by_id: HashMap<&str, &Trajectory> = trajectories.iter().map(|t| (t.id(), t)).collect();

    let mut failures: Vec<FailureRecord> = filtered.failures.clone();
    let mut pruned_lines = Vec::new();
    let mut pruned_trajs = Vec::new();
    let mut unpruned_candidates: Vec<&Trajectory> = Vec::new();
    for r in &results {
        match r.outcome {
            Outcome::Pruned => {
                let line = r.pruned.clone().expect("pruned result carries its trajectory");
                pruned_trajs.push(crate::trajectory::parse_trajectory(&line).expect("stored trajectory parses"));
                pruned_lines.push(line);
                report.outcomes.pruned += 1;
            }
            Outcome::NoRedundancy => report.outcomes.no_redundancy += 1,
            Outcome::Discarded => report.outcomes.discarded += 1,
            Outcome::Unreachable => report.outcomes.unreachable += 1,
            Outcome::Failed => {}
        }
        if matches!(r.outcome, Outcome::NoRedundancy | Outcome::Discarded | Outcome::Unreachable) {
            unpruned_candidates.push(by_id[r.trajectory_id.as_str()]);
        }
        if let Some(f) = &r.failure {
            failures.push(f.clone());
        }
    }
    report.outcomes.failed = failures.len();
    for f in &failures {
        *report.failures.entry(f.code.clone()).or_default() += 1;
    }

    let pruned_queries: BTreeSet<String> = pruned_trajs.iter().map(|t| query_id(t.query())).collect();
    let (unpruned, overlap): (Vec<&Trajectory>, Vec<&Trajectory>) =
        unpruned_candidates.into_iter().partition(|t| !pruned_queries.contains(&query_id(t.query())));
    let unpruned: Vec<Trajectory> = unpruned.into_iter().cloned().collect();
    report.pools.pruned = pruned_trajs.len();
    report.pools.unpruned = unpruned.len();
    report.pools.overlap_dropped = overlap.len();

    let done: Vec<&&TrajectoryResult> = results.iter().filter(|r| r.outcome != Outcome::Failed).collect();
    report.rounds.input = done.iter().map(|r| r.input_rounds).sum();
    report.rounds.output = done.iter().map(|r| r.output_rounds).sum();
    report.rounds.mean_reduction = mean(done.iter().map(|r| r.round_reduction()));
    report.rounds.mean_reduction_pruned =
        mean(done.iter().filter(|r| r.outcome == Outcome::Pruned).map(|r| r.round_reduction()));
    report.tokens.input = done.iter().map(|r| r.input_tokens).sum();
    report.tokens.output = done.iter().map(|r| r.output_tokens).sum();
    report.tokens.counter = "approximately (whitespace and punctuation segments)".into();
    let seams: Vec<&SeamReport> = results.iter().flat_map(|r| &r.seams).collect();
    report.seams.total = seams.len();
    report.seams.rewritten = seams.iter().filter(|s| s.chosen.is_some()).count();
    report.seams.kept_original = seams.iter().filter(|s| s.fallback.as_deref() == Some("kept_original")).count();
    report.seams.score_fallbacks = seams.iter().filter(|s| s.fallback.as_deref() == Some("score_unavailable")).count();

    let system = gw.prompts.agent_system.text();
    for mode in &cfg.export_modes {
        let name = mode.file_name();
        let path = out.join(name);
        let summary = match export_sft(&pruned_trajs, &unpruned, *mode, system) {
            Ok(examples) => {
                write_file(&path, &jsonl(&examples))?;
                ExportSummary { examples: examples.len(), error: None }
            }
            Err(e) => {
                log::warn!("{name} not written: {e}");
                if path.exists() {
                    fs::remove_file(&path).map_err(|e| io_err(&path, e))?;
                }
                ExportSummary { examples: 0, error: Some(e.to_string()) }
            }
        };
        report.exports.insert(format!("{mode:?}").to_lowercase(), summary);
    }
    for role in LlmRole::ALL {
        report.llm_calls.insert(role.to_string(), gw.endpoint(role).stats().calls);
    }

    write_file(&out.join("pruned.jsonl"), &lines(pruned_lines))?;
    write_file(&out.join("unpruned.jsonl"), &lines(unpruned.iter().map(Trajectory::to_jsonl)))?;
    write_file(&out.join("diagnostics.jsonl"), &jsonl(results.iter().filter_map(|r| r.diagnostics.as_ref())))?;
    write_file(&out.join("rewrites.jsonl"), &jsonl(seams))?;
    write_file(&out.join("failures.jsonl"), &jsonl(&failures))?;
    if filtered.summary.applied {
        write_file(&out.join("filter.jsonl"), &filtered.records)?;
    }
    if opts.export_graphs {
        for r in &results {
            for (k, g) in r.graphs.iter().enumerate() {
                if let Some(json) = g {
                    let name = format!("{}.run{}.json", file_stem(&r.trajectory_id), k + 1);
                    write_file(&out.join("graphs").join(name), &format!("{json}\n"))?;
                }
            }
        }
    }
    write_file(&out.join("report.json"), &(serde_json::to_string_pretty(&report).expect("serializable") + "\n"))?;
    let timing = serde_json::json!({
        "filter_seconds": filter_secs,
        "process_seconds": process_secs,
        "export_seconds": export_started.elapsed().as_secs_f64(),
        "total_seconds": started.elapsed().as_secs_f64(),
    });
    write_file(&out.join("timing.json"), &serde_json::to_string_pretty(&timing).expect("serializable"))?;
    debug_assert!(report.is_conserved(), "{report:?}");
    Ok(report)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GraphRunReport {
    pub trajectories: usize,
    pub graphs_written: usize,
    pub accepted: usize,
    pub discarded: usize,
    pub unreachable: usize,
    pub failed: usize,
}

/// Builds `runs` graphs per trajectory, writes them under `graphs/` and the
/// candidate sets and vote to `graph_votes.jsonl`.
pub fn run_graph(
    input: &Path,
    runs: u32,
    conn: &Connection,
    workers: usize,
    workspace_cap: Option<usize>,
    out: &Path,
) -> Result<GraphRunReport, PipelineError> {
    if runs < 1 {
        return Err(PipelineError::Config("--runs must be at least 1".into()));
    }
    let trajectories = read_trajectories(input)?;
    let workers = if sequential(conn) { 1 } else { workers.max(1) };
    let pool = thread_pool(workers)?;
    let opts = GraphBuildOptions { workspace_cap, parallel: workers > 1 };
    type Mined = Result<(Vec<Option<String>>, VoteDiagnostics), FailureRecord>;
    let results: Vec<Mined> = pool.install(|| {
        trajectories
            .par_iter()
            .map(|t| {
                let mined = mine_runs(t, &conn.gateway, runs, &opts)?;
                let graphs = mined.iter().map(|r| r.graph.as_ref().map(|g| g.to_json())).collect();
                Ok((graphs, vote_runs(t.id(), &mined, true).1))
            })
            .collect()
    });
    let mut report = GraphRunReport { trajectories: trajectories.len(), ..Default::default() };
    let mut votes = Vec::new();
    let mut failures = Vec::new();
    for (t, r) in trajectories.iter().zip(results) {
        match r {
            Ok((graphs, diag)) => {
                for (k, g) in graphs.iter().enumerate() {
                    if let Some(json) = g {
                        let name = format!("{}.run{}.json", file_stem(t.id()), k + 1);
                        write_file(&out.join("graphs").join(name), &format!("{json}\n"))?;
                        report.graphs_written += 1;
                    }
                }
                match diag.outcome.as_str() {
                    "accepted" => report.accepted += 1,
                    "discarded" => report.discarded += 1,
                    "unreachable" => report.unreachable += 1,
                    _ => {}
                }
                votes.push(diag);
            }
            Err(f) => {
                report.failed += 1;
                failures.push(f);
            }
        }
    }
    write_file(&out.join("graph_votes.jsonl"), &jsonl(&votes))?;
    write_file(&out.join("failures.jsonl"), &jsonl(&failures))?;
    Ok(report)
}

/// Rebuilds an SFT export from `pruned.jsonl` and `unpruned.jsonl` in `out`.
pub fn run_export(out: &Path, mode: ExportMode, system: &str) -> Result<usize, PipelineError> {
    let read = |name: &str, required: bool| -> Result<Vec<Trajectory>, PipelineError> {
        let path = out.join(name);
        if !required && !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::Input(format!("{}: {e}", path.display())))?;
        parse_trajectories(&text).map_err(|(line, e)| PipelineError::Input(format!("{} line {line}: {e}", path.display())))
    };
    let pruned = read("pruned.jsonl", true)?;
    let unpruned = read("unpruned.jsonl", mode == ExportMode::Hybrid)?;
    let examples = export_sft(&pruned, &unpruned, mode, system).map_err(|e| PipelineError::Input(e.to_string()))?;
    write_file(&out.join(mode.file_name()), &jsonl(&examples))?;
    Ok(examples.len())
}
