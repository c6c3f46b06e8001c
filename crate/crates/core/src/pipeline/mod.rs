//! End-to-end orchestration: pass-rate filtering, repeated graph construction
//! and mining, voting, pruning, rewriting and export.
//!
//! Each trajectory ends in exactly one bucket:
//!
//! * `pruned`: the vote accepted a strict subset of rounds,
//! * `no_redundancy`: the vote accepted every round,
//! * `discarded`: the three mined sets disagreed,
//! * `unreachable`: at least two graphs could not connect the query to the answer,
//! * `failed`: an endpoint or rewrite failure quarantined the trajectory.
//!
//! The middle three feed the unpruned pool used for hybrid export.

mod config;
mod report;
mod run;

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError};
use crate::graph::{build_state_graph, extract_action_nodes, GraphBuildOptions, GraphError, StateGraph};
use crate::mining::{brute_force_oracle, mine_mndag, vote_candidates, MiningError, NecessarySet, VoteOutcome, ORACLE_MAX_ACTIONS};
use crate::rewrite::{assemble_pruned, rewrite_seams, RewriteError, RewriteOptions, SeamReport};
use crate::trajectory::{count_rounds, count_tokens, ApproxTokenCounter, Trajectory};

pub use config::{connect, Connection, EndpointsConfig, ForwardPolicy, PipelineConfig, RewriteSection};
pub use report::{ExportSummary, FilterSummary, OutcomeCounts, PipelineReport, PoolCounts, RoundStats, SeamStats, TokenStats};
pub use run::{run_export, run_graph, run_prune, GraphRunReport, RunOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("endpoint failure: {0}")]
    Endpoint(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Input(_) => 3,
            PipelineError::Endpoint(_) => 4,
            PipelineError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pruned,
    NoRedundancy,
    Discarded,
    Unreachable,
    Failed,
}

/// One line of `diagnostics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteDiagnostics {
    pub trajectory_id: String,
    /// Action steps mined from each graph; `null` for runs without a usable set.
    pub candidates: Vec<Option<Vec<u32>>>,
    /// `accepted`, `discarded`, `unreachable`, or `not_voted` when fewer or more
    /// than three runs were made.
    pub outcome: String,
    #[serde(rename = "final")]
    pub final_steps: Option<Vec<u32>>,
    /// Exhaustive minimum closure on the graph behind the final set, when small enough.
    pub oracle: Option<Vec<u32>>,
    pub d_sink: Option<u32>,
    /// Why each run produced no set, if it did not.
    pub run_errors: Vec<Option<String>>,
}

/// One line of `failures.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub trajectory_id: String,
    pub stage: String,
    pub code: String,
    pub message: String,
}

impl FailureRecord {
    fn from_gateway(id: &str, stage: &str, e: &GatewayError, message: String) -> Self {
        FailureRecord { trajectory_id: id.into(), stage: stage.into(), code: gateway_code(e).into(), message }
    }

    /// The failure came from an endpoint being unavailable rather than from
    /// the data.
    pub fn is_endpoint_failure(&self) -> bool {
        matches!(self.code.as_str(), "transport" | "rate_limited" | "auth")
    }
}

fn gateway_code(e: &GatewayError) -> &'static str {
    match e {
        GatewayError::Transport(_) => "transport",
        GatewayError::RateLimited(_) => "rate_limited",
        GatewayError::Auth(_) => "auth",
        GatewayError::MalformedResponse(_) => "malformed",
        GatewayError::UnsupportedEndpoint(_) => "unsupported",
        GatewayError::InvalidRequest(_) => "invalid_request",
        GatewayError::Script(_) => "mock_script",
    }
}

/// Everything the pipeline keeps about one processed trajectory. Completed
/// results are persisted so reruns can skip them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryResult {
    pub trajectory_id: String,
    pub outcome: Outcome,
    pub input_rounds: usize,
    pub output_rounds: usize,
    pub input_tokens: usize,
    pub output_tokens: usize,
    pub diagnostics: Option<VoteDiagnostics>,
    /// Pruned trajectory JSONL line.
    pub pruned: Option<String>,
    pub seams: Vec<SeamReport>,
    /// Canonical JSON of each run's graph, `None` where construction failed.
    pub graphs: Vec<Option<String>>,
    pub failure: Option<FailureRecord>,
}

impl TrajectoryResult {
    fn failed(t: &Trajectory, failure: FailureRecord) -> Self {
        TrajectoryResult {
            trajectory_id: t.id().to_string(),
            outcome: Outcome::Failed,
            input_rounds: count_rounds(t),
            output_rounds: count_rounds(t),
            input_tokens: count_tokens(t, &ApproxTokenCounter),
            output_tokens: count_tokens(t, &ApproxTokenCounter),
            diagnostics: None,
            pruned: None,
            seams: Vec::new(),
            graphs: Vec::new(),
            failure: Some(failure),
        }
    }

    /// Fraction of tool-call rounds removed.
    pub fn round_reduction(&self) -> f64 {
        if self.input_rounds == 0 {
            0.0
        } else {
            (self.input_rounds - self.output_rounds) as f64 / self.input_rounds as f64
        }
    }
}

/// Settings for [`process_trajectory`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessSettings {
    pub vote_runs: u32,
    pub graph: GraphBuildOptions,
    pub rewrite: RewriteOptions,
    /// Run the exhaustive oracle for diagnostics on graphs with at most
    /// [`ORACLE_MAX_ACTIONS`] actions.
    pub oracle: bool,
}

/// Result of one graph construction plus mining run.
#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Mined(NecessarySet),
    Unreachable,
    /// The graph was unusable (malformed extractor output or a failed
    /// structural check); the run agrees with nothing.
    Rejected(String),
}

/// A run's graph (if built) and what mining made of it.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedRun {
    pub graph: Option<StateGraph>,
    pub outcome: RunOutcome,
}

/// Phase 1 once, then `runs` independent Phase 2 constructions, each mined.
/// Endpoint failures abort with a failure record.
pub fn mine_runs(
    t: &Trajectory,
    gw: &Gateway,
    runs: u32,
    opts: &GraphBuildOptions,
) -> Result<Vec<MinedRun>, FailureRecord> {
    let id = t.id();
    let actions = extract_action_nodes(t, gw, opts).map_err(|e| graph_failure(id, "action_nodes", &e))?;
    let one = |run: u32| -> Result<MinedRun, FailureRecord> {
        match build_state_graph(t, &actions, gw, run, opts) {
            Ok(g) => {
                let outcome = match mine_mndag(&g) {
                    Ok(set) => RunOutcome::Mined(set),
                    Err(MiningError::UnreachableSink) => RunOutcome::Unreachable,
                    Err(e) => RunOutcome::Rejected(e.to_string()),
                };
                Ok(MinedRun { graph: Some(g), outcome })
            }
            Err(e @ (GraphError::Malformed { .. } | GraphError::DanglingSupport { .. })) => {
                Ok(MinedRun { graph: None, outcome: RunOutcome::Rejected(e.to_string()) })
            }
            Err(e) => Err(graph_failure(id, "graph", &e)),
        }
    };
    if opts.parallel {
        (1..=runs).into_par_iter().map(one).collect()
    } else {
        (1..=runs).map(one).collect()
    }
}

fn graph_failure(id: &str, stage: &str, e: &GraphError) -> FailureRecord {
    match e.gateway_error() {
        Some(g) => FailureRecord::from_gateway(id, stage, g, e.to_string()),
        None => FailureRecord { trajectory_id: id.into(), stage: stage.into(), code: "graph".into(), message: e.to_string() },
    }
}

/// Candidate sets, vote and diagnostics for mined runs.
pub fn vote_runs(id: &str, runs: &[MinedRun], oracle: bool) -> (Option<NecessarySet>, VoteDiagnostics) {
    let candidates: Vec<Option<NecessarySet>> = runs
        .iter()
        .map(|r| match &r.outcome {
            RunOutcome::Mined(s) => Some(s.clone()),
            _ => None,
        })
        .collect();
    let run_errors = runs
        .iter()
        .map(|r| match &r.outcome {
            RunOutcome::Mined(_) => None,
            RunOutcome::Unreachable => Some(MiningError::UnreachableSink.to_string()),
            RunOutcome::Rejected(m) => Some(m.clone()),
        })
        .collect();
    let unreachable = runs.iter().filter(|r| r.outcome == RunOutcome::Unreachable).count();
    let mut diag = VoteDiagnostics {
        trajectory_id: id.to_string(),
        candidates: candidates.iter().map(|c| c.as_ref().map(NecessarySet::steps)).collect(),
        outcome: String::new(),
        final_steps: None,
        oracle: None,
        d_sink: candidates.iter().flatten().next().map(|c| c.d_sink),
        run_errors,
    };
    let Ok(three) = <[Option<NecessarySet>; 3]>::try_from(candidates) else {
        diag.outcome = "not_voted".into();
        return (None, diag);
    };
    if unreachable >= 2 {
        diag.outcome = "unreachable".into();
        return (None, diag);
    }
    let vote = vote_candidates(three);
    match vote.outcome {
        VoteOutcome::Discarded => {
            diag.outcome = "discarded".into();
            (None, diag)
        }
        VoteOutcome::Accepted { final_set } => {
            diag.outcome = "accepted".into();
            diag.final_steps = Some(final_set.steps());
            diag.d_sink = Some(final_set.d_sink);
            if oracle {
                let source = runs.iter().find(|r| matches!(&r.outcome, RunOutcome::Mined(s) if s.action_steps == final_set.action_steps));
                diag.oracle = source
                    .and_then(|r| r.graph.as_ref())
                    .filter(|g| g.actions.len() <= ORACLE_MAX_ACTIONS)
                    .and_then(|g| brute_force_oracle(g).ok())
                    .map(|s| s.into_iter().collect());
            }
            (Some(final_set), diag)
        }
    }
}

/// Runs one trajectory through graph construction, voting, pruning and
/// rewriting.
pub fn process_trajectory(t: &Trajectory, gw: &Gateway, settings: &ProcessSettings) -> TrajectoryResult {
    let id = t.id();
    let runs = match mine_runs(t, gw, settings.vote_runs, &settings.graph) {
        Ok(runs) => runs,
        Err(failure) => return TrajectoryResult::failed(t, failure),
    };
    let graphs = runs.iter().map(|r| r.graph.as_ref().map(StateGraph::to_json)).collect();
    let (accepted, diag) = vote_runs(id, &runs, settings.oracle);
    let counter = ApproxTokenCounter;
    let mut result = TrajectoryResult {
        trajectory_id: id.to_string(),
        outcome: Outcome::Discarded,
        input_rounds: count_rounds(t),
        output_rounds: count_rounds(t),
        input_tokens: count_tokens(t, &counter),
        output_tokens: count_tokens(t, &counter),
        diagnostics: None,
        pruned: None,
        seams: Vec::new(),
        graphs,
        failure: None,
    };
    result.outcome = match (diag.outcome.as_str(), &accepted) {
        ("unreachable", _) => Outcome::Unreachable,
        (_, None) => Outcome::Discarded,
        (_, Some(set)) if set.len() == t.len() => Outcome::NoRedundancy,
        (_, Some(set)) => match prune(t, &set.action_steps, gw, &settings.rewrite) {
            Ok((pruned, seams)) => {
                result.output_rounds = count_rounds(&pruned);
                result.output_tokens = count_tokens(&pruned, &counter);
                result.pruned = Some(pruned.to_jsonl());
                result.seams = seams;
                Outcome::Pruned
            }
            Err(e) => {
                let failure = match e.gateway_error() {
                    Some(g) => FailureRecord::from_gateway(id, "rewrite", g, e.to_string()),
                    None => FailureRecord {
                        trajectory_id: id.into(),
                        stage: "rewrite".into(),
                        code: "rewrite".into(),
                        message: e.to_string(),
                    },
                };
                result.failure = Some(failure);
                Outcome::Failed
            }
        },
    };
    result.diagnostics = Some(diag);
    result
}

fn prune(
    t: &Trajectory,
    steps: &BTreeSet<u32>,
    gw: &Gateway,
    opts: &RewriteOptions,
) -> Result<(Trajectory, Vec<SeamReport>), RewriteError> {
    let assembled = assemble_pruned(t, steps)?;
    let (rewritten, seams) = rewrite_seams(assembled, t, gw, opts)?;
    Ok((rewritten.to_trajectory()?, seams))
}
