//! Turning an accepted necessary set back into a trajectory.
//!
//! Kept rounds are copied verbatim. Wherever two kept rounds were not adjacent
//! in the original (and before the first kept round when it is not round 1),
//! the thought of the later round no longer follows from what precedes it.
//! Those *seams* get three candidate rewrites; the one the scorer finds least
//! surprising in context wins.

mod sft;

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatMessage, Gateway, GatewayError, LlmRole, Phase, RequestTag};
use crate::trajectory::{segment, Round, Trajectory, TrajectoryError, TrajectoryMeta};

pub use sft::{
    assistant_content, chat_messages, chatml, export_sft, query_id, ExportError, ExportMode, Provenance, SftExample,
    SftMessage, SftRole,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewriteError {
    #[error("necessary set lacks the answer step {0}")]
    MissingAnswer(u32),
    #[error("step {0} does not exist in the trajectory")]
    UnknownStep(u32),
    #[error("rewriter reply for step {step} is malformed: {source}")]
    Malformed { step: u32, source: GatewayError },
    #[error("rewriter call for step {step} failed: {source}")]
    Gateway { step: u32, source: GatewayError },
    #[error("scorer cannot rate candidates for step {step}: {source}")]
    ScoreUnavailable { step: u32, source: GatewayError },
    #[error("every candidate for step {step} repeats skipped observations")]
    AllDisqualified { step: u32 },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

impl RewriteError {
    pub fn gateway_error(&self) -> Option<&GatewayError> {
        match self {
            RewriteError::Malformed { source, .. }
            | RewriteError::Gateway { source, .. }
            | RewriteError::ScoreUnavailable { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// A trajectory reduced to a subset of its rounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrunedTrajectory {
    pub query: String,
    pub meta: TrajectoryMeta,
    /// Original step and round, in increasing step order. Round indices keep
    /// their original values.
    pub kept: Vec<(u32, Round)>,
    /// Positions in `kept` whose thought follows a gap.
    pub seams: BTreeSet<usize>,
    /// Positions whose thought has been replaced.
    pub rewritten: BTreeSet<usize>,
}

impl PrunedTrajectory {
    pub fn steps(&self) -> Vec<u32> {
        self.kept.iter().map(|(s, _)| *s).collect()
    }

    /// The pruned rounds renumbered `1..=L`.
    pub fn to_trajectory(&self) -> Result<Trajectory, TrajectoryError> {
        Trajectory::renumbered(self.query.clone(), self.meta.clone(), self.kept.iter().map(|(_, r)| r.clone()))
    }
}

/// Positions `p` of `steps` with `steps[p]` not directly after its kept
/// predecessor. Position 0 is a seam when the first kept step is not 1.
pub fn seam_positions(steps: &[u32]) -> BTreeSet<usize> {
    steps
        .iter()
        .enumerate()
        .filter(|&(p, &s)| if p == 0 { s > 1 } else { s != steps[p - 1] + 1 })
        .map(|(p, _)| p)
        .collect()
}

pub fn assemble_pruned(t: &Trajectory, steps: &BTreeSet<u32>) -> Result<PrunedTrajectory, RewriteError> {
    let last = t.len() as u32;
    if let Some(&bad) = steps.iter().find(|&&s| s == 0 || s > last) {
        return Err(RewriteError::UnknownStep(bad));
    }
    if !steps.contains(&last) {
        return Err(RewriteError::MissingAnswer(last));
    }
    let kept: Vec<(u32, Round)> = steps.iter().map(|&s| (s, t.round(s).expect("checked").clone())).collect();
    let order: Vec<u32> = kept.iter().map(|(s, _)| *s).collect();
    Ok(PrunedTrajectory {
        query: t.query().to_string(),
        meta: t.meta().clone(),
        kept,
        seams: seam_positions(&order),
        rewritten: BTreeSet::new(),
    })
}

/// Everything the rewriter sees for one seam.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteTask {
    pub position: usize,
    pub step: u32,
    pub dialogue_history: Vec<Round>,
    pub skipped: Vec<Round>,
    pub original_thought: String,
}

/// The rewrite task for the seam at `position`, built against the current kept rounds.
pub fn rewrite_task(p: &PrunedTrajectory, original: &Trajectory, position: usize) -> RewriteTask {
    let (step, round) = &p.kept[position];
    let gap_start = if position == 0 { 1 } else { p.kept[position - 1].0 + 1 };
    RewriteTask {
        position,
        step: *step,
        dialogue_history: p.kept[..position].iter().map(|(_, r)| r.clone()).collect(),
        skipped: (gap_start..*step).filter_map(|s| original.round(s).cloned()).collect(),
        original_thought: round.thought.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllDisqualifiedPolicy {
    #[default]
    KeepOriginal,
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreUnavailablePolicy {
    #[default]
    FirstCandidate,
    Fail,
}

fn default_candidates() -> u32 {
    3
}
fn default_span() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewriteOptions {
    #[serde(default = "default_candidates")]
    pub candidates: u32,
    /// Overrides the rewriter endpoint's temperature.
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub on_all_disqualified: AllDisqualifiedPolicy,
    #[serde(default)]
    pub on_score_unavailable: ScoreUnavailablePolicy,
    /// Length in tokens of the verbatim spans the lexical screen looks for.
    #[serde(default = "default_span")]
    pub screen_span: usize,
}

impl Default for RewriteOptions {
    fn default() -> Self {
        RewriteOptions {
            candidates: default_candidates(),
            temperature: None,
            on_all_disqualified: AllDisqualifiedPolicy::default(),
            on_score_unavailable: ScoreUnavailablePolicy::default(),
            screen_span: default_span(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub thought: String,
    pub disqualified: bool,
    pub avg_nll: Option<f64>,
}

/// What happened at one seam, for `rewrites.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeamReport {
    pub trajectory_id: String,
    pub position: usize,
    pub step: u32,
    pub candidates: Vec<CandidateReport>,
    /// 1-based index of the installed candidate, `None` if the original stayed.
    pub chosen: Option<u32>,
    pub fallback: Option<String>,
}

#[derive(Deserialize)]
struct RefinedThought {
    thought: String,
}

fn token_windows(text: &str, span: usize) -> Vec<Vec<&str>> {
    let tokens: Vec<&str> = segment(text).collect();
    if span == 0 || tokens.len() < span {
        return Vec::new();
    }
    tokens.windows(span).map(<[&str]>::to_vec).collect()
}

/// Flags text that repeats `span` consecutive tokens of a skipped
/// observation. Spans that also occur in the kept history are allowed.
pub struct LexicalScreen {
    span: usize,
    forbidden: HashSet<Vec<String>>,
}

impl LexicalScreen {
    pub fn new(task: &RewriteTask, query: &str, span: usize) -> Self {
        let mut allowed: HashSet<Vec<&str>> = token_windows(query, span).into_iter().collect();
        for r in &task.dialogue_history {
            allowed.extend(token_windows(&r.thought, span));
            allowed.extend(token_windows(&r.action.payload, span));
            if let Some(o) = &r.observation {
                allowed.extend(token_windows(o, span));
            }
        }
        let forbidden = task
            .skipped
            .iter()
            .filter_map(|r| r.observation.as_deref())
            .flat_map(|o| token_windows(o, span))
            .filter(|w| !allowed.contains(w))
            .map(|w| w.into_iter().map(str::to_string).collect())
            .collect();
        LexicalScreen { span, forbidden }
    }

    pub fn rejects(&self, text: &str) -> bool {
        !self.forbidden.is_empty()
            && token_windows(text, self.span)
                .into_iter()
                .any(|w| self.forbidden.contains(&w.into_iter().map(str::to_string).collect::<Vec<_>>()))
    }
}

fn render_round(r: &Round) -> String {
    let mut s = format!("Thought: {}\nAction: {}({})", r.thought, r.action.kind, r.action.payload);
    if let Some(o) = &r.observation {
        s.push_str("\nObservation: ");
        s.push_str(o);
    }
    s
}

fn render_rounds(rounds: &[Round]) -> String {
    if rounds.is_empty() {
        return "(none)".into();
    }
    rounds.iter().map(render_round).collect::<Vec<_>>().join("\n\n")
}

/// ChatML text up to the opening of the thought at `position`, formatted as
/// in the exported SFT data.
pub fn scoring_prefix(p: &PrunedTrajectory, position: usize, system: &str) -> String {
    let messages = chat_messages(&p.query, p.kept[..position].iter().map(|(_, r)| r), system);
    format!("{}<|im_start|>assistant\n{}", chatml(&messages), sft::THINK_OPEN)
}

/// Rewrites every seam in order. Later seams see earlier rewrites in their
/// history.
pub fn rewrite_seams(
    mut p: PrunedTrajectory,
    original: &Trajectory,
    gw: &Gateway,
    opts: &RewriteOptions,
) -> Result<(PrunedTrajectory, Vec<SeamReport>), RewriteError> {
    let system = gw.prompts.agent_system.text().to_string();
    let temperature = opts.temperature.unwrap_or_else(|| gw.rewriter.temperature());
    let id = p.meta.run_id.clone();
    let mut reports = Vec::new();
    for position in p.seams.clone() {
        let task = rewrite_task(&p, original, position);
        let step = task.step;
        let round = &p.kept[position].1;
        let prompt = gw.prompts.message_refine.render(&[
            ("dialogue_history", &format!("Question: {}\n\n{}", p.query, render_rounds(&task.dialogue_history))),
            ("skipped_messages", &render_rounds(&task.skipped)),
            ("current_action", &format!("{}({})", round.action.kind, round.action.payload)),
            ("original_thought", &task.original_thought),
        ]);
        let messages = [ChatMessage::user(prompt)];
        let screen = LexicalScreen::new(&task, &p.query, opts.screen_span);
        let prefix = scoring_prefix(&p, position, &system);

        let mut candidates = Vec::new();
        for c in 1..=opts.candidates {
            let tag = RequestTag::new(LlmRole::Rewriter, Phase::Rewrite, &id).step(step).candidate(c);
            let refined: RefinedThought = gw.rewriter.complete_json(&messages, temperature, &tag).map_err(|e| match e {
                GatewayError::MalformedResponse(_) => RewriteError::Malformed { step, source: e },
                other => RewriteError::Gateway { step, source: other },
            })?;
            let thought = refined.thought.trim().to_string();
            let disqualified = thought.is_empty() || screen.rejects(&thought);
            candidates.push(CandidateReport { thought, disqualified, avg_nll: None });
        }

        let mut fallback = None;
        let mut score_failed = false;
        for (i, cand) in candidates.iter_mut().enumerate() {
            if cand.disqualified || score_failed {
                continue;
            }
            let tag = RequestTag::new(LlmRole::Scorer, Phase::Score, &id).step(step).candidate(i as u32 + 1);
            match gw.scorer.score_logprob(&prefix, &cand.thought, &tag) {
                Ok(score) => cand.avg_nll = Some(score.avg_nll),
                Err(e @ GatewayError::UnsupportedEndpoint(_)) => match opts.on_score_unavailable {
                    ScoreUnavailablePolicy::Fail => return Err(RewriteError::ScoreUnavailable { step, source: e }),
                    ScoreUnavailablePolicy::FirstCandidate => {
                        log::warn!("{id} step {step}: {e}; installing the first eligible candidate");
                        fallback = Some("score_unavailable".to_string());
                        score_failed = true;
                    }
                },
                Err(e) => return Err(RewriteError::Gateway { step, source: e }),
            }
        }

        let chosen = if score_failed {
            candidates.iter().position(|c| !c.disqualified)
        } else {
            candidates
                .iter()
                .enumerate()
                .filter_map(|(i, c)| c.avg_nll.map(|s| (i, s)))
                .fold(None, |best: Option<(usize, f64)>, (i, s)| match best {
                    Some((_, b)) if b <= s => best,
                    _ => Some((i, s)),
                })
                .map(|(i, _)| i)
        };
        match chosen {
            Some(i) => {
                p.kept[position].1.thought = candidates[i].thought.clone();
                p.rewritten.insert(position);
            }
            None => match opts.on_all_disqualified {
                AllDisqualifiedPolicy::Fail => return Err(RewriteError::AllDisqualified { step }),
                AllDisqualifiedPolicy::KeepOriginal => {
                    log::warn!("{id} step {step}: every candidate was disqualified; keeping the original thought");
                    fallback = Some("kept_original".to_string());
                }
            },
        }
        reports.push(SeamReport {
            trajectory_id: id.clone(),
            position,
            step,
            candidates,
            chosen: chosen.map(|i| i as u32 + 1),
            fallback,
        });
    }
    Ok((p, reports))
}
