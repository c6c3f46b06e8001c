//! Trajectory data model.
//!
//! A [`Trajectory`] is one agent run on one query: the query text followed by
//! rounds of `(thought, action, observation)`, ending with an `answer` round
//! that carries no observation. Records are stored as JSON Lines with a fixed
//! field order so that `serialize(parse(line)) == line` holds byte for byte.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrajectoryError {
    /// The record does not follow the JSONL schema (missing or mistyped field).
    #[error("schema error: {0}")]
    Schema(String),
    /// The record parses but violates a trajectory invariant.
    #[error("structure error: {0}")]
    Structure(String),
}

/// Tool vocabulary of a ReAct web agent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ActionKind {
    Search,
    Visit,
    Python,
    Answer,
    Other(String),
}

impl ActionKind {
    pub fn as_str(&self) -> &str {
        match self {
            ActionKind::Search => "search",
            ActionKind::Visit => "visit",
            ActionKind::Python => "python",
            ActionKind::Answer => "answer",
            ActionKind::Other(name) => name,
        }
    }

    pub fn is_answer(&self) -> bool {
        matches!(self, ActionKind::Answer)
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<ActionKind> for String {
    fn from(kind: ActionKind) -> String {
        kind.as_str().to_string()
    }
}

impl TryFrom<String> for ActionKind {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        Ok(match s.as_str() {
            "search" => ActionKind::Search,
            "visit" => ActionKind::Visit,
            "python" => ActionKind::Python,
            "answer" => ActionKind::Answer,
            "" => return Err("action kind must be non-empty".into()),
            other if other.chars().any(char::is_uppercase) => {
                return Err(format!("action kind `{other}` must be lowercase"))
            }
            _ => ActionKind::Other(s),
        })
    }
}

impl std::str::FromStr for ActionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionKind::try_from(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolAction {
    pub kind: ActionKind,
    /// Raw tool arguments, or the answer text for `answer`.
    pub payload: String,
}

impl ToolAction {
    pub fn new(kind: ActionKind, payload: impl Into<String>) -> Self {
        ToolAction { kind, payload: payload.into() }
    }
}

/// One observation-think-action round. `index` is 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Round {
    pub index: u32,
    pub thought: String,
    pub action: ToolAction,
    pub observation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryMeta {
    pub dataset: String,
    pub run_id: String,
    pub seed: i64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrajectory {
    query: String,
    meta: TrajectoryMeta,
    rounds: Vec<Round>,
}

/// A validated trajectory. Construction checks every invariant, so a value of
/// this type always ends in exactly one `answer` round with contiguous indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    query: String,
    meta: TrajectoryMeta,
    rounds: Vec<Round>,
}

impl Trajectory {
    pub fn new(
        query: impl Into<String>,
        meta: TrajectoryMeta,
        rounds: Vec<Round>,
    ) -> Result<Self, TrajectoryError> {
        let query = query.into();
        validate_rounds(&rounds)?;
        Ok(Trajectory { query, meta, rounds })
    }

    /// Builds a trajectory from rounds whose `index` fields are ignored and
    /// renumbered `1..=T`.
    pub fn renumbered(
        query: impl Into<String>,
        meta: TrajectoryMeta,
        rounds: impl IntoIterator<Item = Round>,
    ) -> Result<Self, TrajectoryError> {
        let rounds = rounds
            .into_iter()
            .enumerate()
            .map(|(i, mut r)| {
                r.index = i as u32 + 1;
                r
            })
            .collect();
        Trajectory::new(query, meta, rounds)
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn meta(&self) -> &TrajectoryMeta {
        &self.meta
    }

    /// Identifier used across pipeline artifacts (the record's `run_id`).
    pub fn id(&self) -> &str {
        &self.meta.run_id
    }

    pub fn rounds(&self) -> &[Round] {
        &self.rounds
    }

    /// Number of rounds, `T`, including the answer round.
    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Round with 1-based `step`.
    pub fn round(&self, step: u32) -> Option<&Round> {
        step.checked_sub(1).and_then(|i| self.rounds.get(i as usize))
    }

    pub fn answer(&self) -> &str {
        &self.rounds[self.rounds.len() - 1].action.payload
    }

    pub fn to_jsonl(&self) -> String {
        let raw = RawTrajectoryRef { query: &self.query, meta: &self.meta, rounds: &self.rounds };
        serde_json::to_string(&raw).expect("trajectory serialization is infallible")
    }
}

#[derive(Serialize)]
struct RawTrajectoryRef<'a> {
    query: &'a str,
    meta: &'a TrajectoryMeta,
    rounds: &'a [Round],
}

fn validate_rounds(rounds: &[Round]) -> Result<(), TrajectoryError> {
    let structure = |msg: String| Err(TrajectoryError::Structure(msg));
    if rounds.is_empty() {
        return structure("trajectory has no rounds".into());
    }
    let last = rounds.len() - 1;
    for (i, round) in rounds.iter().enumerate() {
        let expected = i as u32 + 1;
        if round.index != expected {
            return structure(format!("round index {} where {} was expected", round.index, expected));
        }
        let is_answer = round.action.kind.is_answer();
        if is_answer && i != last {
            return structure(format!("answer action at round {} before the final round", round.index));
        }
        if !is_answer && i == last {
            return structure("final round is not an answer action".into());
        }
        if is_answer && round.action.payload.is_empty() {
            return structure("answer payload is empty".into());
        }
        match (&round.observation, is_answer) {
            (Some(_), true) => {
                return structure(format!("answer round {} carries an observation", round.index))
            }
            (None, false) => {
                return structure(format!("tool round {} has no observation", round.index))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Parses one JSONL record.
pub fn parse_trajectory(line: &str) -> Result<Trajectory, TrajectoryError> {
    let raw: RawTrajectory =
        serde_json::from_str(line.trim_end_matches(['\n', '\r'])).map_err(|e| TrajectoryError::Schema(e.to_string()))?;
    Trajectory::new(raw.query, raw.meta, raw.rounds)
}

/// Parses every non-blank line. Errors carry the 1-based line number.
pub fn parse_trajectories(text: &str) -> Result<Vec<Trajectory>, (usize, TrajectoryError)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_trajectory(l).map_err(|e| (i + 1, e)))
        .collect()
}

pub fn serialize_trajectory(t: &Trajectory) -> String {
    t.to_jsonl()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub question: String,
    pub gold_answer: String,
    pub dataset: String,
}

impl QaRecord {
    pub fn new(
        question: impl Into<String>,
        gold_answer: impl Into<String>,
        dataset: impl Into<String>,
    ) -> Result<Self, TrajectoryError> {
        let rec = QaRecord {
            question: question.into(),
            gold_answer: gold_answer.into(),
            dataset: dataset.into(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.question.is_empty() || self.gold_answer.is_empty() {
            return Err(TrajectoryError::Schema("question and gold_answer must be non-empty".into()));
        }
        Ok(())
    }
}

/// Default number of sampled trajectories per query.
pub const DEFAULT_SAMPLES_PER_QUERY: usize = 4;

/// The `K` trajectories sampled for one query, each with its judge verdict.
#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub record: QaRecord,
    pub trajectories: Vec<(Trajectory, bool)>,
}

impl SampledBatch {
    pub fn new(record: QaRecord, trajectories: Vec<(Trajectory, bool)>) -> Result<Self, TrajectoryError> {
        if trajectories.is_empty() {
            return Err(TrajectoryError::Structure("sampled batch needs at least one trajectory".into()));
        }
        Ok(SampledBatch { record, trajectories })
    }

    pub fn k(&self) -> usize {
        self.trajectories.len()
    }

    pub fn passing(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().filter(|(_, ok)| *ok).map(|(t, _)| t)
    }
}

/// Exact pass rate `correct / total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PassRate {
    pub correct: usize,
    pub total: usize,
}

impl PassRate {
    pub fn value(self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

pub fn pass_rate(batch: &SampledBatch) -> PassRate {
    PassRate {
        correct: batch.trajectories.iter().filter(|(_, ok)| *ok).count(),
        total: batch.k(),
    }
}

/// Pass-rate window `lower < PR <= upper` that keeps a query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassRateBounds {
    pub lower_exclusive: f64,
    pub upper_inclusive: f64,
}

impl Default for PassRateBounds {
    fn default() -> Self {
        PassRateBounds { lower_exclusive: 0.0, upper_inclusive: 0.5 }
    }
}

impl PassRateBounds {
    pub fn admits(&self, pr: PassRate) -> bool {
        // Cross-multiplied so that 2/4 compares exactly against 0.5.
        let correct = pr.correct as f64;
        let total = pr.total as f64;
        correct > self.lower_exclusive * total && correct <= self.upper_inclusive * total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Drop,
}

pub fn rejection_filter(batch: &SampledBatch) -> FilterDecision {
    rejection_filter_with(batch, PassRateBounds::default())
}

pub fn rejection_filter_with(batch: &SampledBatch, bounds: PassRateBounds) -> FilterDecision {
    if bounds.admits(pass_rate(batch)) {
        FilterDecision::Keep
    } else {
        FilterDecision::Drop
    }
}

/// Tool-call rounds: every round except the terminal answer.
pub fn count_rounds(t: &Trajectory) -> usize {
    t.rounds().iter().filter(|r| !r.action.kind.is_answer()).count()
}

/// Counts tokens in a piece of text.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;

    /// Whether counts come from a real model tokenizer.
    fn is_exact(&self) -> bool {
        false
    }
}

/// Whitespace-plus-punctuation segmenter. A token is a maximal run of
/// alphanumeric or `_` characters, or a single other non-whitespace
/// character. Counts are approximate relative to any model tokenizer.
#[derive(Debug, Clone, Copy, Default)]
pub struct ApproxTokenCounter;

impl TokenCounter for ApproxTokenCounter {
    fn count(&self, text: &str) -> usize {
        segment(text).count()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Yields the tokens of `text` under the approximate segmenter.
pub fn segment(text: &str) -> impl Iterator<Item = &str> {
    let mut rest = text;
    std::iter::from_fn(move || {
        rest = rest.trim_start();
        let mut chars = rest.char_indices();
        let (_, first) = chars.next()?;
        let end = if is_word_char(first) {
            chars.find(|&(_, c)| !is_word_char(c)).map_or(rest.len(), |(i, _)| i)
        } else {
            first.len_utf8()
        };
        let (tok, tail) = rest.split_at(end);
        rest = tail;
        Some(tok)
    })
}

/// Sum of tokens over every thought, action payload and observation.
pub fn count_tokens(t: &Trajectory, counter: &dyn TokenCounter) -> usize {
    t.rounds()
        .iter()
        .map(|r| {
            counter.count(&r.thought)
                + counter.count(&r.action.payload)
                + r.observation.as_deref().map_or(0, |o| counter.count(o))
        })
        .sum()
}
