//! Supervised fine-tuning export.
//!
//! Each trajectory becomes one chat: the agent system prompt, the query as the
//! user turn, then an assistant turn per round (thought plus tool call or
//! answer) with the tool observation in between.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trajectory::{ActionKind, Round, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SftRole {
    System,
    User,
    Assistant,
    Tool,
}

impl fmt::Display for SftRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SftRole::System => "system",
            SftRole::User => "user",
            SftRole::Assistant => "assistant",
            SftRole::Tool => "tool",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMessage {
    pub role: SftRole,
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Pruned,
    Unpruned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub provenance: Provenance,
    pub query_id: String,
    pub messages: Vec<SftMessage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportMode {
    /// Pruned trajectories only.
    Eff,
    /// Pruned plus unpruned trajectories on disjoint queries.
    Hybrid,
}

impl ExportMode {
    pub fn file_name(self) -> &'static str {
        match self {
            ExportMode::Eff => "sft_eff.jsonl",
            ExportMode::Hybrid => "sft_hybrid.jsonl",
        }
    }
}

impl std::str::FromStr for ExportMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "eff" => Ok(ExportMode::Eff),
            "hybrid" => Ok(ExportMode::Hybrid),
            other => Err(format!("unknown export mode `{other}` (expected eff or hybrid)")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExportError {
    #[error("the {0} pool is empty")]
    EmptyPool(Provenance),
    #[error("query {query_id} appears in both pools")]
    QueryOverlap { query_id: String },
    #[error("example {index} is not a valid chat: {reason}")]
    InvalidExample { index: usize, reason: String },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Pruned => "pruned",
            Provenance::Unpruned => "unpruned",
        })
    }
}

/// First 16 hex digits of the SHA-256 of the query text.
pub fn query_id(query: &str) -> String {
    let digest = Sha256::digest(query.as_bytes());
    hex::encode(&digest[..8])
}

/// Assistant turn for one round.
pub fn assistant_content(round: &Round) -> String {
    let body = match &round.action.kind {
        ActionKind::Answer => format!("<answer>{}</answer>", round.action.payload),
        kind => {
            let call = serde_json::json!({"name": kind.as_str(), "arguments": round.action.payload});
            format!("<tool_call>\n{call}\n</tool_call>")
        }
    };
    format!("{}{}\n</think>\n{body}", THINK_OPEN, round.thought)
}

pub(crate) const THINK_OPEN: &str = "<think>\n";

/// Chat messages for a query and rounds in order.
pub fn chat_messages<'a>(query: &str, rounds: impl IntoIterator<Item = &'a Round>, system: &str) -> Vec<SftMessage> {
    let mut messages = vec![
        SftMessage { role: SftRole::System, content: system.to_string() },
        SftMessage { role: SftRole::User, content: query.to_string() },
    ];
    for round in rounds {
        messages.push(SftMessage { role: SftRole::Assistant, content: assistant_content(round) });
        if let Some(obs) = &round.observation {
            messages.push(SftMessage { role: SftRole::Tool, content: obs.clone() });
        }
    }
    messages
}

/// ChatML rendering, `<|im_start|>role\ncontent<|im_end|>\n` per message.
pub fn chatml(messages: &[SftMessage]) -> String {
    messages
        .iter()
        .map(|m| format!("<|im_start|>{}\n{}<|im_end|>\n", m.role, m.content))
        .collect()
}

impl SftExample {
    pub fn from_trajectory(t: &Trajectory, provenance: Provenance, system: &str) -> Self {
        SftExample { provenance, query_id: query_id(t.query()), messages: chat_messages(t.query(), t.rounds(), system) }
    }

    /// Checks the system/user opening, assistant/tool alternation and the
    /// closing answer turn.
    pub fn validate(&self) -> Result<(), String> {
        let roles: Vec<SftRole> = self.messages.iter().map(|m| m.role).collect();
        if roles.len() < 3 || roles[0] != SftRole::System || roles[1] != SftRole::User {
            return Err("must open with a system and a user message".into());
        }
        for (i, role) in roles[2..].iter().enumerate() {
            let expected = if i % 2 == 0 { SftRole::Assistant } else { SftRole::Tool };
            if *role != expected {
                return Err(format!("message {} is {role}, expected {expected}", i + 2));
            }
        }
        let last = self.messages.last().expect("non-empty");
        if last.role != SftRole::Assistant || !last.content.contains("<answer>") {
            return Err("must end with an assistant answer".into());
        }
        if self.messages[2..].iter().filter(|m| m.role == SftRole::Assistant).filter(|m| m.content.contains("<answer>")).count() != 1 {
            return Err("exactly one assistant turn may answer".into());
        }
        Ok(())
    }
}

/// Builds the dataset for `mode`.
pub fn export_sft(
    pruned: &[Trajectory],
    unpruned: &[Trajectory],
    mode: ExportMode,
    system: &str,
) -> Result<Vec<SftExample>, ExportError> {
    if pruned.is_empty() {
        return Err(ExportError::EmptyPool(Provenance::Pruned));
    }
    let mut out: Vec<SftExample> =
        pruned.iter().map(|t| SftExample::from_trajectory(t, Provenance::Pruned, system)).collect();
    if mode == ExportMode::Hybrid {
        if unpruned.is_empty() {
            return Err(ExportError::EmptyPool(Provenance::Unpruned));
        }
        let pruned_ids: BTreeSet<&str> = out.iter().map(|e| e.query_id.as_str()).collect();
        let extra: Vec<SftExample> =
            unpruned.iter().map(|t| SftExample::from_trajectory(t, Provenance::Unpruned, system)).collect();
        if let Some(e) = extra.iter().find(|e| pruned_ids.contains(e.query_id.as_str())) {
            return Err(ExportError::QueryOverlap { query_id: e.query_id.clone() });
        }
        out.extend(extra);
    }
    for (index, e) in out.iter().enumerate() {
        e.validate().map_err(|reason| ExportError::InvalidExample { index, reason })?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{ToolAction, TrajectoryMeta};

    pub(crate) fn traj(query: &str, t: u32) -> Trajectory {
        let rounds = (1..=t)
            .map(|i| Round {
                index: i,
                thought: format!("t{i}"),
                action: if i == t {
                    ToolAction::new(ActionKind::Answer, "yes")
                } else {
                    ToolAction::new(ActionKind::Search, format!("q{i}"))
                },
                observation: (i != t).then(|| format!("o{i}")),
            })
            .collect();
        Trajectory::new(query, TrajectoryMeta { run_id: query.into(), ..Default::default() }, rounds).unwrap()
    }

    #[test]
    fn message_layout() {
        let e = SftExample::from_trajectory(&traj("q", 2), Provenance::Pruned, "sys");
        let roles: Vec<_> = e.messages.iter().map(|m| m.role).collect();
        assert_eq!(roles, [SftRole::System, SftRole::User, SftRole::Assistant, SftRole::Tool, SftRole::Assistant]);
        assert_eq!(
            e.messages[2].content,
            "<think>\nt1\n</think>\n<tool_call>\n{\"name\":\"search\",\"arguments\":\"q1\"}\n</tool_call>"
        );
        assert_eq!(e.messages[4].content, "<think>\nt2\n</think>\n<answer>yes</answer>");
        e.validate().unwrap();
        let json = serde_json::to_string(&e).unwrap();
        assert!(json.starts_with(r#"{"provenance":"pruned","query_id":""#));
        let back: SftExample = serde_json::from_str(&json).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn chatml_rendering() {
        let m = vec![
            SftMessage { role: SftRole::System, content: "s".into() },
            SftMessage { role: SftRole::User, content: "u".into() },
        ];
        assert_eq!(chatml(&m), "<|im_start|>system\ns<|im_end|>\n<|im_start|>user\nu<|im_end|>\n");
    }

    #[test]
    fn query_id_is_a_sha256_prefix() {
        assert_eq!(query_id("abc"), "ba7816bf8f01cfea");
    }

    #[test]
    fn modes() {
        let pruned: Vec<_> = (0..10).map(|i| traj(&format!("p{i}"), 3)).collect();
        let unpruned: Vec<_> = (0..5).map(|i| traj(&format!("u{i}"), 2)).collect();
        let eff = export_sft(&pruned, &unpruned, ExportMode::Eff, "s").unwrap();
        assert_eq!(eff.len(), 10);
        assert!(eff.iter().all(|e| e.provenance == Provenance::Pruned));
        let hybrid = export_sft(&pruned, &unpruned, ExportMode::Hybrid, "s").unwrap();
        assert_eq!(hybrid.len(), 15);
        assert_eq!(hybrid.iter().filter(|e| e.provenance == Provenance::Unpruned).count(), 5);

        let overlapping = vec![traj("p3", 2)];
        assert_eq!(
            export_sft(&pruned, &overlapping, ExportMode::Hybrid, "s"),
            Err(ExportError::QueryOverlap { query_id: query_id("p3") })
        );
        assert_eq!(export_sft(&[], &unpruned, ExportMode::Eff, "s"), Err(ExportError::EmptyPool(Provenance::Pruned)));
        assert_eq!(
            export_sft(&pruned, &[], ExportMode::Hybrid, "s"),
            Err(ExportError::EmptyPool(Provenance::Unpruned))
        );
    }

    #[test]
    fn validate_rejects_broken_alternation() {
        let mut e = SftExample::from_trajectory(&traj("q", 3), Provenance::Unpruned, "s");
        e.messages.swap(3, 4);
        assert!(e.validate().is_err());
        let mut e = SftExample::from_trajectory(&traj("q", 3), Provenance::Unpruned, "s");
        e.messages.pop();
        assert!(e.validate().is_err());
    }
}
