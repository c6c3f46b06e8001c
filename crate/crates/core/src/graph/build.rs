//! Two-phase graph construction driven by the extractor model.
//!
//! Phase 1 summarizes every turn into an [`ActionNode`]; turns are independent
//! and may be summarized concurrently. Phase 2 walks the snippets
//! `(A_k, o_k, A_{k+1})` for `k = 1..T-1` in order, decomposing each
//! observation into information units against a growing [`Workspace`] and
//! linking the next action to the information it relied on.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ActionNode, InfoNode, NodeRef, StateGraph};
use crate::gateway::{ChatMessage, Gateway, GatewayError, LlmRole, Phase, RequestTag};
use crate::trajectory::{Round, Trajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("extractor reply for step {step} is malformed: {source}")]
    Malformed { step: u32, source: GatewayError },
    #[error("extractor call for step {step} failed: {source}")]
    Gateway { step: u32, source: GatewayError },
    #[error("extractor cited unknown information `{reference}` at step {step}")]
    DanglingSupport { step: u32, reference: String },
    #[error("action nodes do not line up with the trajectory rounds")]
    Misaligned,
}

impl GraphError {
    fn from_gateway(step: u32, e: GatewayError) -> Self {
        match e {
            GatewayError::MalformedResponse(_) => GraphError::Malformed { step, source: e },
            other => GraphError::Gateway { step, source: other },
        }
    }

    pub fn gateway_error(&self) -> Option<&GatewayError> {
        match self {
            GraphError::Malformed { source, .. } | GraphError::Gateway { source, .. } => Some(source),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphBuildOptions {
    /// Number of most recent info nodes shown to the extractor besides `I_0`.
    /// `None` shows the whole workspace.
    pub workspace_cap: Option<usize>,
    /// Summarize Phase 1 turns concurrently.
    pub parallel: bool,
}

#[derive(Debug, Deserialize)]
struct TurnSummary {
    #[serde(default)]
    #[allow(dead_code)]
    action: Option<String>,
    goal: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoUnit {
    pub statement: String,
    #[serde(rename = "match", default)]
    pub matched: Option<u32>,
}

/// An existing info id, or `"u<k>"` for the k-th unit of the same reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SupportRef {
    Existing(u32),
    Local(String),
}

impl SupportRef {
    fn describe(&self) -> String {
        match self {
            SupportRef::Existing(id) => id.to_string(),
            SupportRef::Local(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorTurnOutput {
    #[serde(default)]
    pub info_units: Vec<InfoUnit>,
    #[serde(default)]
    pub supports_next: Vec<SupportRef>,
    #[serde(default)]
    pub next_unsupported: bool,
}

/// The info nodes visible to the extractor. Starts as `{I_0}` and only grows.
#[derive(Debug, Clone, PartialEq)]
pub struct Workspace {
    nodes: Vec<(u32, String)>,
}

impl Workspace {
    pub fn new(query: &str) -> Self {
        Workspace { nodes: vec![(0, query.to_string())] }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.nodes.iter().any(|(i, _)| *i == id)
    }

    fn push(&mut self, id: u32, statement: &str) {
        self.nodes.push((id, statement.to_string()));
    }

    fn find_statement(&self, statement: &str) -> Option<u32> {
        let key = normalize(statement);
        self.nodes.iter().find(|(_, s)| normalize(s) == key).map(|(i, _)| *i)
    }

    /// Text listing of `I_0` plus the `cap` most recent nodes.
    pub fn render(&self, cap: Option<usize>) -> String {
        let skip = match cap {
            Some(c) if self.nodes.len() > c + 1 => self.nodes.len() - c,
            _ => 1,
        };
        std::iter::once(&self.nodes[0])
            .chain(self.nodes.iter().skip(skip))
            .map(|(id, s)| format!("{id}: {s}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .trim_end_matches('.')
        .to_lowercase()
}

fn render_call(round: &Round) -> String {
    format!("{}({})", round.action.kind, round.action.payload)
}

fn render_round(round: &Round, with_observation: bool) -> String {
    let mut s = format!("Step {}\nThought: {}\nAction: {}", round.index, round.thought, render_call(round));
    if with_observation {
        if let Some(obs) = &round.observation {
            s.push_str("\nObservation: ");
            s.push_str(obs);
        }
    }
    s
}

fn describe_action(node: &ActionNode, round: &Round) -> String {
    format!("[{}] {} | call: {}", node.kind, node.goal, render_call(round))
}

/// Phase 1: one action node per round. The trajectory decides each node's
/// kind; the extractor only supplies the goal.
pub fn extract_action_nodes(
    t: &Trajectory,
    gw: &Gateway,
    opts: &GraphBuildOptions,
) -> Result<Vec<ActionNode>, GraphError> {
    let summarize = |round: &Round| -> Result<ActionNode, GraphError> {
        let step = round.index;
        let history = t.rounds()[..step as usize - 1]
            .iter()
            .map(|r| render_round(r, true))
            .collect::<Vec<_>>()
            .join("\n\n");
        let prompt = gw.prompts.action_node.render(&[
            ("query", t.query()),
            ("history", if history.is_empty() { "(none)" } else { &history }),
            ("current_turn", &render_round(round, false)),
            ("step", &step.to_string()),
        ]);
        let tag = RequestTag::new(LlmRole::Extractor, Phase::ActionSummary, t.id()).step(step);
        let summary: TurnSummary = gw
            .extractor
            .complete_json(&[ChatMessage::user(prompt)], gw.extractor.temperature(), &tag)
            .map_err(|e| GraphError::from_gateway(step, e))?;
        Ok(ActionNode { step, kind: round.action.kind.clone(), goal: summary.goal })
    };
    if opts.parallel {
        t.rounds().par_iter().map(summarize).collect()
    } else {
        t.rounds().iter().map(summarize).collect()
    }
}

/// Phase 2: builds the full graph. `run` distinguishes repeated constructions
/// of the same trajectory.
pub fn build_state_graph(
    t: &Trajectory,
    actions: &[ActionNode],
    gw: &Gateway,
    run: u32,
    opts: &GraphBuildOptions,
) -> Result<StateGraph, GraphError> {
    if actions.len() != t.len() || actions.iter().zip(t.rounds()).any(|(a, r)| a.step != r.index) {
        return Err(GraphError::Misaligned);
    }
    let mut graph = StateGraph::seeded(t.query(), actions.to_vec());
    let mut workspace = Workspace::new(t.query());

    for k in 1..t.len() as u32 {
        let round = t.round(k).expect("aligned");
        let next = t.round(k + 1).expect("aligned");
        let prompt = gw.prompts.info_edge.render(&[
            ("query", t.query()),
            ("workspace", &workspace.render(opts.workspace_cap)),
            ("step", &k.to_string()),
            ("next_step", &(k + 1).to_string()),
            ("current_action", &describe_action(&actions[k as usize - 1], round)),
            ("observation", round.observation.as_deref().unwrap_or("")),
            ("next_action", &describe_action(&actions[k as usize], next)),
        ]);
        let tag = RequestTag::new(LlmRole::Extractor, Phase::InfoLink, t.id()).step(k).run(run);
        let mut messages = vec![ChatMessage::user(prompt)];
        let temperature = gw.extractor.temperature();

        let mut output: ExtractorTurnOutput = gw
            .extractor
            .complete_json(&messages, temperature, &tag)
            .map_err(|e| GraphError::from_gateway(k, e))?;
        if let Err(problem) = check_turn(&output, &graph) {
            log::debug!("{} step {k}: {problem}; asking extractor to repair", t.id());
            messages.push(ChatMessage::assistant(
                serde_json::to_string(&output).expect("turn output serializes"),
            ));
            messages.push(ChatMessage::user(format!(
                "{problem}. Only cite ids listed in the workspace or units from your own list as \"u0\", \"u1\", ... \
                 Reply again with one ```json fenced block."
            )));
            let tag = RequestTag { repair: true, ..tag };
            output = gw
                .extractor
                .complete_json(&messages, temperature, &tag)
                .map_err(|e| GraphError::from_gateway(k, e))?;
            if let Err(problem) = check_turn(&output, &graph) {
                return Err(match problem {
                    TurnProblem::Dangling(reference) => GraphError::DanglingSupport { step: k, reference },
                    other => GraphError::Malformed {
                        step: k,
                        source: GatewayError::MalformedResponse(other.to_string()),
                    },
                });
            }
        }
        apply_turn(&mut graph, &mut workspace, k, &output);
    }
    Ok(graph)
}

#[derive(Debug)]
enum TurnProblem {
    Dangling(String),
    EmptyStatement,
    NoSupport,
}

impl std::fmt::Display for TurnProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TurnProblem::Dangling(r) => write!(f, "reference `{r}` does not name known information"),
            TurnProblem::EmptyStatement => f.write_str("an information unit has an empty statement"),
            TurnProblem::NoSupport => {
                f.write_str("supports_next is empty but next_unsupported is not set")
            }
        }
    }
}

fn local_index(s: &str) -> Option<usize> {
    s.strip_prefix('u').and_then(|n| n.parse().ok())
}

fn check_turn(out: &ExtractorTurnOutput, graph: &StateGraph) -> Result<(), TurnProblem> {
    for unit in &out.info_units {
        if unit.statement.trim().is_empty() {
            return Err(TurnProblem::EmptyStatement);
        }
        if let Some(id) = unit.matched {
            if graph.info(id).is_none() {
                return Err(TurnProblem::Dangling(id.to_string()));
            }
        }
    }
    for s in &out.supports_next {
        let ok = match s {
            SupportRef::Existing(id) => graph.info(*id).is_some(),
            SupportRef::Local(l) => local_index(l).is_some_and(|i| i < out.info_units.len()),
        };
        if !ok {
            return Err(TurnProblem::Dangling(s.describe()));
        }
    }
    if out.supports_next.is_empty() && !out.next_unsupported {
        return Err(TurnProblem::NoSupport);
    }
    Ok(())
}

fn apply_turn(graph: &mut StateGraph, workspace: &mut Workspace, k: u32, out: &ExtractorTurnOutput) {
    let producer = NodeRef::Action(k);
    let mut local: BTreeMap<usize, u32> = BTreeMap::new();
    for (i, unit) in out.info_units.iter().enumerate() {
        let id = match unit.matched.or_else(|| workspace.find_statement(&unit.statement)) {
            Some(id) => id,
            None => {
                let id = graph.infos.len() as u32;
                graph.infos.push(InfoNode { id, statement: unit.statement.clone(), origin_step: k });
                workspace.push(id, &unit.statement);
                id
            }
        };
        local.insert(i, id);
        graph.add_edge(producer, NodeRef::Info(id));
    }
    let consumer = NodeRef::Action(k + 1);
    for s in &out.supports_next {
        let id = match s {
            SupportRef::Existing(id) => *id,
            SupportRef::Local(l) => local[&local_index(l).expect("checked")],
        };
        graph.add_edge(NodeRef::Info(id), consumer);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Matcher, MockResponse, MockRule, MockScript};
    use crate::graph::{validate_graph, Edge};
    use crate::trajectory::{ActionKind, Round, ToolAction, TrajectoryMeta};
    use serde_json::json;

    fn trajectory(t: u32) -> Trajectory {
        let rounds = (1..=t)
            .map(|i| Round {
                index: i,
                thought: format!("thought {i}"),
                action: if i == t {
                    ToolAction::new(ActionKind::Answer, "42")
                } else if i % 2 == 0 {
                    ToolAction::new(ActionKind::Visit, format!("https://example.org/{i}"))
                } else {
                    ToolAction::new(ActionKind::Search, format!("query {i}"))
                },
                observation: (i != t).then(|| format!("observation {i}")),
            })
            .collect();
        Trajectory::new("what is it?", TrajectoryMeta { run_id: "tr".into(), ..Default::default() }, rounds).unwrap()
    }

    fn goal_rule() -> MockRule {
        MockRule::always(
            Matcher { phase: Some(Phase::ActionSummary), ..Default::default() },
            MockResponse::Json(json!({"action": "Search", "goal": "goal {step}"})),
        )
    }

    fn link(step: u32, body: serde_json::Value) -> MockRule {
        MockRule::always(Matcher { phase: Some(Phase::InfoLink), step: Some(step), ..Default::default() }, MockResponse::Json(body))
    }

    fn chain_rules(t: u32) -> Vec<MockRule> {
        let mut rules = vec![goal_rule()];
        for k in 1..t {
            rules.push(link(k, json!({"info_units": [{"statement": format!("fact {k}"), "match": null}], "supports_next": ["u0"]})));
        }
        rules
    }

    #[test]
    fn one_action_node_per_round_with_trajectory_kinds() {
        let (gw, mock) = Gateway::mock(MockScript::keyed(vec![goal_rule()])).unwrap();
        let t = trajectory(3);
        let nodes = extract_action_nodes(&t, &gw, &GraphBuildOptions { parallel: true, ..Default::default() }).unwrap();
        assert_eq!(nodes.iter().map(|n| n.step).collect::<Vec<_>>(), [1, 2, 3]);
        // The extractor said "Search" for every turn; round 2 is a visit.
        assert_eq!(nodes[1].kind, ActionKind::Visit);
        assert_eq!(nodes[2].kind, ActionKind::Answer);
        assert_eq!(nodes[1].goal, "goal 2");
        assert_eq!(mock.request_count(LlmRole::Extractor), 3);
    }

    #[test]
    fn malformed_phase1_reply_names_the_step() {
        let bad = MockRule::always(
            Matcher { phase: Some(Phase::ActionSummary), step: Some(2), ..Default::default() },
            MockResponse::Text("not json".into()),
        );
        let (gw, _) = Gateway::mock(MockScript::keyed(vec![bad, goal_rule()])).unwrap();
        let err = extract_action_nodes(&trajectory(3), &gw, &GraphBuildOptions::default()).unwrap_err();
        assert!(matches!(err, GraphError::Malformed { step: 2, .. }), "{err}");
    }

    #[test]
    fn linear_chain() {
        let t = trajectory(4);
        let (gw, mock) = Gateway::mock(MockScript::keyed(chain_rules(4))).unwrap();
        let opts = GraphBuildOptions::default();
        let actions = extract_action_nodes(&t, &gw, &opts).unwrap();
        let g = build_state_graph(&t, &actions, &gw, 1, &opts).unwrap();
        assert_eq!(validate_graph(&g), vec![]);
        let expected: Vec<Edge> = [
            (NodeRef::Info(0), NodeRef::Action(1)),
            (NodeRef::Action(1), NodeRef::Info(1)),
            (NodeRef::Info(1), NodeRef::Action(2)),
            (NodeRef::Action(2), NodeRef::Info(2)),
            (NodeRef::Info(2), NodeRef::Action(3)),
            (NodeRef::Action(3), NodeRef::Info(3)),
            (NodeRef::Info(3), NodeRef::Action(4)),
        ]
        .into_iter()
        .map(|(a, b)| Edge::new(a, b))
        .collect();
        let mut got: Vec<Edge> = g.edges.iter().copied().collect();
        got.sort();
        let mut want = expected;
        want.sort();
        assert_eq!(got, want);
        // T phase-1 calls and T-1 snippet iterations.
        assert_eq!(mock.request_count(LlmRole::Extractor), 4 + 3);
    }

    #[test]
    fn repeated_information_matches_existing_node() {
        let t = trajectory(4);
        let mut rules = chain_rules(4);
        rules.insert(1, link(3, json!({"info_units": [{"statement": "fact one again", "match": 1}], "supports_next": [1]})));
        let (gw, _) = Gateway::mock(MockScript::keyed(rules)).unwrap();
        let opts = GraphBuildOptions::default();
        let actions = extract_action_nodes(&t, &gw, &opts).unwrap();
        let g = build_state_graph(&t, &actions, &gw, 1, &opts).unwrap();
        assert!(g.edges.contains(&Edge::new(NodeRef::Action(3), NodeRef::Info(1))));
        assert_eq!(g.infos.len(), 3, "I0, I1, I2 only");
        assert_eq!(validate_graph(&g), vec![]);
    }

    #[test]
    fn multi_support_fan_in() {
        let t = trajectory(5);
        let mut rules = chain_rules(5);
        rules.insert(1, link(4, json!({"info_units": [{"statement": "fact 4", "match": null}], "supports_next": [1, "u0"]})));
        let (gw, _) = Gateway::mock(MockScript::keyed(rules)).unwrap();
        let opts = GraphBuildOptions::default();
        let actions = extract_action_nodes(&t, &gw, &opts).unwrap();
        let g = build_state_graph(&t, &actions, &gw, 1, &opts).unwrap();
        let preds: Vec<_> = g.predecessors(NodeRef::Action(5)).collect();
        assert_eq!(preds, [NodeRef::Info(1), NodeRef::Info(4)]);
    }

    #[test]
    fn dangling_support_gets_one_repair_then_fails() {
        let t = trajectory(3);
        let mut rules = chain_rules(3);
        rules.insert(1, link(2, json!({"info_units": [], "supports_next": [7]})));
        let (gw, mock) = Gateway::mock(MockScript::keyed(rules.clone())).unwrap();
        let opts = GraphBuildOptions::default();
        let actions = extract_action_nodes(&t, &gw, &opts).unwrap();
        let err = build_state_graph(&t, &actions, &gw, 1, &opts).unwrap_err();
        assert_eq!(err, GraphError::DanglingSupport { step: 2, reference: "7".into() });
        assert_eq!(mock.requests().iter().filter(|r| r.tag.repair).count(), 1);

        // A repair reply that fixes the citation is accepted.
        let fix = MockRule::always(
            Matcher { phase: Some(Phase::InfoLink), step: Some(2), repair: Some(true), ..Default::default() },
            MockResponse::Json(json!({"info_units": [], "supports_next": [1]})),
        );
        rules.insert(0, fix);
        let (gw, _) = Gateway::mock(MockScript::keyed(rules)).unwrap();
        let g = build_state_graph(&t, &actions, &gw, 1, &opts).unwrap();
        assert!(g.edges.contains(&Edge::new(NodeRef::Info(1), NodeRef::Action(3))));
    }

    #[test]
    fn empty_observation_yields_action_without_out_edges() {
        let t = trajectory(3);
        let mut rules = chain_rules(3);
        rules.insert(1, link(1, json!({"info_units": [], "supports_next": [0]})));
        let (gw, _) = Gateway::mock(MockScript::keyed(rules)).unwrap();
        let opts = GraphBuildOptions::default();
        let actions = extract_action_nodes(&t, &gw, &opts).unwrap();
        let g = build_state_graph(&t, &actions, &gw, 1, &opts).unwrap();
        assert_eq!(g.successors(NodeRef::Action(1)).count(), 0);
        assert_eq!(validate_graph(&g), vec![]);
    }

    #[test]
    fn workspace_rendering_cap() {
        let mut w = Workspace::new("q");
        for i in 1..=5 {
            w.push(i, &format!("s{i}"));
        }
        assert_eq!(w.render(Some(2)), "0: q\n4: s4\n5: s5");
        assert_eq!(w.render(None).lines().count(), 6);
        assert_eq!(w.find_statement("  S3. "), Some(3));
    }
}
