//! Bipartite action/information state graph.
//!
//! Action nodes `A_t` (one per round) and information nodes `I_k` (atomic facts,
//! with `I_0` holding the query) are linked by two edge types:
//!
//! * `I -> A`: the action relied on the information,
//! * `A -> I`: the action produced the information.
//!
//! An information node's `origin_step` is the step of the action that first
//! produced it. Later actions that re-produce a known fact add
//! *re-derivation* edges `A_t -> I` with `origin_step < t`; those edges are how
//! repeated searches show up as loops in the graph.

mod build;
mod validate;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::trajectory::ActionKind;

pub use build::{build_state_graph, extract_action_nodes, ExtractorTurnOutput, GraphBuildOptions, GraphError, InfoUnit, SupportRef, Workspace};
pub use validate::{validate_graph, Diagnostic};
pub(crate) use validate::reachable;

/// A node reference ordered actions-first, then by step or id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", content = "id", rename_all = "lowercase")]
pub enum NodeRef {
    Action(u32),
    Info(u32),
}

impl NodeRef {
    pub const SOURCE: NodeRef = NodeRef::Info(0);

    pub fn is_action(self) -> bool {
        matches!(self, NodeRef::Action(_))
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeRef::Action(s) => write!(f, "A{s}"),
            NodeRef::Info(i) => write!(f, "I{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from: NodeRef,
    pub to: NodeRef,
}

impl Edge {
    pub fn new(from: NodeRef, to: NodeRef) -> Self {
        Edge { from, to }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionNode {
    pub step: u32,
    pub kind: ActionKind,
    pub goal: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfoNode {
    pub id: u32,
    pub statement: String,
    pub origin_step: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateGraph {
    pub actions: Vec<ActionNode>,
    pub infos: Vec<InfoNode>,
    pub edges: BTreeSet<Edge>,
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    source: u32,
    sink_step: Option<u32>,
    actions: Vec<ActionNode>,
    infos: Vec<InfoNode>,
    edges: Vec<Edge>,
}

impl StateGraph {
    /// A graph holding only `I_0` (the query) and the given action nodes,
    /// with the edge `I_0 -> A_1`.
    pub fn seeded(query: &str, actions: Vec<ActionNode>) -> Self {
        let mut edges = BTreeSet::new();
        if !actions.is_empty() {
            edges.insert(Edge::new(NodeRef::SOURCE, NodeRef::Action(1)));
        }
        StateGraph {
            actions,
            infos: vec![InfoNode { id: 0, statement: query.to_string(), origin_step: 0 }],
            edges,
        }
    }

    /// The unique answer action, if exactly one exists.
    pub fn sink(&self) -> Option<NodeRef> {
        let mut answers = self.actions.iter().filter(|a| a.kind.is_answer());
        match (answers.next(), answers.next()) {
            (Some(a), None) => Some(NodeRef::Action(a.step)),
            _ => None,
        }
    }

    pub fn sink_step(&self) -> Option<u32> {
        match self.sink() {
            Some(NodeRef::Action(s)) => Some(s),
            _ => None,
        }
    }

    pub fn action(&self, step: u32) -> Option<&ActionNode> {
        self.actions.iter().find(|a| a.step == step)
    }

    pub fn info(&self, id: u32) -> Option<&InfoNode> {
        self.infos.iter().find(|i| i.id == id)
    }

    pub fn contains(&self, node: NodeRef) -> bool {
        match node {
            NodeRef::Action(s) => self.action(s).is_some(),
            NodeRef::Info(i) => self.info(i).is_some(),
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeRef> + '_ {
        self.actions
            .iter()
            .map(|a| NodeRef::Action(a.step))
            .chain(self.infos.iter().map(|i| NodeRef::Info(i.id)))
    }

    pub fn node_count(&self) -> usize {
        self.actions.len() + self.infos.len()
    }

    pub fn predecessors(&self, node: NodeRef) -> impl Iterator<Item = NodeRef> + '_ {
        self.edges.iter().filter(move |e| e.to == node).map(|e| e.from)
    }

    pub fn successors(&self, node: NodeRef) -> impl Iterator<Item = NodeRef> + '_ {
        self.edges.range(Edge::new(node, NodeRef::Action(0))..).take_while(move |e| e.from == node).map(|e| e.to)
    }

    pub fn add_edge(&mut self, from: NodeRef, to: NodeRef) -> bool {
        self.edges.insert(Edge::new(from, to))
    }

    /// Producer edges `A_t -> I` with `I.origin_step < t`.
    pub fn rederivation_edges(&self) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter().filter(move |e| match (e.from, e.to) {
            (NodeRef::Action(t), NodeRef::Info(i)) => self.info(i).is_some_and(|n| n.origin_step < t),
            _ => false,
        })
    }

    /// Canonical JSON document: actions by step, infos by id, edges sorted.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.doc()).expect("graph serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.doc()).expect("graph serializes")
    }

    fn doc(&self) -> GraphDoc {
        let mut actions = self.actions.clone();
        actions.sort_by_key(|a| a.step);
        let mut infos = self.infos.clone();
        infos.sort_by_key(|i| i.id);
        GraphDoc { source: 0, sink_step: self.sink_step(), actions, infos, edges: self.edges.iter().copied().collect() }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let doc: GraphDoc = serde_json::from_str(text)?;
        Ok(StateGraph { actions: doc.actions, infos: doc.infos, edges: doc.edges.into_iter().collect() })
    }
}

pub fn export_graph(g: &StateGraph) -> String {
    g.to_json()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// `I0 -> A1 -> I1 -> A2 -> ... -> A_T`, with `A_T` the answer.
    pub(crate) fn chain(t: u32) -> StateGraph {
        let actions = (1..=t)
            .map(|s| ActionNode {
                step: s,
                kind: if s == t { ActionKind::Answer } else { ActionKind::Search },
                goal: format!("goal {s}"),
            })
            .collect();
        let mut g = StateGraph::seeded("q", actions);
        for s in 1..t {
            g.infos.push(InfoNode { id: s, statement: format!("fact {s}"), origin_step: s });
            g.add_edge(NodeRef::Action(s), NodeRef::Info(s));
            g.add_edge(NodeRef::Info(s), NodeRef::Action(s + 1));
        }
        g
    }

    #[test]
    fn export_is_canonical_and_round_trips() {
        let g = chain(3);
        let json = export_graph(&g);
        assert!(json.starts_with(r#"{"source":0,"sink_step":3,"actions":[{"step":1,"kind":"search""#));
        assert!(json.contains(r#"{"from":{"type":"info","id":0},"to":{"type":"action","id":1}}"#));
        let doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(doc["actions"].as_array().unwrap().len() + doc["infos"].as_array().unwrap().len(), 6);
        assert_eq!(doc["edges"].as_array().unwrap().len(), 5);
        assert_eq!(StateGraph::from_json(&json).unwrap(), g);
    }

    #[test]
    fn node_order_puts_actions_first() {
        assert!(NodeRef::Action(99) < NodeRef::Info(0));
        assert!(NodeRef::Action(1) < NodeRef::Action(2));
    }

    #[test]
    fn successor_range_scan() {
        let g = chain(4);
        assert_eq!(g.successors(NodeRef::Info(0)).collect::<Vec<_>>(), [NodeRef::Action(1)]);
        assert_eq!(g.successors(NodeRef::Action(2)).collect::<Vec<_>>(), [NodeRef::Info(2)]);
        assert_eq!(g.predecessors(NodeRef::Action(3)).collect::<Vec<_>>(), [NodeRef::Info(2)]);
    }
}
