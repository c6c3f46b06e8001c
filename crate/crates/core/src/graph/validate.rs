use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::Serialize;

use super::{Edge, NodeRef, StateGraph};

/// A structural problem found by [`validate_graph`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    /// Action steps are not exactly `1..=T`.
    StepNumbering { steps: Vec<u32> },
    /// Info ids are not exactly `0..n` or `I_0` is not the query node.
    InfoNumbering { ids: Vec<u32> },
    UnknownEndpoint { edge: Edge },
    NotBipartite { edge: Edge },
    /// A producer edge points at an info node first produced later, or a
    /// support edge feeds an action from information it could not have seen.
    Temporal { edge: Edge, origin_step: u32 },
    /// An info node with `origin_step = s > 0` lacks the edge `A_s -> I`.
    MissingOrigin { info: u32, origin_step: u32 },
    MissingQueryEdge,
    /// Cycle among first-production and support edges.
    Cycle { nodes: Vec<NodeRef> },
    NoSink,
    MultipleSinks { steps: Vec<u32> },
    SinkNotLast { step: u32 },
    SinkUnreachable,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::StepNumbering { steps } => write!(f, "action steps {steps:?} are not contiguous from 1"),
            Diagnostic::InfoNumbering { ids } => write!(f, "info ids {ids:?} are not contiguous from 0"),
            Diagnostic::UnknownEndpoint { edge } => write!(f, "edge {edge} references a missing node"),
            Diagnostic::NotBipartite { edge } => write!(f, "edge {edge} connects two nodes of the same type"),
            Diagnostic::Temporal { edge, origin_step } => {
                write!(f, "edge {edge} violates temporal order (info origin step {origin_step})")
            }
            Diagnostic::MissingOrigin { info, origin_step } => {
                write!(f, "I{info} claims origin step {origin_step} but A{origin_step} does not produce it")
            }
            Diagnostic::MissingQueryEdge => f.write_str("edge I0->A1 is missing"),
            Diagnostic::Cycle { nodes } => write!(f, "cycle through {nodes:?}"),
            Diagnostic::NoSink => f.write_str("no answer action"),
            Diagnostic::MultipleSinks { steps } => write!(f, "multiple answer actions at steps {steps:?}"),
            Diagnostic::SinkNotLast { step } => write!(f, "answer action A{step} is not the last action"),
            Diagnostic::SinkUnreachable => f.write_str("answer action is unreachable from I0"),
        }
    }
}

/// Checks every structural invariant and returns all violations found.
/// An empty vector means the graph is valid.
pub fn validate_graph(g: &StateGraph) -> Vec<Diagnostic> {
    let mut out = Vec::new();

    let steps: Vec<u32> = g.actions.iter().map(|a| a.step).collect();
    let mut sorted_steps = steps.clone();
    sorted_steps.sort_unstable();
    if sorted_steps.iter().enumerate().any(|(i, &s)| s != i as u32 + 1) {
        out.push(Diagnostic::StepNumbering { steps: steps.clone() });
    }
    let ids: Vec<u32> = g.infos.iter().map(|i| i.id).collect();
    let mut sorted_ids = ids.clone();
    sorted_ids.sort_unstable();
    if sorted_ids.iter().enumerate().any(|(i, &id)| id != i as u32)
        || g.info(0).is_none_or(|i0| i0.origin_step != 0)
        || g.infos.iter().any(|i| i.id != 0 && i.origin_step == 0)
    {
        out.push(Diagnostic::InfoNumbering { ids });
    }

    let origin: BTreeMap<u32, u32> = g.infos.iter().map(|i| (i.id, i.origin_step)).collect();
    let action_steps: BTreeSet<u32> = steps.iter().copied().collect();
    let known = |n: NodeRef| match n {
        NodeRef::Action(s) => action_steps.contains(&s),
        NodeRef::Info(i) => origin.contains_key(&i),
    };

    for e in &g.edges {
        if !known(e.from) || !known(e.to) {
            out.push(Diagnostic::UnknownEndpoint { edge: *e });
            continue;
        }
        match (e.from, e.to) {
            (NodeRef::Action(t), NodeRef::Info(i)) => {
                let o = origin[&i];
                if o > t || (i == 0 && o != 0) {
                    out.push(Diagnostic::Temporal { edge: *e, origin_step: o });
                }
            }
            (NodeRef::Info(i), NodeRef::Action(t)) => {
                let o = origin[&i];
                if o >= t {
                    out.push(Diagnostic::Temporal { edge: *e, origin_step: o });
                }
            }
            _ => out.push(Diagnostic::NotBipartite { edge: *e }),
        }
    }

    for info in g.infos.iter().filter(|i| i.id != 0 && i.origin_step != 0) {
        let producer = Edge::new(NodeRef::Action(info.origin_step), NodeRef::Info(info.id));
        if !g.edges.contains(&producer) {
            out.push(Diagnostic::MissingOrigin { info: info.id, origin_step: info.origin_step });
        }
    }

    if action_steps.contains(&1) && !g.edges.contains(&Edge::new(NodeRef::SOURCE, NodeRef::Action(1))) {
        out.push(Diagnostic::MissingQueryEdge);
    }

    if let Some(nodes) = find_cycle(g, &origin) {
        out.push(Diagnostic::Cycle { nodes });
    }

    let answers: Vec<u32> = g.actions.iter().filter(|a| a.kind.is_answer()).map(|a| a.step).collect();
    match answers.as_slice() {
        [] => out.push(Diagnostic::NoSink),
        [step] => {
            if Some(step) != sorted_steps.last() {
                out.push(Diagnostic::SinkNotLast { step: *step });
            }
            if origin.contains_key(&0) && !reachable(g).contains(&NodeRef::Action(*step)) {
                out.push(Diagnostic::SinkUnreachable);
            }
        }
        _ => out.push(Diagnostic::MultipleSinks { steps: answers }),
    }
    out
}

/// Nodes reachable from `I_0` over all edges.
pub(crate) fn reachable(g: &StateGraph) -> BTreeSet<NodeRef> {
    let mut seen = BTreeSet::from([NodeRef::SOURCE]);
    let mut queue = VecDeque::from([NodeRef::SOURCE]);
    while let Some(n) = queue.pop_front() {
        for m in g.successors(n) {
            if seen.insert(m) {
                queue.push_back(m);
            }
        }
    }
    seen
}

/// Kahn's algorithm over every edge except re-derivations. Returns the nodes
/// left with unresolved in-degree when a cycle exists.
fn find_cycle(g: &StateGraph, origin: &BTreeMap<u32, u32>) -> Option<Vec<NodeRef>> {
    let primary: Vec<&Edge> = g
        .edges
        .iter()
        .filter(|e| match (e.from, e.to) {
            (NodeRef::Action(t), NodeRef::Info(i)) => origin.get(&i).is_none_or(|&o| o >= t),
            _ => true,
        })
        .collect();
    let mut indeg: BTreeMap<NodeRef, usize> = g.nodes().map(|n| (n, 0)).collect();
    for e in &primary {
        *indeg.entry(e.to).or_default() += 1;
        indeg.entry(e.from).or_default();
    }
    let mut queue: VecDeque<NodeRef> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&n, _)| n).collect();
    let mut removed = 0;
    while let Some(n) = queue.pop_front() {
        removed += 1;
        for e in primary.iter().filter(|e| e.from == n) {
            let d = indeg.get_mut(&e.to).unwrap();
            *d -= 1;
            if *d == 0 {
                queue.push_back(e.to);
            }
        }
    }
    if removed == indeg.len() {
        None
    } else {
        Some(indeg.into_iter().filter(|(_, d)| *d > 0).map(|(n, _)| n).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::chain;
    use crate::graph::InfoNode;
    use crate::trajectory::ActionKind;

    #[test]
    fn chain_is_valid() {
        assert_eq!(validate_graph(&chain(5)), vec![]);
    }

    #[test]
    fn info_to_info_edge_is_reported() {
        let mut g = chain(4);
        g.add_edge(NodeRef::Info(1), NodeRef::Info(2));
        assert!(validate_graph(&g).iter().any(|d| matches!(d, Diagnostic::NotBipartite { .. })));
    }

    #[test]
    fn unreachable_sink_is_reported() {
        let mut g = chain(3);
        g.edges.remove(&Edge::new(NodeRef::Info(2), NodeRef::Action(3)));
        assert_eq!(validate_graph(&g), vec![Diagnostic::SinkUnreachable]);
    }

    #[test]
    fn rederivation_is_not_a_violation() {
        // A3 re-states I1: A3 -> I1 closes a loop I1 -> A2 -> I2 -> A3 -> I1.
        let mut g = chain(4);
        g.add_edge(NodeRef::Action(3), NodeRef::Info(1));
        assert_eq!(validate_graph(&g), vec![]);
        assert_eq!(g.rederivation_edges().count(), 1);
    }

    #[test]
    fn temporal_violations() {
        let mut g = chain(4);
        g.add_edge(NodeRef::Info(3), NodeRef::Action(2));
        let d = validate_graph(&g);
        assert!(d.iter().any(|d| matches!(d, Diagnostic::Temporal { .. })), "{d:?}");
        assert!(d.iter().any(|d| matches!(d, Diagnostic::Cycle { .. })), "{d:?}");

        let mut g = chain(4);
        g.add_edge(NodeRef::Action(1), NodeRef::Info(3));
        assert!(validate_graph(&g).iter().any(|d| matches!(d, Diagnostic::Temporal { .. })));
    }

    #[test]
    fn sink_problems() {
        let mut g = chain(3);
        g.actions[1].kind = ActionKind::Answer;
        assert!(validate_graph(&g).iter().any(|d| matches!(d, Diagnostic::MultipleSinks { .. })));
        g.actions[1].kind = ActionKind::Search;
        g.actions[2].kind = ActionKind::Visit;
        assert!(validate_graph(&g).contains(&Diagnostic::NoSink));
    }

    #[test]
    fn missing_origin_producer() {
        let mut g = chain(3);
        g.infos.push(InfoNode { id: 3, statement: "x".into(), origin_step: 2 });
        assert!(validate_graph(&g).contains(&Diagnostic::MissingOrigin { info: 3, origin_step: 2 }));
    }
}
