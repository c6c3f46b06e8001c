//! Minimal necessary subgraph mining.
//!
//! Every action node costs 1 and every information node costs 0. A forward
//! Dijkstra pass from `I_0` gives each node its cheapest cost `d(v)` and a
//! predecessor `p(v)`. A backward pass from the answer then collects the
//! necessary nodes: an action needs *all* of the information it relied on,
//! while a piece of information needs only the producer on its cheapest path.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{validate_graph, Diagnostic, NodeRef, StateGraph};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MiningError {
    #[error("the answer action is unreachable from the query")]
    UnreachableSink,
    #[error("graph fails validation: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidGraph(Vec<Diagnostic>),
    #[error("I{info} is needed by a kept action but is unreachable from the query")]
    UnreachableSupport { info: u32 },
    #[error("exhaustive search supports at most {max} actions, graph has {actions}")]
    TooLarge { actions: usize, max: usize },
}

/// Node cost: actions 1, information 0.
pub fn node_cost(n: NodeRef) -> u32 {
    match n {
        NodeRef::Action(_) => 1,
        NodeRef::Info(_) => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DijkstraState {
    pub dist: BTreeMap<NodeRef, u32>,
    pub pred: BTreeMap<NodeRef, NodeRef>,
}

/// Forward pass with edge weight `w(u -> v) = c(v)`. Equal-distance nodes are
/// settled in [`NodeRef`] order and `p(v)` only changes on strict improvement.
pub fn shortest_paths(g: &StateGraph) -> DijkstraState {
    let mut state = DijkstraState::default();
    let mut settled = BTreeSet::new();
    let mut heap = BinaryHeap::from([Reverse((0u32, NodeRef::SOURCE))]);
    state.dist.insert(NodeRef::SOURCE, 0);
    while let Some(Reverse((d, u))) = heap.pop() {
        if !settled.insert(u) {
            continue;
        }
        for v in g.successors(u) {
            if settled.contains(&v) {
                continue;
            }
            let nd = d + node_cost(v);
            if state.dist.get(&v).is_none_or(|&old| nd < old) {
                state.dist.insert(v, nd);
                state.pred.insert(v, u);
                heap.push(Reverse((nd, v)));
            }
        }
    }
    state
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NecessarySet {
    pub action_steps: BTreeSet<u32>,
    /// Every node of the mined subgraph, actions and information.
    pub node_ids: BTreeSet<NodeRef>,
    /// Cost of the cheapest path from the query to the answer.
    pub d_sink: u32,
}

impl NecessarySet {
    pub fn len(&self) -> usize {
        self.action_steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.action_steps.is_empty()
    }

    pub fn steps(&self) -> Vec<u32> {
        self.action_steps.iter().copied().collect()
    }
}

/// Mines the necessary action set of a validated graph.
pub fn mine_mndag(g: &StateGraph) -> Result<NecessarySet, MiningError> {
    let diagnostics = validate_graph(g);
    if diagnostics == [Diagnostic::SinkUnreachable] {
        return Err(MiningError::UnreachableSink);
    }
    if !diagnostics.is_empty() {
        return Err(MiningError::InvalidGraph(diagnostics));
    }
    let sink = g.sink().expect("validated graph has a sink");
    let state = shortest_paths(g);
    let d_sink = *state.dist.get(&sink).ok_or(MiningError::UnreachableSink)?;

    let mut kept = BTreeSet::from([sink]);
    let mut queue = VecDeque::from([sink]);
    while let Some(v) = queue.pop_front() {
        match v {
            NodeRef::Action(_) => {
                for u in g.predecessors(v) {
                    if kept.insert(u) {
                        queue.push_back(u);
                    }
                }
            }
            NodeRef::Info(0) => {}
            NodeRef::Info(id) => {
                let p = *state.pred.get(&v).ok_or(MiningError::UnreachableSupport { info: id })?;
                if kept.insert(p) {
                    queue.push_back(p);
                }
            }
        }
    }
    let action_steps = kept
        .iter()
        .filter_map(|n| match n {
            NodeRef::Action(s) => Some(*s),
            NodeRef::Info(_) => None,
        })
        .collect();
    Ok(NecessarySet { action_steps, node_ids: kept, d_sink })
}

/// Closure check: the answer is kept, and every piece of information a kept
/// action relied on is the query or produced by some kept action.
pub fn is_valid_closure(g: &StateGraph, steps: &BTreeSet<u32>) -> bool {
    let Some(sink) = g.sink_step() else { return false };
    if !steps.contains(&sink) || steps.iter().any(|&s| g.action(s).is_none()) {
        return false;
    }
    steps.iter().all(|&s| {
        g.predecessors(NodeRef::Action(s)).all(|info| {
            info == NodeRef::SOURCE
                || g.predecessors(info).any(|p| matches!(p, NodeRef::Action(a) if steps.contains(&a)))
        })
    })
}

pub const ORACLE_MAX_ACTIONS: usize = 20;

/// Exhaustive minimum-cardinality closure, ties broken by the
/// lexicographically smallest step list.
pub fn brute_force_oracle(g: &StateGraph) -> Result<BTreeSet<u32>, MiningError> {
    let n = g.actions.len();
    if n > ORACLE_MAX_ACTIONS {
        return Err(MiningError::TooLarge { actions: n, max: ORACLE_MAX_ACTIONS });
    }
    let sink = g.sink_step().ok_or(MiningError::UnreachableSink)?;
    if !crate::graph::reachable(g).contains(&NodeRef::Action(sink)) {
        return Err(MiningError::UnreachableSink);
    }
    let mut steps: Vec<u32> = g.actions.iter().map(|a| a.step).collect();
    steps.sort_unstable();
    let bit: BTreeMap<u32, usize> = steps.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let producers = |info: NodeRef| -> u32 {
        g.predecessors(info)
            .filter_map(|p| match p {
                NodeRef::Action(a) => Some(1u32 << bit[&a]),
                NodeRef::Info(_) => None,
            })
            .fold(0, |m, b| m | b)
    };
    // For each action, the producer masks of the information it needs.
    let needs: Vec<Vec<u32>> = steps
        .iter()
        .map(|&s| {
            g.predecessors(NodeRef::Action(s))
                .filter(|&i| i != NodeRef::SOURCE)
                .map(producers)
                .collect()
        })
        .collect();
    let sink_bit = bit[&sink];
    let valid = |mask: u32| {
        (0..n).filter(|i| mask >> i & 1 == 1).all(|i| needs[i].iter().all(|&m| m & mask != 0))
    };
    for k in 1..=n {
        let mut combo: Vec<usize> = (0..k).collect();
        loop {
            let mask = combo.iter().fold(0u32, |m, &i| m | 1 << i);
            if mask >> sink_bit & 1 == 1 && valid(mask) {
                return Ok(combo.iter().map(|&i| steps[i]).collect());
            }
            // Next combination in lexicographic order.
            let Some(i) = (0..k).rev().find(|&i| combo[i] < n - k + i) else { break };
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
        }
    }
    Err(MiningError::UnreachableSink)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum VoteOutcome {
    Accepted { final_set: NecessarySet },
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteResult {
    /// The three candidates. `None` marks a run that produced no usable set
    /// and therefore agrees with nothing.
    pub candidates: [Option<NecessarySet>; 3],
    pub outcome: VoteOutcome,
}

impl VoteResult {
    pub fn accepted(&self) -> Option<&NecessarySet> {
        match &self.outcome {
            VoteOutcome::Accepted { final_set } => Some(final_set),
            VoteOutcome::Discarded => None,
        }
    }
}

/// Two-of-three agreement on action step sets.
pub fn majority_vote(c1: NecessarySet, c2: NecessarySet, c3: NecessarySet) -> VoteResult {
    vote_candidates([Some(c1), Some(c2), Some(c3)])
}

pub fn vote_candidates(candidates: [Option<NecessarySet>; 3]) -> VoteResult {
    let same = |i: usize, j: usize| match (&candidates[i], &candidates[j]) {
        (Some(a), Some(b)) => a.action_steps == b.action_steps,
        _ => false,
    };
    let winner = if same(0, 1) || same(0, 2) {
        Some(0)
    } else if same(1, 2) {
        Some(1)
    } else {
        None
    };
    let outcome = match winner {
        Some(i) => VoteOutcome::Accepted { final_set: candidates[i].clone().expect("agreeing candidate") },
        None => VoteOutcome::Discarded,
    };
    VoteResult { candidates, outcome }
}
