//! Random state graphs and independent reference checks for them.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IteratorRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use trajclip::graph::{ActionNode, InfoNode, NodeRef, StateGraph};
use trajclip::trajectory::ActionKind;

/// A valid random graph with `2..=max_actions` actions. Every action but the
/// first relies on one to three earlier facts. With `rederive`, some facts get
/// extra producers among later actions.
pub fn random_graph(rng: &mut ChaCha8Rng, max_actions: u32, rederive: bool) -> StateGraph {
    let t = rng.random_range(2..=max_actions);
    let actions = (1..=t)
        .map(|s| ActionNode {
            step: s,
            kind: if s == t { ActionKind::Answer } else { ActionKind::Search },
            goal: format!("goal {s}"),
        })
        .collect();
    let mut g = StateGraph::seeded("q", actions);
    for k in 1..=t {
        if k >= 2 {
            let n = rng.random_range(1..=3usize).min(g.infos.len());
            let chosen: Vec<u32> = g.infos.iter().map(|i| i.id).choose_multiple(rng, n);
            for id in chosen {
                g.add_edge(NodeRef::Info(id), NodeRef::Action(k));
            }
        }
        if k < t {
            for _ in 0..rng.random_range(0..=2) {
                let id = g.infos.len() as u32;
                g.infos.push(InfoNode { id, statement: format!("fact {id}"), origin_step: k });
                g.add_edge(NodeRef::Action(k), NodeRef::Info(id));
            }
        }
    }
    if rederive {
        for _ in 0..rng.random_range(0..=3) {
            let Some(info) = g.infos.iter().filter(|i| i.id != 0 && i.origin_step + 1 < t).choose(rng).cloned() else {
                break;
            };
            let later = rng.random_range(info.origin_step + 1..t);
            g.add_edge(NodeRef::Action(later), NodeRef::Info(info.id));
        }
    }
    g
}

fn producers(g: &StateGraph) -> BTreeMap<u32, BTreeSet<u32>> {
    let mut out: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for e in &g.edges {
        if let (NodeRef::Action(s), NodeRef::Info(i)) = (e.from, e.to) {
            out.entry(i).or_default().insert(s);
        }
    }
    out
}

/// Every fact a kept action relies on is the query or made by a kept action,
/// and the answer is kept.
pub fn closure_ok(g: &StateGraph, steps: &BTreeSet<u32>) -> bool {
    let answer = g.actions.iter().find(|a| a.kind.is_answer()).map(|a| a.step);
    let made_by = producers(g);
    answer.is_some_and(|a| steps.contains(&a))
        && g.edges.iter().all(|e| match (e.from, e.to) {
            (NodeRef::Info(i), NodeRef::Action(s)) if steps.contains(&s) && i != 0 => {
                made_by.get(&i).is_some_and(|p| !p.is_disjoint(steps))
            }
            _ => true,
        })
}

/// Size of the smallest valid closure, by enumerating every subset.
pub fn min_closure_size(g: &StateGraph) -> usize {
    let steps: Vec<u32> = g.actions.iter().map(|a| a.step).collect();
    (0u32..1 << steps.len())
        .filter_map(|mask| {
            let set: BTreeSet<u32> =
                steps.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, s)| *s).collect();
            closure_ok(g, &set).then_some(set.len())
        })
        .min()
        .expect("the full action set is a closure")
}

/// Structural checks written independently of the library's validator.
pub fn structural_problems(g: &StateGraph) -> Vec<String> {
    let mut out = Vec::new();
    let origin: BTreeMap<u32, u32> = g.infos.iter().map(|i| (i.id, i.origin_step)).collect();
    let steps: BTreeSet<u32> = g.actions.iter().map(|a| a.step).collect();
    for e in &g.edges {
        match (e.from, e.to) {
            (NodeRef::Action(s), NodeRef::Info(i)) => {
                if !steps.contains(&s) || origin.get(&i).is_none_or(|&o| o > s || o == 0) {
                    out.push(format!("producer edge {e}"));
                }
            }
            (NodeRef::Info(i), NodeRef::Action(s)) => {
                if !steps.contains(&s) || origin.get(&i).is_none_or(|&o| o >= s) {
                    out.push(format!("support edge {e}"));
                }
            }
            _ => out.push(format!("same-type edge {e}")),
        }
    }
    // Kahn's algorithm over first-production and support edges.
    let primary: Vec<(NodeRef, NodeRef)> = g
        .edges
        .iter()
        .filter(|e| match (e.from, e.to) {
            (NodeRef::Action(s), NodeRef::Info(i)) => origin.get(&i) == Some(&s),
            _ => true,
        })
        .map(|e| (e.from, e.to))
        .collect();
    let nodes: BTreeSet<NodeRef> = primary.iter().flat_map(|(a, b)| [*a, *b]).collect();
    let mut indegree: BTreeMap<NodeRef, usize> = nodes.iter().map(|n| (*n, 0)).collect();
    for (_, b) in &primary {
        *indegree.get_mut(b).unwrap() += 1;
    }
    let mut ready: Vec<NodeRef> = indegree.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
    let mut seen = 0;
    while let Some(n) = ready.pop() {
        seen += 1;
        for (_, b) in primary.iter().filter(|(a, _)| *a == n) {
            let d = indegree.get_mut(b).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(*b);
            }
        }
    }
    if seen != nodes.len() {
        out.push("cycle".into());
    }
    let answers: Vec<u32> = g.actions.iter().filter(|a| a.kind.is_answer()).map(|a| a.step).collect();
    if answers.len() != 1 || answers[0] != steps.iter().copied().max().unwrap_or(0) {
        out.push(format!("answers at {answers:?}"));
    }
    out
}
