//! Seeded synthetic corpus with known necessary sets.
//!
//! Each trajectory is laid out as a sequence of necessary, dead and loop
//! rounds. Necessary rounds form a dependency chain from the query to the
//! answer. Dead rounds produce facts nothing necessary uses. A loop round
//! repeats the latest necessary round and re-derives the same fact. The
//! generator also writes the keyed mock script that makes the extractor
//! report exactly this structure, so the pipeline's output can be checked
//! against the truth entries.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::gateway::{Matcher, MockResponse, MockRule, MockScript, Phase};
use crate::trajectory::{ActionKind, Round, ToolAction, Trajectory, TrajectoryMeta};

pub const DEFAULT_SEED: u64 = 20_251_019;

/// Phrase planted in every observation the pruning should remove. A rewrite
/// that repeats it leaks skipped content.
pub const LEAK_PHRASE: &str = "the archived ledger lists eleven unrelated harbor names from the old survey";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    DeadBranch,
    Loop,
    LeadingDead,
    Long,
    NoRedundancy,
    VoteDivergent,
    Discarded,
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub id: String,
    pub scenario: Scenario,
    /// Necessary steps, answer included.
    pub necessary: Vec<u32>,
    /// One of `pruned`, `no_redundancy`, `discarded`, `unreachable`.
    pub expected_outcome: String,
    /// Positions in the pruned trajectory that need a rewritten thought.
    pub seams: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub trajectories: Vec<Trajectory>,
    pub script: MockScript,
    pub truth: Vec<TruthEntry>,
}

impl SyntheticCorpus {
    pub fn trajectories_jsonl(&self) -> String {
        self.trajectories.iter().map(|t| t.to_jsonl() + "\n").collect()
    }

    pub fn script_json(&self) -> String {
        self.script.to_json_pretty() + "\n"
    }

    pub fn truth_json(&self) -> String {
        serde_json::to_string_pretty(&self.truth).expect("truth serializes") + "\n"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Necessary,
    Dead,
    Loop,
}

const NOUNS: &[&str] = &[
    "lighthouse", "observatory", "railway bridge", "botanical garden", "printing house", "river lock", "chapel",
    "mill", "harbor crane", "town archive", "clock tower", "canal", "museum wing", "foundry", "ferry line",
];
const PLACES: &[&str] =
    &["Aldermere", "Brisk Hollow", "Castorveld", "Dunmarrow", "Elsinby", "Fennick", "Galloway Reach", "Hartwell"];
const PEOPLE: &[&str] =
    &["Ines Varga", "Tomas Ekberg", "Mara Quell", "Osric Dane", "Lena Pohl", "Rafael Itu", "Greta Morn", "Yusuf Alder"];

struct Layout {
    scenario: Scenario,
    roles: Vec<Role>,
}

fn shuffled_tail(rng: &mut ChaCha8Rng, necessary: usize, dead: usize) -> Vec<Role> {
    // Step 1 is always necessary; the rest is a random interleaving.
    let mut tail: Vec<Role> = std::iter::repeat_n(Role::Necessary, necessary - 1)
        .chain(std::iter::repeat_n(Role::Dead, dead))
        .collect();
    tail.shuffle(rng);
    std::iter::once(Role::Necessary).chain(tail).collect()
}

fn loop_layout(rng: &mut ChaCha8Rng, necessary: usize, loops: usize, dead: usize) -> Vec<Role> {
    let mut roles = shuffled_tail(rng, necessary, dead);
    for _ in 0..loops {
        // Right after some necessary round, so the loop repeats it.
        let anchors: Vec<usize> =
            roles.iter().enumerate().filter(|(_, r)| **r == Role::Necessary).map(|(i, _)| i + 1).collect();
        let at = *anchors.choose(rng).expect("at least one necessary round");
        roles.insert(at, Role::Loop);
    }
    roles
}

fn layouts(rng: &mut ChaCha8Rng) -> Vec<Layout> {
    let mut out = Vec::new();
    let mut push = |scenario, roles| out.push(Layout { scenario, roles });
    for i in 0..7 {
        let dead = 3 + i % 3;
        push(Scenario::DeadBranch, shuffled_tail(rng, 9 - dead, dead));
    }
    push(Scenario::Long, shuffled_tail(rng, 25, 24));
    for i in 0..5 {
        push(Scenario::Loop, loop_layout(rng, 5, 2 + i % 2, 1 + i % 2));
    }
    for dead in [2, 3] {
        let mut roles = vec![Role::Dead; dead];
        roles.extend(shuffled_tail(rng, 5, 1));
        push(Scenario::LeadingDead, roles);
    }
    for n in [5, 3] {
        push(Scenario::NoRedundancy, vec![Role::Necessary; n]);
    }
    push(Scenario::VoteDivergent, shuffled_tail(rng, 5, 4));
    push(Scenario::Discarded, shuffled_tail(rng, 5, 4));
    push(Scenario::Unreachable, shuffled_tail(rng, 4, 3));
    out
}

/// What one extractor snippet reports.
struct Snippet {
    units: Value,
    supports: Vec<Value>,
}

struct Built {
    trajectory: Trajectory,
    snippets: Vec<Snippet>,
    /// Info ids of dead facts, with the step that produced them.
    dead_facts: Vec<(u32, u32)>,
    necessary: Vec<u32>,
}

fn support_ref(id: u32, produced_here: Option<u32>) -> Value {
    if produced_here == Some(id) {
        json!("u0")
    } else {
        json!(id)
    }
}

fn build(index: usize, layout: &Layout, rng: &mut ChaCha8Rng) -> Built {
    let place = PLACES[index % PLACES.len()];
    let noun = NOUNS[index % NOUNS.len()];
    let query = format!("Who commissioned the {noun} of {place}, and in which year did work on it begin? (case {index:02})");
    let run_id = format!("syn-{index:02}");
    let roles = &layout.roles;
    let total = roles.len() as u32 + 1;

    // Simulated graph: info ids in creation order, facts per step.
    let mut next_id = 1u32;
    let mut statements: Vec<(u32, String)> = Vec::new();
    let mut produced: Vec<Option<u32>> = Vec::new();
    let mut necessary_facts: Vec<u32> = Vec::new();
    let mut dead_facts: Vec<(u32, u32)> = Vec::new();
    // Supports of each action, as info ids (0 is the query).
    let mut inputs: Vec<Vec<u32>> = Vec::new();
    let mut rounds = Vec::new();
    let mut last_necessary_inputs: Vec<u32> = vec![0];

    for (i, role) in roles.iter().enumerate() {
        let step = i as u32 + 1;
        let (own_inputs, fact, statement) = match role {
            Role::Necessary => {
                let mut ins = match necessary_facts.as_slice() {
                    [] => vec![0],
                    [.., last] => vec![*last],
                };
                if necessary_facts.len() >= 2 && rng.random_bool(0.3) {
                    ins.push(necessary_facts[necessary_facts.len() - 2]);
                }
                let id = next_id;
                next_id += 1;
                let person = PEOPLE[rng.random_range(0..PEOPLE.len())];
                let year = rng.random_range(1820..1930);
                let text = format!("record {step} names {person} in connection with the {noun} in {year}");
                necessary_facts.push(id);
                last_necessary_inputs = ins.clone();
                (ins, Some(id), text)
            }
            Role::Dead => {
                let mut pool = vec![0];
                pool.extend(&necessary_facts);
                pool.extend(dead_facts.iter().map(|(id, _)| *id));
                let ins = vec![*pool.choose(rng).expect("query is always available")];
                let id = next_id;
                next_id += 1;
                let other = NOUNS[rng.random_range(0..NOUNS.len())];
                let text = format!("entry {step} concerns an unrelated {other} far from {place}");
                dead_facts.push((id, step));
                (ins, Some(id), text)
            }
            Role::Loop => {
                let last = *necessary_facts.last().expect("loops follow a necessary round");
                let text = statements.iter().find(|(id, _)| *id == last).expect("known fact").1.clone();
                (last_necessary_inputs.clone(), Some(last), text)
            }
        };
        if *role != Role::Loop {
            statements.push((fact.expect("new fact"), statement.clone()));
        }
        produced.push(fact);
        inputs.push(own_inputs);

        let (thought, action, observation) = match role {
            Role::Necessary => (
                format!("I still need the next link in the chain about the {noun}, so I will check another source."),
                if step.is_multiple_of(3) {
                    ToolAction::new(ActionKind::Visit, format!("https://archive.example.org/{run_id}/{step}"))
                } else {
                    ToolAction::new(ActionKind::Search, format!("{noun} {place} source {step}"))
                },
                format!("Result {step}: {statement}."),
            ),
            Role::Dead => (
                "Perhaps a broader look at nearby records turns up something useful.".to_string(),
                ToolAction::new(ActionKind::Search, format!("{place} miscellaneous records {step}")),
                format!("Result {step}: {statement}; {LEAK_PHRASE}."),
            ),
            Role::Loop => (
                "Let me double check what I found a moment ago.".to_string(),
                ToolAction::new(ActionKind::Search, format!("{noun} {place} source recheck {step}")),
                format!("Result {step}: {statement}; {LEAK_PHRASE}."),
            ),
        };
        rounds.push(Round { index: step, thought, action, observation: Some(observation) });
    }
    let answer_inputs = vec![*necessary_facts.last().expect("every layout has a necessary round")];
    inputs.push(answer_inputs);
    rounds.push(Round {
        index: total,
        thought: "The gathered records settle the question.".to_string(),
        action: ToolAction::new(ActionKind::Answer, format!("{} in {}", PEOPLE[index % PEOPLE.len()], 1850 + index)),
        observation: None,
    });

    let snippets = (1..total)
        .map(|k| {
            let here = produced[k as usize - 1];
            let role = roles[k as usize - 1];
            let statement = match here {
                Some(id) => statements.iter().find(|(sid, _)| *sid == id).expect("known fact").1.clone(),
                None => unreachable!("every round reports a fact"),
            };
            let matched = if role == Role::Loop { here } else { None };
            let new_here = if role == Role::Loop { None } else { here };
            Snippet {
                units: json!([{ "statement": statement, "match": matched }]),
                supports: inputs[k as usize].iter().map(|&id| support_ref(id, new_here)).collect(),
            }
        })
        .collect();

    let meta = TrajectoryMeta { dataset: "synthetic".into(), run_id, seed: index as i64 };
    let trajectory = Trajectory::new(query, meta, rounds).expect("generated trajectory is valid");
    let necessary =
        roles.iter().enumerate().filter(|(_, r)| **r == Role::Necessary).map(|(i, _)| i as u32 + 1).chain([total]).collect();
    Built { trajectory, snippets, dead_facts, necessary }
}

/// Positions `p` in the kept list where a rewrite is due.
fn seams_of(kept: &[u32]) -> Vec<usize> {
    (0..kept.len()).filter(|&p| if p == 0 { kept[0] > 1 } else { kept[p] != kept[p - 1] + 1 }).collect()
}

fn link_rule(id: &str, step: u32, run: Option<u32>, units: &Value, supports: &[Value], unsupported: bool) -> MockRule {
    MockRule::always(
        Matcher { phase: Some(Phase::InfoLink), trajectory_id: Some(id.into()), step: Some(step), run, ..Default::default() },
        MockResponse::Json(json!({ "info_units": units, "supports_next": supports, "next_unsupported": unsupported })),
    )
}

/// Generates the 20-trajectory corpus, its mock script and its truth table.
pub fn generate(seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rules = vec![MockRule::always(
        Matcher { phase: Some(Phase::ActionSummary), ..Default::default() },
        MockResponse::Json(json!({ "goal": "carry out step {step} of {trajectory_id}" })),
    )];
    let mut trajectories = Vec::new();
    let mut truth = Vec::new();

    for (index, layout) in layouts(&mut rng).iter().enumerate() {
        let built = build(index + 1, layout, &mut rng);
        let id = built.trajectory.id().to_string();
        let last = built.snippets.len() as u32;
        for (k, snippet) in built.snippets.iter().enumerate() {
            let step = k as u32 + 1;
            if step == last {
                match layout.scenario {
                    Scenario::VoteDivergent => {
                        let mut extra = snippet.supports.clone();
                        extra.push(json!(built.dead_facts[0].0));
                        rules.push(link_rule(&id, step, Some(3), &snippet.units, &extra, false));
                    }
                    Scenario::Discarded => {
                        for (run, dead) in [(2, built.dead_facts[0].0), (3, built.dead_facts[1].0)] {
                            let mut extra = snippet.supports.clone();
                            extra.push(json!(dead));
                            rules.push(link_rule(&id, step, Some(run), &snippet.units, &extra, false));
                        }
                    }
                    Scenario::Unreachable => {
                        rules.push(link_rule(&id, step, None, &snippet.units, &[], true));
                        continue;
                    }
                    _ => {}
                }
            }
            rules.push(link_rule(&id, step, None, &snippet.units, &snippet.supports, false));
        }
        let total = built.trajectory.len() as u32;
        let (expected, seams) = match layout.scenario {
            Scenario::NoRedundancy => ("no_redundancy", Vec::new()),
            Scenario::Discarded => ("discarded", Vec::new()),
            Scenario::Unreachable => ("unreachable", Vec::new()),
            _ => ("pruned", seams_of(&built.necessary)),
        };
        debug_assert!(layout.scenario != Scenario::NoRedundancy || built.necessary.len() as u32 == total);
        truth.push(TruthEntry {
            id,
            scenario: layout.scenario,
            necessary: built.necessary,
            expected_outcome: expected.to_string(),
            seams,
        });
        trajectories.push(built.trajectory);
    }

    rules.push(MockRule::always(
        Matcher { phase: Some(Phase::Rewrite), candidate: Some(2), ..Default::default() },
        MockResponse::Json(json!({
            "thought": format!("Earlier I noticed that {LEAK_PHRASE}, so I will go on with step {{step}}.")
        })),
    ));
    rules.push(MockRule::always(
        Matcher { phase: Some(Phase::Rewrite), ..Default::default() },
        MockResponse::Json(json!({
            "thought": "With the records gathered so far, step {step} is the natural next check (draft {candidate})."
        })),
    ));
    for (candidate, avg_nll) in [(1, 1.2), (2, 0.7), (3, 0.9)] {
        rules.push(MockRule::always(
            Matcher { phase: Some(Phase::Score), candidate: Some(candidate), ..Default::default() },
            MockResponse::Score { avg_nll, token_count: 18 },
        ));
    }
    let script = MockScript { strict: true, ..MockScript::keyed(rules) };
    SyntheticCorpus { trajectories, script, truth }
}
