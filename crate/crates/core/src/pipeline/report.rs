use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    /// False when no QA file was configured and every trajectory went through.
    pub applied: bool,
    pub queries: usize,
    pub queries_kept: usize,
    pub queries_dropped: usize,
    pub trajectories_forwarded: usize,
    /// Trajectories of dropped queries plus non-forwarded ones of kept queries.
    pub trajectories_held_back: usize,
    /// Trajectories whose judge call failed; they count as failed outcomes.
    pub judge_failures: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub pruned: usize,
    pub no_redundancy: usize,
    pub discarded: usize,
    pub unreachable: usize,
    pub failed: usize,
}

impl OutcomeCounts {
    pub fn total(&self) -> usize {
        self.pruned + self.no_redundancy + self.discarded + self.unreachable + self.failed
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCounts {
    pub pruned: usize,
    pub unpruned: usize,
    /// Unpruned trajectories left out because their query is in the pruned pool.
    pub overlap_dropped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub examples: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    /// Tool-call rounds (answer excluded) over processed, non-failed trajectories.
    pub input: usize,
    pub output: usize,
    /// Mean per-trajectory fraction of tool-call rounds removed; unpruned
    /// trajectories contribute 0.
    pub mean_reduction: f64,
    /// The same mean over pruned trajectories only.
    pub mean_reduction_pruned: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub input: usize,
    pub output: usize,
    pub counter: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeamStats {
    pub total: usize,
    pub rewritten: usize,
    pub kept_original: usize,
    pub score_fallbacks: usize,
}

/// Summary written to `report.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub input_trajectories: usize,
    pub filter: FilterSummary,
    /// Trajectories taken from earlier runs' saved state.
    pub resumed: usize,
    pub outcomes: OutcomeCounts,
    /// Failure counts by reason code.
    pub failures: BTreeMap<String, usize>,
    pub pools: PoolCounts,
    pub exports: BTreeMap<String, ExportSummary>,
    pub rounds: RoundStats,
    pub tokens: TokenStats,
    pub seams: SeamStats,
    /// Logical model calls made by this invocation, per role.
    pub llm_calls: BTreeMap<String, u64>,
}

impl PipelineReport {
    /// Every input trajectory is either held back by the filter or in exactly
    /// one outcome bucket, and the pools are consistent with the outcomes.
    pub fn is_conserved(&self) -> bool {
        let o = &self.outcomes;
        self.input_trajectories == self.filter.trajectories_held_back + o.total()
            && self.pools.pruned == o.pruned
            && self.pools.unpruned + self.pools.overlap_dropped == o.no_redundancy + o.discarded + o.unreachable
    }

    /// 0 on full success, 1 if any trajectory failed, 4 if every processed
    /// trajectory failed because its endpoints were unavailable.
    pub fn exit_code(&self) -> i32 {
        let failed = self.outcomes.failed;
        if failed == 0 {
            return 0;
        }
        let endpoint: usize =
            ["transport", "rate_limited", "auth"].iter().filter_map(|c| self.failures.get(*c)).sum();
        if failed == self.outcomes.total() && endpoint == failed {
            4
        } else {
            1
        }
    }
}

impl fmt::Display for PipelineReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let o = &self.outcomes;
        writeln!(f, "input trajectories   {}", self.input_trajectories)?;
        if self.filter.applied {
            writeln!(
                f,
                "filter               {} of {} queries kept, {} trajectories forwarded",
                self.filter.queries_kept, self.filter.queries, self.filter.trajectories_forwarded
            )?;
        }
        writeln!(f, "pruned               {}", o.pruned)?;
        writeln!(f, "no redundancy        {}", o.no_redundancy)?;
        writeln!(f, "vote discarded       {}", o.discarded)?;
        writeln!(f, "unreachable answer   {}", o.unreachable)?;
        writeln!(f, "failed               {}", o.failed)?;
        writeln!(
            f,
            "tool-call rounds     {} -> {} (mean reduction {:.1}%, pruned only {:.1}%)",
            self.rounds.input,
            self.rounds.output,
            100.0 * self.rounds.mean_reduction,
            100.0 * self.rounds.mean_reduction_pruned
        )?;
        writeln!(f, "seams rewritten      {} of {}", self.seams.rewritten, self.seams.total)?;
        for (mode, e) in &self.exports {
            match &e.error {
                Some(err) => writeln!(f, "export {mode:<13} skipped: {err}")?,
                None => writeln!(f, "export {mode:<13} {} examples", e.examples)?,
            }
        }
        write!(f, "tokens are counted {}", self.tokens.counter)
    }
}
