//! Accuracy and efficiency metrics over benchmark runs.
//!
//! Efficiency normalizes tool-call rounds against a budget,
//! `E = 1 - rounds / max_rounds` clamped to `[0, 1]`, and F-AE is the harmonic
//! mean of accuracy and efficiency.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_ROUNDS: u32 = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("max_rounds must be at least 1, got {0}")]
    InvalidBudget(u32),
    #[error("no run records")]
    EmptyInput,
    #[error("bucket width must be at least 1")]
    InvalidBucketWidth,
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Efficiency {
    pub value: f64,
    /// Rounds exceeded the budget and `value` was clamped to 0.
    pub over_budget: bool,
}

pub fn efficiency(rounds: f64, max_rounds: u32) -> Result<Efficiency, MetricsError> {
    if max_rounds < 1 {
        return Err(MetricsError::InvalidBudget(max_rounds));
    }
    if !rounds.is_finite() || rounds < 0.0 {
        return Err(MetricsError::InvalidValue(format!("rounds = {rounds}")));
    }
    let raw = 1.0 - rounds / f64::from(max_rounds);
    Ok(Efficiency { value: raw.clamp(0.0, 1.0), over_budget: rounds > f64::from(max_rounds) })
}

pub fn f_ae(acc: f64, rounds: f64, max_rounds: u32) -> Result<f64, MetricsError> {
    if !(0.0..=1.0).contains(&acc) {
        return Err(MetricsError::InvalidValue(format!("accuracy = {acc}")));
    }
    let e = efficiency(rounds, max_rounds)?.value;
    Ok(harmonic(acc, e))
}

fn harmonic(a: f64, e: f64) -> f64 {
    if a + e == 0.0 {
        0.0
    } else {
        2.0 * a * e / (a + e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub question_id: String,
    pub correct: bool,
    pub rounds: u64,
    pub tokens: u64,
}

/// Parses run-record JSONL. Blank lines are skipped.
pub fn parse_records(text: &str) -> Result<Vec<RunRecord>, MetricsError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| MetricsError::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub n: usize,
    pub acc: f64,
    pub avg_rounds: f64,
    pub avg_tokens: f64,
    pub max_rounds: u32,
    /// F-AE from aggregate accuracy and aggregate average rounds.
    pub f_ae: f64,
    /// Mean of per-record F-AE, for comparison only.
    pub mean_record_f_ae: f64,
    /// Records whose rounds exceeded the budget.
    pub over_budget: usize,
}

pub fn summarize(records: &[RunRecord], max_rounds: u32) -> Result<BenchmarkSummary, MetricsError> {
    if max_rounds < 1 {
        return Err(MetricsError::InvalidBudget(max_rounds));
    }
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = records.len() as f64;
    let acc = records.iter().filter(|r| r.correct).count() as f64 / n;
    let avg_rounds = records.iter().map(|r| r.rounds as f64).sum::<f64>() / n;
    let avg_tokens = records.iter().map(|r| r.tokens as f64).sum::<f64>() / n;
    let mut per_record = 0.0;
    let mut over_budget = 0;
    for r in records {
        let e = efficiency(r.rounds as f64, max_rounds)?;
        over_budget += usize::from(e.over_budget);
        per_record += harmonic(if r.correct { 1.0 } else { 0.0 }, e.value);
    }
    Ok(BenchmarkSummary {
        n: records.len(),
        acc,
        avg_rounds,
        avg_tokens,
        max_rounds,
        f_ae: f_ae(acc, avg_rounds, max_rounds)?,
        mean_record_f_ae: per_record / n,
        over_budget,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBuckets {
    pub width: u64,
    /// Bucket index `floor(rounds / width)` to record count.
    pub counts: BTreeMap<u64, usize>,
    /// `(k, accuracy)`: share of all records that are correct and used at most
    /// `k` rounds, for `k = 0..=max rounds`.
    pub cumulative_accuracy: Vec<(u64, f64)>,
}

pub fn histogram(records: &[RunRecord], width: u64) -> Result<HistogramBuckets, MetricsError> {
    if width < 1 {
        return Err(MetricsError::InvalidBucketWidth);
    }
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.rounds / width).or_insert(0) += 1;
    }
    let max = records.iter().map(|r| r.rounds).max().unwrap_or(0);
    let mut correct_at: BTreeMap<u64, usize> = BTreeMap::new();
    for r in records.iter().filter(|r| r.correct) {
        *correct_at.entry(r.rounds).or_insert(0) += 1;
    }
    let n = records.len().max(1) as f64;
    let mut running = 0;
    let cumulative_accuracy = (0..=max)
        .map(|k| {
            running += correct_at.get(&k).copied().unwrap_or(0);
            (k, running as f64 / n)
        })
        .collect();
    Ok(HistogramBuckets { width, counts, cumulative_accuracy })
}

pub fn render_summary_csv(s: &BenchmarkSummary) -> String {
    format!(
        "n,acc,avg_rounds,avg_tokens,max_rounds,f_ae,mean_record_f_ae,over_budget\n{},{:.4},{:.2},{:.1},{},{:.4},{:.4},{}\n",
        s.n, s.acc, s.avg_rounds, s.avg_tokens, s.max_rounds, s.f_ae, s.mean_record_f_ae, s.over_budget
    )
}

pub fn render_histogram_csv(h: &HistogramBuckets) -> String {
    let mut out = String::from("bucket,rounds_from,rounds_to,count\n");
    for (b, c) in &h.counts {
        let _ = writeln!(out, "{b},{},{},{c}", b * h.width, (b + 1) * h.width - 1);
    }
    out
}

pub fn render_cumulative_csv(h: &HistogramBuckets) -> String {
    let mut out = String::from("rounds,cumulative_accuracy\n");
    for (k, a) in &h.cumulative_accuracy {
        let _ = writeln!(out, "{k},{a:.4}");
    }
    out
}

/// Aligned plain-text report.
pub fn render_report(s: &BenchmarkSummary, h: &HistogramBuckets) -> String {
    let mut out = String::new();
    let rows = [
        ("records", s.n.to_string()),
        ("accuracy", format!("{:.4}", s.acc)),
        ("avg rounds", format!("{:.2}", s.avg_rounds)),
        ("avg tokens", format!("{:.1}", s.avg_tokens)),
        ("max rounds", s.max_rounds.to_string()),
        ("F-AE", format!("{:.4}", s.f_ae)),
        ("mean per-record F-AE", format!("{:.4}", s.mean_record_f_ae)),
        ("over budget", s.over_budget.to_string()),
    ];
    let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<w$}  {v:>10}");
    }
    let _ = writeln!(out, "\ntool-call rounds (bucket width {})", h.width);
    let peak = h.counts.values().copied().max().unwrap_or(1).max(1);
    for (b, c) in &h.counts {
        let label = format!("{:>4}-{:<4}", b * h.width, (b + 1) * h.width - 1);
        let bar = "#".repeat((c * 40).div_ceil(peak));
        let _ = writeln!(out, "{label} {c:>6} {bar}");
    }
    out
}
