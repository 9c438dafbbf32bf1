//! Comparison tables over one or more evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::eval::{EvalReport, TurnRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningRow {
    pub label: String,
    pub mean_tokens: f64,
    pub max_tokens: usize,
    pub histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRow {
    pub label: String,
    /// "0", "1" or ">=2".
    pub searches: String,
    pub turns: usize,
    pub mean_answer_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub label: String,
    pub mean_answer_f1: f64,
    pub mean_intent_f1: f64,
    pub mean_hit_at_3: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitBinRow {
    pub label: String,
    pub hit_at_3: u8,
    pub turns: usize,
    pub mean_answer_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub reasoning_length: Vec<ReasoningRow>,
    pub searches_vs_f1: Vec<SearchRow>,
    pub alpha_sweep: Vec<AlphaRow>,
    pub hit_bins: Vec<HitBinRow>,
}

fn mean_f1<'a>(records: impl Iterator<Item = &'a TurnRecord>) -> (usize, f64) {
    let (n, s) = records.fold((0, 0.0), |(n, s), r| (n + 1, s + r.answer_f1));
    (n, if n == 0 { 0.0 } else { s / n as f64 })
}

fn search_bucket(n: usize) -> &'static str {
    match n {
        0 => "0",
        1 => "1",
        _ => ">=2",
    }
}

/// Turns without a query fall in the miss bin, so bins partition all turns.
pub fn hit_bins(report: &EvalReport) -> [HitBinRow; 2] {
    [0u8, 1].map(|h| {
        let (turns, mean_answer_f1) = mean_f1(report.per_turn.iter().filter(|r| r.hit_at_3.unwrap_or(0) == h));
        HitBinRow {
            label: report.label.clone(),
            hit_at_3: h,
            turns,
            mean_answer_f1,
        }
    })
}

pub fn build_report(reports: &[EvalReport]) -> Report {
    let mut out = Report {
        reasoning_length: Vec::new(),
        searches_vs_f1: Vec::new(),
        alpha_sweep: Vec::new(),
        hit_bins: Vec::new(),
    };
    for r in reports {
        let tokens: Vec<usize> = r.per_turn.iter().map(|t| t.reasoning_tokens).collect();
        out.reasoning_length.push(ReasoningRow {
            label: r.label.clone(),
            mean_tokens: if tokens.is_empty() {
                0.0
            } else {
                tokens.iter().sum::<usize>() as f64 / tokens.len() as f64
            },
            max_tokens: tokens.iter().copied().max().unwrap_or(0),
            histogram: r.aggregates.reasoning_histogram.clone(),
        });
        for bucket in ["0", "1", ">=2"] {
            let (turns, mean_answer_f1) =
                mean_f1(r.per_turn.iter().filter(|t| search_bucket(t.searches_used) == bucket));
            if turns > 0 {
                out.searches_vs_f1.push(SearchRow {
                    label: r.label.clone(),
                    searches: bucket.into(),
                    turns,
                    mean_answer_f1,
                });
            }
        }
        if let Some(alpha) = r.alpha {
            out.alpha_sweep.push(AlphaRow {
                alpha,
                label: r.label.clone(),
                mean_answer_f1: r.aggregates.mean_answer_f1,
                mean_intent_f1: r.aggregates.mean_intent_f1,
                mean_hit_at_3: r.aggregates.mean_hit_at_3,
            });
        }
        out.hit_bins.extend(hit_bins(r));
    }
    out.alpha_sweep.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    out
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Reasoning length (think words per turn)");
        let _ = writeln!(s, "{:<24} {:>10} {:>6}", "run", "mean", "max");
        for r in &self.reasoning_length {
            let _ = writeln!(s, "{:<24} {:>10.2} {:>6}", r.label, r.mean_tokens, r.max_tokens);
        }
        let _ = writeln!(s, "\n# Searches used vs answer F1");
        let _ = writeln!(s, "{:<24} {:>8} {:>6} {:>8}", "run", "searches", "turns", "F1");
        for r in &self.searches_vs_f1 {
            let _ = writeln!(
                s,
                "{:<24} {:>8} {:>6} {:>8.4}",
                r.label, r.searches, r.turns, r.mean_answer_f1
            );
        }
        let _ = writeln!(s, "\n# Alpha sweep");
        let _ = writeln!(
            s,
            "{:>6} {:<24} {:>8} {:>8} {:>8}",
            "alpha", "run", "F1", "intent", "hit@3"
        );
        for r in &self.alpha_sweep {
            let _ = writeln!(
                s,
                "{:>6} {:<24} {:>8.4} {:>8.4} {:>8}",
                r.alpha,
                r.label,
                r.mean_answer_f1,
                r.mean_intent_f1,
                opt(r.mean_hit_at_3)
            );
        }
        let _ = writeln!(s, "\n# Answer F1 by first-query hit@3");
        let _ = writeln!(s, "{:<24} {:>6} {:>6} {:>8}", "run", "hit@3", "turns", "F1");
        for r in &self.hit_bins {
            let _ = writeln!(
                s,
                "{:<24} {:>6} {:>6} {:>8.4}",
                r.label, r.hit_at_3, r.turns, r.mean_answer_f1
            );
        }
        s
    }
}
