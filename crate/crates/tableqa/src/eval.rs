//! Exact match, token consumption, and turn count over episode transcripts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::EpisodeTranscript;

/// How answer-item lists are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Item order is ignored (canonical items are sorted before comparison).
    #[default]
    Multiset,
    /// Items must appear in the same order.
    Ordered,
}

impl std::str::FromStr for MatchMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multiset" => Ok(MatchMode::Multiset),
            "ordered" => Ok(MatchMode::Ordered),
            other => Err(format!("unknown match mode {other:?}")),
        }
    }
}

/// One rendered row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub label: String,
    /// Fraction in [0, 1].
    pub accuracy: f64,
    pub avg_tokens: f64,
    pub avg_turns: f64,
    pub n: usize,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no transcripts to aggregate")]
    Empty,
    #[error("transcripts ({transcripts}) and golds ({golds}) differ in length")]
    LengthMismatch { transcripts: usize, golds: usize },
}

/// Canonicalize answer items: trim, collapse internal whitespace runs to one
/// space, case-fold. Multiset mode sorts the canonical items.
pub fn normalize_answer(items: &[String], mode: MatchMode) -> Vec<String> {
    let mut out: Vec<String> = items
        .iter()
        .map(|item| {
            item.split_whitespace()
                .collect::<Vec<_>>()
                .join(" ")
                .to_lowercase()
        })
        .collect();
    if mode == MatchMode::Multiset {
        out.sort();
    }
    out
}

/// Exact match of a predicted item list against the gold list. Absent
/// predictions never match.
pub fn exact_match(pred: Option<&[String]>, gold: &[String], mode: MatchMode) -> bool {
    match pred {
        None => false,
        Some(items) => normalize_answer(items, mode) == normalize_answer(gold, mode),
    }
}

/// Aggregate the three metrics over transcripts. Unanswered episodes count as
/// wrong but still contribute their tokens and turns to the means.
pub fn aggregate(
    label: &str,
    transcripts: &[EpisodeTranscript],
    golds: &[Vec<String>],
    mode: MatchMode,
) -> Result<MetricsRow, EvalError> {
    if transcripts.is_empty() {
        return Err(EvalError::Empty);
    }
    if transcripts.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            transcripts: transcripts.len(),
            golds: golds.len(),
        });
    }
    let n = transcripts.len();
    let matches = transcripts
        .iter()
        .zip(golds)
        .filter(|(t, gold)| exact_match(t.final_answer.as_deref(), gold, mode))
        .count();
    let total_tokens: u64 = transcripts.iter().map(|t| t.total_tokens).sum();
    let total_turns: u64 = transcripts.iter().map(|t| u64::from(t.turns)).sum();
    Ok(MetricsRow {
        label: label.to_string(),
        accuracy: matches as f64 / n as f64,
        avg_tokens: total_tokens as f64 / n as f64,
        avg_turns: total_turns as f64 / n as f64,
        n,
    })
}

/// Rounded display values: accuracy to 0.1 pp, tokens to a thousands-separated
/// integer, turns to 0.1.
pub fn format_row_values(row: &MetricsRow) -> (String, String, String) {
    (
        format!("{:.1}%", row.accuracy * 100.0),
        thousands(row.avg_tokens.round() as i64),
        format!("{:.1}", row.avg_turns),
    )
}

fn thousands(mut n: i64) -> String {
    let negative = n < 0;
    n = n.abs();
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    if negative {
        format!("-{out}")
    } else {
        out
    }
}

/// Fixed-width text table in the Model / Accuracy / Avg. Token / Avg. Turn
/// column order. Formatting is stable for golden-file tests.
pub fn report(rows: &[MetricsRow]) -> String {
    let headers = ["Model", "Accuracy", "Avg. Token", "Avg. Turn"];
    let mut cells: Vec<[String; 4]> = Vec::with_capacity(rows.len());
    for row in rows {
        let (acc, tokens, turns) = format_row_values(row);
        cells.push([row.label.clone(), acc, tokens, turns]);
    }
    let mut widths = [0usize; 4];
    for (i, h) in headers.iter().enumerate() {
        widths[i] = h.chars().count();
    }
    for row in &cells {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let render_line = |cols: [&str; 4], widths: &[usize; 4]| -> String {
        let mut line = String::new();
        for (i, col) in cols.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            line.push_str(col);
            if i < 3 {
                for _ in col.chars().count()..widths[i] {
                    line.push(' ');
                }
            }
        }
        line.trim_end().to_string()
    };
    out.push_str(&render_line(
        [headers[0], headers[1], headers[2], headers[3]],
        &widths,
    ));
    for row in &cells {
        out.push('\n');
        out.push_str(&render_line(
            [&row[0], &row[1], &row[2], &row[3]],
            &widths,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{Termination, TranscriptMessage};

    pub(crate) fn transcript(
        answer: Option<&[&str]>,
        tokens: u64,
        turns: u32,
    ) -> EpisodeTranscript {
        EpisodeTranscript {
            question_id: "q".into(),
            messages: Vec::<TranscriptMessage>::new(),
            tool_calls: Vec::new(),
            usage_log: Vec::new(),
            final_answer: answer.map(|items| items.iter().map(|s| s.to_string()).collect()),
            termination: if answer.is_some() {
                Termination::Answered
            } else {
                Termination::ContextExhausted
            },
            turns,
            total_tokens: tokens,
            endpoint_error: None,
        }
    }

    fn golds(items: &[&[&str]]) -> Vec<Vec<String>> {
        items
            .iter()
            .map(|g| g.iter().map(|s| s.to_string()).collect())
            .collect()
    }

    #[test]
    fn normalize_trims_folds_and_collapses() {
        assert_eq!(
            normalize_answer(&[" Atlanta ".to_string()], MatchMode::Multiset),
            vec!["atlanta"]
        );
        assert_eq!(
            normalize_answer(&["New  York".to_string()], MatchMode::Multiset),
            vec!["new york"]
        );
    }

    #[test]
    fn multiset_ignores_order_ordered_does_not() {
        let a = vec!["b".to_string(), "a".to_string()];
        let b = vec!["a".to_string(), "b".to_string()];
        assert!(exact_match(Some(&a), &b, MatchMode::Multiset));
        assert!(!exact_match(Some(&a), &b, MatchMode::Ordered));
    }

    #[test]
    fn exact_match_basics() {
        let gold = vec!["1978".to_string()];
        assert!(exact_match(Some(&["1978".to_string()]), &gold, MatchMode::Multiset));
        assert!(!exact_match(None, &gold, MatchMode::Multiset));
        let pred = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let gold3 = vec!["c".to_string(), "a".to_string(), "b".to_string()];
        assert!(exact_match(Some(&pred), &gold3, MatchMode::Multiset));
    }

    #[test]
    fn aggregate_and_render_table3_zero_shot_row() {
        // 123/1024 matches, all totals 11,997 tokens, turn sum picked so the
        // mean lands in the 52.9 rounding bucket.
        let mut transcripts = Vec::new();
        let mut gs = Vec::new();
        let turn_sum = 54_170u64; // 54,170/1,024 = 52.900...
        let mut remaining = turn_sum;
        for i in 0..1024u64 {
            let turns = if i < 1023 {
                let t = turn_sum / 1024;
                remaining -= t;
                t as u32
            } else {
                remaining as u32
            };
            let answered = i < 123;
            transcripts.push(transcript(
                if answered { Some(&["x"]) } else { None },
                11_997,
                turns,
            ));
            gs.push(vec!["x".to_string()]);
        }
        let row = aggregate("Qwen3-4B (Zero-Shot)", &transcripts, &gs, MatchMode::Multiset).unwrap();
        let (acc, tokens, turns) = format_row_values(&row);
        assert_eq!((acc.as_str(), tokens.as_str(), turns.as_str()), ("12.0%", "11,997", "52.9"));
    }

    #[test]
    fn aggregate_and_render_table5_grpo_row() {
        let mut transcripts = Vec::new();
        let mut gs = Vec::new();
        let turn_sum = 6_963u64; // 6,963/1,024 = 6.7998...
        let mut remaining = turn_sum;
        for i in 0..1024u64 {
            let turns = if i < 1023 {
                let t = turn_sum / 1024;
                remaining -= t;
                t as u32
            } else {
                remaining as u32
            };
            let answered = i < 883;
            transcripts.push(transcript(
                if answered { Some(&["x"]) } else { None },
                2_690,
                turns,
            ));
            gs.push(vec!["x".to_string()]);
        }
        let row = aggregate("Qwen3-4B (Cold Start+Async GRPO)", &transcripts, &gs, MatchMode::Multiset)
            .unwrap();
        let (acc, tokens, turns) = format_row_values(&row);
        assert_eq!((acc.as_str(), tokens.as_str(), turns.as_str()), ("86.2%", "2,690", "6.8"));
    }

    #[test]
    fn single_correct_transcript() {
        let transcripts = vec![transcript(Some(&["Atlanta"]), 100, 3)];
        let row = aggregate("one", &transcripts, &golds(&[&["atlanta"]]), MatchMode::Multiset)
            .unwrap();
        assert_eq!(row.accuracy, 1.0);
        assert_eq!(row.n, 1);
    }

    #[test]
    fn aggregate_errors() {
        assert!(matches!(
            aggregate("x", &[], &[], MatchMode::Multiset),
            Err(EvalError::Empty)
        ));
        let transcripts = vec![transcript(None, 1, 1)];
        assert!(matches!(
            aggregate("x", &transcripts, &[], MatchMode::Multiset),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn aggregate_is_permutation_invariant_and_count_is_integer() {
        let transcripts = vec![
            transcript(Some(&["a"]), 10, 1),
            transcript(None, 30, 5),
            transcript(Some(&["b"]), 20, 2),
        ];
        let gs = golds(&[&["a"], &["zz"], &["b"]]);
        let row = aggregate("x", &transcripts, &gs, MatchMode::Multiset).unwrap();
        let mut permuted: Vec<(EpisodeTranscript, Vec<String>)> = transcripts
            .iter()
            .cloned()
            .zip(gs.iter().cloned())
            .collect();
        permuted.reverse();
        let (pt, pg): (Vec<_>, Vec<_>) = permuted.into_iter().unzip();
        let row2 = aggregate("x", &pt, &pg, MatchMode::Multiset).unwrap();
        assert_eq!(row.accuracy, row2.accuracy);
        assert_eq!(row.avg_tokens, row2.avg_tokens);
        assert_eq!(row.avg_turns, row2.avg_turns);
        let count = row.accuracy * row.n as f64;
        assert!((count - count.round()).abs() < 1e-9);
    }

    #[test]
    fn report_renders_rows_in_order() {
        let rows = vec![
            MetricsRow {
                label: "A".into(),
                accuracy: 0.5,
                avg_tokens: 1000.0,
                avg_turns: 2.0,
                n: 2,
            },
            MetricsRow {
                label: "B".into(),
                accuracy: 1.0,
                avg_tokens: 5.0,
                avg_turns: 1.0,
                n: 1,
            },
        ];
        let text = report(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("Model"));
        assert!(lines[1].starts_with("A"));
        assert!(lines[2].starts_with("B"));
        let one = report(&rows[..1]);
        assert_eq!(one.lines().count(), 2);
    }

    #[test]
    fn thousands_formatting() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(11_997), "11,997");
        assert_eq!(thousands(2_690), "2,690");
        assert_eq!(thousands(1_234_567), "1,234,567");
    }
}
