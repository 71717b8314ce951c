//! Per-question correctness rate and difficulty.
//!
//! The raw difficulty of a question is the reciprocal of its correct rate.
//! The correct rate is Laplace-smoothed, `P = (C + 1) / (M + 2)`, so that
//! never-correct questions keep a finite difficulty and `P` stays strictly
//! inside (0, 1). Raw difficulties are min-max normalized over the question
//! set; the normalized value in [0, 1] is what the optimization thresholds
//! and consensus weights consume.

use std::collections::{BTreeMap, BTreeSet};
use std::io;

use crate::corpus::{Corpus, QuestionId, StudentId};

#[derive(Debug, Clone, PartialEq)]
pub struct QuestionStats {
    pub question_id: QuestionId,
    /// Total attempts over all students (M).
    pub attempts: u64,
    /// Correct attempts (C).
    pub corrects: u64,
    /// Smoothed correct rate (C + 1) / (M + 2), strictly in (0, 1).
    pub correct_rate: f64,
    /// 1 / correct_rate, always > 1.
    pub raw_difficulty: f64,
    /// Min-max normalized raw difficulty in [0, 1].
    pub norm_difficulty: f64,
}

/// Stats over every question in the corpus.
pub fn compute_stats(corpus: &Corpus) -> BTreeMap<QuestionId, QuestionStats> {
    compute_stats_for_students(corpus, None)
}

/// Stats restricted to a subset of students (e.g. the training split). Pass
/// `None` for the whole corpus. Questions never attempted by the subset are
/// absent from the result.
pub fn compute_stats_for_students(
    corpus: &Corpus,
    students: Option<&BTreeSet<StudentId>>,
) -> BTreeMap<QuestionId, QuestionStats> {
    let mut tally: BTreeMap<&QuestionId, (u64, u64)> = BTreeMap::new();
    for seq in corpus.sequences.values() {
        if let Some(subset) = students {
            if !subset.contains(&seq.student_id) {
                continue;
            }
        }
        for it in &seq.interactions {
            let entry = tally.entry(&it.question_id).or_insert((0, 0));
            entry.0 += 1;
            entry.1 += u64::from(it.response == 1);
        }
    }

    let raw: Vec<(&QuestionId, u64, u64, f64, f64)> = tally
        .into_iter()
        .map(|(q, (m, c))| {
            let p = (c as f64 + 1.0) / (m as f64 + 2.0);
            (q, m, c, p, 1.0 / p)
        })
        .collect();

    let d_min = raw.iter().map(|r| r.4).fold(f64::INFINITY, f64::min);
    let d_max = raw.iter().map(|r| r.4).fold(f64::NEG_INFINITY, f64::max);
    let degenerate = d_max <= d_min;

    raw.into_iter()
        .map(|(q, m, c, p, d)| {
            let norm = if degenerate { 0.5 } else { (d - d_min) / (d_max - d_min) };
            (
                q.clone(),
                QuestionStats {
                    question_id: q.clone(),
                    attempts: m,
                    corrects: c,
                    correct_rate: p,
                    raw_difficulty: d,
                    norm_difficulty: norm,
                },
            )
        })
        .collect()
}

pub fn write_stats_csv<W: io::Write>(
    stats: &BTreeMap<QuestionId, QuestionStats>,
    writer: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["question_id", "M", "C", "P", "D", "d"])?;
    for s in stats.values() {
        w.write_record([
            s.question_id.as_str(),
            &s.attempts.to_string(),
            &s.corrects.to_string(),
            &format!("{:.17}", s.correct_rate),
            &format!("{:.17}", s.raw_difficulty),
            &format!("{:.17}", s.norm_difficulty),
        ])?;
    }
    w.flush()?;
    Ok(())
}
