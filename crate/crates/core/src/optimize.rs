//! Applies the coordination and collaboration passes across a whole corpus.
//!
//! Per student, each selected module runs over every skill's subsequence.
//! Within one module application all skill passes read the same input
//! snapshot, and their flips are merged afterwards; since binary flips can
//! only move a position to the complement of its snapshot value, skill
//! passes can never conflict. When both modules are selected the second
//! operates on the first's output states.
//!
//! The optional `fraction` limits optimization to the chronologically
//! earliest part of each sequence: the leading `fraction` of every student's
//! interactions is optimized as a sequence of its own and the remainder is
//! left untouched.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::collaboration;
use crate::coordination::{self, StateDifficulty, StateDifficultySeq};
use crate::corpus::{Corpus, QuestionId, SkillId, StudentId, StudentSequence};
use crate::difficulty::QuestionStats;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OptimizeError {
    #[error("unknown module order `{0}` (expected coo-col, col-coo, coo, or col)")]
    BadOrder(String),
    #[error("fraction {0} outside [0, 1]")]
    BadFraction(String),
    #[error("discount {0} outside (0, 1]")]
    BadDiscount(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModuleKind {
    Coo,
    Col,
}

impl std::fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModuleKind::Coo => "coo",
            ModuleKind::Col => "col",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModuleOrder {
    #[default]
    CooThenCol,
    ColThenCoo,
    CooOnly,
    ColOnly,
}

impl ModuleOrder {
    pub fn modules(self) -> &'static [ModuleKind] {
        match self {
            ModuleOrder::CooThenCol => &[ModuleKind::Coo, ModuleKind::Col],
            ModuleOrder::ColThenCoo => &[ModuleKind::Col, ModuleKind::Coo],
            ModuleOrder::CooOnly => &[ModuleKind::Coo],
            ModuleOrder::ColOnly => &[ModuleKind::Col],
        }
    }
}

impl std::str::FromStr for ModuleOrder {
    type Err = OptimizeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coo-col" => Ok(ModuleOrder::CooThenCol),
            "col-coo" => Ok(ModuleOrder::ColThenCoo),
            "coo" => Ok(ModuleOrder::CooOnly),
            "col" => Ok(ModuleOrder::ColOnly),
            other => Err(OptimizeError::BadOrder(other.to_string())),
        }
    }
}

impl std::fmt::Display for ModuleOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModuleOrder::CooThenCol => "coo-col",
            ModuleOrder::ColThenCoo => "col-coo",
            ModuleOrder::CooOnly => "coo",
            ModuleOrder::ColOnly => "col",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeOptions {
    pub alpha: f64,
    pub beta: f64,
    /// Discount for the coordination cost report; does not change states.
    pub discount: f64,
    pub order: ModuleOrder,
    /// Leading fraction of each sequence eligible for optimization.
    pub fraction: f64,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        OptimizeOptions {
            alpha: 0.8,
            beta: 0.05,
            discount: 1.0,
            order: ModuleOrder::CooThenCol,
            fraction: 1.0,
        }
    }
}

/// One rewritten response state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlipRecord {
    pub student_id: StudentId,
    pub skill_id: SkillId,
    /// Position in the student's sequence.
    pub position: usize,
    pub before: u8,
    pub after: u8,
    /// For coordination: position of the last later entry whose control
    /// fired. For collaboration: position of the cluster's first member.
    pub trigger_position: usize,
    pub module: ModuleKind,
}

/// Original corpus plus the rewritten binary states and the change ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizedCorpus {
    pub states: BTreeMap<StudentId, Vec<u8>>,
    pub flips: Vec<FlipRecord>,
}

impl OptimizedCorpus {
    /// Materializes a corpus with the rewritten responses.
    pub fn apply_to(&self, corpus: &Corpus) -> Corpus {
        let sequences = corpus
            .sequences
            .iter()
            .map(|(id, seq)| {
                let states = &self.states[id];
                let interactions = seq
                    .interactions
                    .iter()
                    .zip(states)
                    .map(|(it, &state)| {
                        let mut it = it.clone();
                        it.response = state;
                        it
                    })
                    .collect();
                (id.clone(), StudentSequence { student_id: id.clone(), interactions })
            })
            .collect();
        Corpus::from_sequences(sequences)
    }
}

fn difficulty_of(stats: &BTreeMap<QuestionId, QuestionStats>, question: &str) -> f64 {
    stats.get(question).map_or(0.5, |s| s.norm_difficulty)
}

/// Rewrites response states across the corpus per the selected modules.
pub fn optimize_corpus(
    corpus: &Corpus,
    stats: &BTreeMap<QuestionId, QuestionStats>,
    options: &OptimizeOptions,
) -> Result<OptimizedCorpus, OptimizeError> {
    if !(0.0..=1.0).contains(&options.fraction) {
        return Err(OptimizeError::BadFraction(options.fraction.to_string()));
    }
    if !(options.discount > 0.0 && options.discount <= 1.0) {
        return Err(OptimizeError::BadDiscount(options.discount.to_string()));
    }
    let mut states: BTreeMap<StudentId, Vec<u8>> = corpus
        .sequences
        .iter()
        .map(|(id, seq)| (id.clone(), seq.interactions.iter().map(|it| it.response).collect()))
        .collect();
    let mut flips = Vec::new();

    for (student_id, seq) in &corpus.sequences {
        let total = seq.interactions.len();
        let prefix_len = ((options.fraction * total as f64).round() as usize).min(total);
        if prefix_len == 0 {
            continue;
        }
        let working = states.get_mut(student_id).expect("state vector exists");
        let mut skills: Vec<&SkillId> = seq
            .interactions
            .iter()
            .flat_map(|it| it.skill_ids.iter())
            .collect();
        skills.sort_unstable();
        skills.dedup();

        for &module in options.order.modules() {
            let snapshot = working.clone();
            for skill in &skills {
                let subsequence: Vec<(usize, f64)> = seq
                    .interactions
                    .iter()
                    .enumerate()
                    .take(prefix_len)
                    .filter(|(_, it)| it.skill_ids.contains(*skill))
                    .map(|(pos, it)| (pos, difficulty_of(stats, &it.question_id)))
                    .collect();
                if subsequence.len() < 2 {
                    continue;
                }
                match module {
                    ModuleKind::Coo => {
                        let entries: Vec<StateDifficulty> = subsequence
                            .iter()
                            .map(|&(pos, difficulty)| StateDifficulty {
                                state: snapshot[pos],
                                difficulty,
                                position: pos,
                            })
                            .collect();
                        let seq_in = StateDifficultySeq::new(entries)
                            .expect("normalized difficulties and valid positions");
                        let result =
                            coordination::coordinate_sequence(&seq_in, options.alpha, options.discount)
                                .expect("non-empty subsequence");
                        for flip in &result.flips {
                            working[flip.position] = flip.after;
                            flips.push(FlipRecord {
                                student_id: student_id.clone(),
                                skill_id: (*skill).clone(),
                                position: flip.position,
                                before: flip.before,
                                after: flip.after,
                                trigger_position: flip.trigger_position,
                                module: ModuleKind::Coo,
                            });
                        }
                    }
                    ModuleKind::Col => {
                        let entries: Vec<(u8, f64, usize)> = subsequence
                            .iter()
                            .map(|&(pos, difficulty)| (snapshot[pos], difficulty, pos))
                            .collect();
                        let result = collaboration::collaborate_sequence(&entries, options.beta);
                        for flip in &result.flips {
                            working[flip.position] = flip.after;
                            flips.push(FlipRecord {
                                student_id: student_id.clone(),
                                skill_id: (*skill).clone(),
                                position: flip.position,
                                before: flip.before,
                                after: flip.after,
                                trigger_position: flip.cluster_anchor,
                                module: ModuleKind::Col,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(OptimizedCorpus { states, flips })
}

pub fn write_flips_csv<W: std::io::Write>(
    flips: &[FlipRecord],
    writer: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "student_id",
        "skill_id",
        "position",
        "before",
        "after",
        "trigger_position",
        "module",
    ])?;
    for f in flips {
        w.write_record([
            f.student_id.as_str(),
            f.skill_id.as_str(),
            &f.position.to_string(),
            &f.before.to_string(),
            &f.after.to_string(),
            &f.trigger_position.to_string(),
            &f.module.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
