//! Optimization of student answer records for knowledge tracing.
//!
//! The pipeline ingests interaction logs, estimates per-question difficulty,
//! repairs uncoordinated and non-synergistic response records (a forward
//! control scan plus a weighted-consensus pass over same-skill exercises),
//! trains question/skill embeddings on the question-skill bipartite graph,
//! and evaluates the effect on next-answer prediction.

pub mod collaboration;
pub mod coordination;
pub mod corpus;
pub mod difficulty;
pub mod graph_embed;
pub mod metrics;
pub mod opt;
pub mod optimize;
pub mod predictor;
pub mod synth;

pub use corpus::{Corpus, CorpusCounts, CsvSchema, Interaction, StudentSequence};
pub use difficulty::QuestionStats;
pub use graph_embed::{BipartiteGraph, EmbeddingSet};
pub use optimize::{FlipRecord, ModuleKind, ModuleOrder, OptimizedCorpus};
pub use predictor::{EvalReport, PredictorModel};
