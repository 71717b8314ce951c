//! Library surface of the pipeline CLI, kept separate from argument parsing
//! so the orchestration is directly testable.

pub mod config;
pub mod experiments;
pub mod pipeline;

pub use config::{parse_grid, ModuleSelection, PipelineConfig};
pub use pipeline::{build_examples, evaluate_run, run_pipeline, split_students, Manifest, RunOutput};
