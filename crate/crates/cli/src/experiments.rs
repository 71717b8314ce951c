//! Experiment harnesses over the pipeline: module ablations, optimized-data
//! quantification, and threshold sensitivity sweeps.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use crate::config::{ModuleSelection, PipelineConfig};
use crate::pipeline::{run_pipeline, RunOutput};

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentRow {
    pub name: String,
    pub auc: Option<f64>,
    pub acc: f64,
    pub rmse: f64,
    pub n_predictions: usize,
    pub coo_flips: usize,
    pub col_flips: usize,
}

impl ExperimentRow {
    fn from_run(name: String, run: &RunOutput) -> Self {
        ExperimentRow {
            name,
            auc: run.report.auc,
            acc: run.report.acc,
            rmse: run.report.rmse,
            n_predictions: run.report.n_predictions,
            coo_flips: run.coo_flips,
            col_flips: run.col_flips,
        }
    }
}

pub fn write_rows_csv(rows: &[ExperimentRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(fs::File::create(path)?);
    w.write_record(["name", "auc", "acc", "rmse", "n_predictions", "coo_flips", "col_flips"])?;
    for row in rows {
        w.write_record([
            row.name.clone(),
            row.auc.map_or(String::new(), |v| format!("{v:.17}")),
            format!("{:.17}", row.acc),
            format!("{:.17}", row.rmse),
            row.n_predictions.to_string(),
            row.coo_flips.to_string(),
            row.col_flips.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One pipeline run per module combination; rows land in `out_dir/ablation.csv`
/// and each run keeps its own subdirectory.
pub fn run_ablation(
    input: &Path,
    base: &PipelineConfig,
    combos: &[ModuleSelection],
    out_dir: &Path,
) -> Result<Vec<ExperimentRow>> {
    if combos.is_empty() {
        bail!("ablation grid is empty");
    }
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(combos.len());
    for combo in combos {
        let config = PipelineConfig { modules: *combo, ..base.clone() };
        let run_dir = out_dir.join(combo.name());
        let run = run_pipeline(input, &config, &run_dir)
            .with_context(|| format!("ablation `{}`", combo.name()))?;
        rows.push(ExperimentRow::from_run(combo.name().to_string(), &run));
    }
    write_rows_csv(&rows, &out_dir.join("ablation.csv"))?;
    Ok(rows)
}

/// Optimizes only the leading fraction of every sequence, one run per
/// fraction.
pub fn run_quantification(
    input: &Path,
    base: &PipelineConfig,
    fractions: &[f64],
    out_dir: &Path,
) -> Result<Vec<ExperimentRow>> {
    if fractions.is_empty() {
        bail!("no fractions given");
    }
    for f in fractions {
        if !(0.0..=1.0).contains(f) {
            bail!("fraction {f} outside [0, 1]");
        }
    }
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let config = PipelineConfig { fraction, ..base.clone() };
        let name = format!("frac_{:03}", (fraction * 100.0).round() as u32);
        let run = run_pipeline(input, &config, &out_dir.join(&name))
            .with_context(|| format!("quantification fraction {fraction}"))?;
        rows.push(ExperimentRow::from_run(name, &run));
    }
    write_rows_csv(&rows, &out_dir.join("quantify.csv"))?;
    Ok(rows)
}

/// Sweeps the coordination threshold over `alphas` (coordination pass only)
/// and the clustering bound over `betas` (collaboration pass only); one
/// evaluation per grid point.
pub fn run_sensitivity(
    input: &Path,
    base: &PipelineConfig,
    alphas: &[f64],
    betas: &[f64],
    out_dir: &Path,
) -> Result<Vec<ExperimentRow>> {
    if alphas.is_empty() && betas.is_empty() {
        bail!("both sweep grids are empty");
    }
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for &alpha in alphas {
        let config = PipelineConfig {
            alpha,
            modules: ModuleSelection { coo: true, col: false, bte: base.modules.bte },
            ..base.clone()
        };
        let name = format!("alpha_{alpha:.3}");
        let run = run_pipeline(input, &config, &out_dir.join(&name))
            .with_context(|| format!("sweep alpha {alpha}"))?;
        rows.push(ExperimentRow::from_run(name, &run));
    }
    for &beta in betas {
        let config = PipelineConfig {
            beta,
            modules: ModuleSelection { coo: false, col: true, bte: base.modules.bte },
            ..base.clone()
        };
        let name = format!("beta_{beta:.3}");
        let run = run_pipeline(input, &config, &out_dir.join(&name))
            .with_context(|| format!("sweep beta {beta}"))?;
        rows.push(ExperimentRow::from_run(name, &run));
    }
    write_rows_csv(&rows, &out_dir.join("sweep.csv"))?;
    Ok(rows)
}
