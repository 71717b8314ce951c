//! Pipeline configuration and the module-selection grid.

use anyhow::{bail, Result};
use ktopt_core::ModuleOrder;
use serde::{Deserialize, Serialize};

/// Which stages rewrite or enrich the records: the two record-optimization
/// passes and the bipartite embedding training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ModuleSelection {
    pub coo: bool,
    pub col: bool,
    pub bte: bool,
}

impl ModuleSelection {
    pub const GRID: [&'static str; 8] =
        ["raw", "coo", "col", "bte", "bte-coo", "bte-col", "coo-col", "full"];

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "raw" => ModuleSelection { coo: false, col: false, bte: false },
            "coo" => ModuleSelection { coo: true, col: false, bte: false },
            "col" => ModuleSelection { coo: false, col: true, bte: false },
            "bte" => ModuleSelection { coo: false, col: false, bte: true },
            "bte-coo" => ModuleSelection { coo: true, col: false, bte: true },
            "bte-col" => ModuleSelection { coo: false, col: true, bte: true },
            "coo-col" => ModuleSelection { coo: true, col: true, bte: false },
            "full" => ModuleSelection { coo: true, col: true, bte: true },
            other => bail!("unknown module combination `{other}` (expected one of {:?})", Self::GRID),
        })
    }

    pub fn name(&self) -> &'static str {
        match (self.coo, self.col, self.bte) {
            (false, false, false) => "raw",
            (true, false, false) => "coo",
            (false, true, false) => "col",
            (false, false, true) => "bte",
            (true, false, true) => "bte-coo",
            (false, true, true) => "bte-col",
            (true, true, false) => "coo-col",
            (true, true, true) => "full",
        }
    }

    /// Effective optimization order, `None` when neither pass is selected.
    pub fn order(&self, configured: ModuleOrder) -> Option<ModuleOrder> {
        match (self.coo, self.col) {
            (true, true) => Some(configured),
            (true, false) => Some(ModuleOrder::CooOnly),
            (false, true) => Some(ModuleOrder::ColOnly),
            (false, false) => None,
        }
    }
}

/// Everything one run needs; serializes into the manifest so a run directory
/// is reproducible from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub modules: ModuleSelection,
    /// "coo-col" or "col-coo"; applies when both passes are on.
    pub module_order: String,
    pub alpha: f64,
    pub beta: f64,
    pub coo_discount: f64,
    /// Leading fraction of each sequence eligible for optimization.
    pub fraction: f64,
    pub min_seq_len: usize,
    /// Compute difficulty on the whole corpus instead of the training split.
    pub difficulty_on_full: bool,
    pub lambda: f64,
    pub dv: usize,
    pub fused_dim: usize,
    /// Negatives per positive pair and epoch; 0 trains on the full sums.
    pub negative_samples: usize,
    pub embed_epochs: usize,
    pub embed_lr: f64,
    pub embed_batch: usize,
    pub hidden: usize,
    pub predictor_epochs: usize,
    pub predictor_lr: f64,
    pub predictor_batch: usize,
    pub dropout: f64,
    /// Balance between the fused embedding and the response one-hot in the
    /// predictor input.
    pub fusion_weight: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            modules: ModuleSelection { coo: true, col: true, bte: true },
            module_order: "coo-col".into(),
            alpha: 0.8,
            beta: 0.05,
            coo_discount: 1.0,
            fraction: 1.0,
            min_seq_len: 3,
            difficulty_on_full: false,
            lambda: 0.5,
            dv: 64,
            fused_dim: 128,
            negative_samples: 5,
            embed_epochs: 50,
            embed_lr: 0.001,
            embed_batch: 256,
            hidden: 64,
            predictor_epochs: 30,
            predictor_lr: 0.001,
            predictor_batch: 256,
            dropout: 0.5,
            fusion_weight: 0.5,
            train_fraction: 0.8,
            val_fraction: 0.1,
            patience: 5,
            seed: 17,
        }
    }
}

impl PipelineConfig {
    pub fn effective_order(&self) -> Result<Option<ModuleOrder>> {
        let configured: ModuleOrder = self
            .module_order
            .parse()
            .map_err(|e| anyhow::anyhow!("bad module_order: {e}"))?;
        Ok(self.modules.order(configured))
    }
}

/// Parses "start:end:step" into an inclusive grid.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        bail!("grid `{spec}` must have the form start:end:step");
    }
    let start: f64 = parts[0].parse()?;
    let end: f64 = parts[1].parse()?;
    let step: f64 = parts[2].parse()?;
    if step <= 0.0 || end < start {
        bail!("grid `{spec}` must have positive step and end >= start");
    }
    let n = ((end - start) / step).round() as usize;
    let mut values = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let v = start + step * i as f64;
        if v <= end + 1e-9 {
            values.push((v * 1e9).round() / 1e9);
        }
    }
    Ok(values)
}
