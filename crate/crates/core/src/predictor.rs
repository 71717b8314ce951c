// Indexed loops over coupled weight rows read better than iterator chains in
// the recurrence and backprop math below.
#![allow(clippy::needless_range_loop)]

//! Minimal recurrent next-answer predictor.
//!
//! A single tanh recurrence consumes one fused input per interaction and a
//! logistic head on the hidden state emits the probability that the *next*
//! answer is correct. Training is plain backpropagation through time over
//! whole sequences with a binary cross-entropy objective, adaptive-moment
//! updates, dropout on the hidden-to-output path, and early stopping on a
//! held-out slice of the training sequences. Everything is seeded and
//! single-threaded, so runs are reproducible bit for bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics;
use crate::opt::AdamState;

const CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("input width {got} does not match model width {want}")]
    WidthMismatch { got: usize, want: usize },
    #[error("no training data")]
    EmptyTrainingSet,
    #[error("no predictions to evaluate")]
    EmptyEvaluation,
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },
}

/// Recurrent model parameters. Widths are fixed at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorModel {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// hidden_dim x input_dim input weights.
    pub w_x: Vec<Vec<f64>>,
    /// hidden_dim x hidden_dim recurrent weights.
    pub w_h: Vec<Vec<f64>>,
    pub b_h: Vec<f64>,
    /// Output head, hidden_dim -> 1.
    pub w_o: Vec<f64>,
    pub b_o: f64,
}

impl PredictorModel {
    pub fn new(input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut row = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.gen_range(-0.05..0.05)).collect()
        };
        PredictorModel {
            input_dim,
            hidden_dim,
            w_x: (0..hidden_dim).map(|_| row(input_dim)).collect(),
            w_h: (0..hidden_dim).map(|_| row(hidden_dim)).collect(),
            b_h: row(hidden_dim),
            w_o: row(hidden_dim),
            b_o: 0.0,
        }
    }

    fn param_count(&self) -> usize {
        self.hidden_dim * self.input_dim + self.hidden_dim * self.hidden_dim + 2 * self.hidden_dim + 1
    }

    /// Flat parameter vector: w_x rows, w_h rows, b_h, w_o, b_o.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten_model(self)
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        unflatten_model(self, flat);
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One recurrence step: h = tanh(Wx x + Wh h_prev + b), y = sigma(w_o . h + b_o).
pub fn step(
    model: &PredictorModel,
    x: &[f64],
    h_prev: &[f64],
) -> Result<(Vec<f64>, f64), PredictorError> {
    if x.len() != model.input_dim {
        return Err(PredictorError::WidthMismatch { got: x.len(), want: model.input_dim });
    }
    if h_prev.len() != model.hidden_dim {
        return Err(PredictorError::WidthMismatch { got: h_prev.len(), want: model.hidden_dim });
    }
    let mut h = vec![0.0; model.hidden_dim];
    for i in 0..model.hidden_dim {
        let mut a = model.b_h[i];
        for (j, xv) in x.iter().enumerate() {
            a += model.w_x[i][j] * xv;
        }
        for (j, hv) in h_prev.iter().enumerate() {
            a += model.w_h[i][j] * hv;
        }
        h[i] = a.tanh();
    }
    let mut z = model.b_o;
    for i in 0..model.hidden_dim {
        z += model.w_o[i] * h[i];
    }
    Ok((h, sigmoid(z)))
}

/// One student's prediction sequence: `inputs[t]` carries interaction t,
/// `targets[t]` the correctness of interaction t + 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceExample {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Slice of the training sequences held out for early stopping.
    pub val_fraction: f64,
    pub patience: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            lr: 0.001,
            batch: 256,
            epochs: 30,
            dropout: 0.5,
            seed: 17,
            val_fraction: 0.1,
            patience: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

struct SequenceGrads {
    w_x: Vec<Vec<f64>>,
    w_h: Vec<Vec<f64>>,
    b_h: Vec<f64>,
    w_o: Vec<f64>,
    b_o: f64,
    loss: f64,
}

/// Forward + full backpropagation through time for one sequence. The dropout
/// mask (one per step, values 0 or 1/(1-p)) applies only on the path from the
/// hidden state to the output head; `None` disables dropout.
fn sequence_grads(
    model: &PredictorModel,
    example: &SequenceExample,
    masks: Option<&[Vec<f64>]>,
) -> SequenceGrads {
    let hd = model.hidden_dim;
    let id = model.input_dim;
    let steps = example.inputs.len();
    debug_assert_eq!(steps, example.targets.len());

    let mut hs: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut ys: Vec<f64> = Vec::with_capacity(steps);
    let mut h_prev = vec![0.0; hd];
    let mut loss = 0.0;
    for t in 0..steps {
        let mut h = vec![0.0; hd];
        for i in 0..hd {
            let mut a = model.b_h[i];
            for (j, xv) in example.inputs[t].iter().enumerate() {
                a += model.w_x[i][j] * xv;
            }
            for (j, hv) in h_prev.iter().enumerate() {
                a += model.w_h[i][j] * hv;
            }
            h[i] = a.tanh();
        }
        let mut z = model.b_o;
        for i in 0..hd {
            let gated = match masks {
                Some(m) => h[i] * m[t][i],
                None => h[i],
            };
            z += model.w_o[i] * gated;
        }
        let y = sigmoid(z);
        let p = y.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
        let target = example.targets[t];
        loss += -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
        hs.push(h.clone());
        ys.push(y);
        h_prev = h;
    }
    let scale = 1.0 / steps as f64;
    loss *= scale;

    let mut g_wx = vec![vec![0.0; id]; hd];
    let mut g_wh = vec![vec![0.0; hd]; hd];
    let mut g_bh = vec![0.0; hd];
    let mut g_wo = vec![0.0; hd];
    let mut g_bo = 0.0;
    // Gradient flowing into h_t from the future (through h_{t+1}).
    let mut dh_next = vec![0.0; hd];
    for t in (0..steps).rev() {
        let dz = (ys[t] - example.targets[t]) * scale;
        let mut dh = vec![0.0; hd];
        for i in 0..hd {
            let gate = match masks {
                Some(m) => m[t][i],
                None => 1.0,
            };
            g_wo[i] += dz * hs[t][i] * gate;
            dh[i] = dz * model.w_o[i] * gate + dh_next[i];
        }
        g_bo += dz;
        // Through tanh: da = dh * (1 - h^2).
        let mut da = vec![0.0; hd];
        for i in 0..hd {
            da[i] = dh[i] * (1.0 - hs[t][i] * hs[t][i]);
        }
        for i in 0..hd {
            for (j, xv) in example.inputs[t].iter().enumerate() {
                g_wx[i][j] += da[i] * xv;
            }
            g_bh[i] += da[i];
        }
        if t > 0 {
            for i in 0..hd {
                for j in 0..hd {
                    g_wh[i][j] += da[i] * hs[t - 1][j];
                }
            }
        }
        let mut dh_prev = vec![0.0; hd];
        for j in 0..hd {
            let mut acc = 0.0;
            for i in 0..hd {
                acc += model.w_h[i][j] * da[i];
            }
            dh_prev[j] = acc;
        }
        dh_next = dh_prev;
    }
    SequenceGrads { w_x: g_wx, w_h: g_wh, b_h: g_bh, w_o: g_wo, b_o: g_bo, loss }
}

/// Mean-per-step loss of one sequence and its analytic gradients in
/// [`PredictorModel::to_flat`] order, dropout disabled. This is the exact
/// objective the trainer differentiates; kept public so external checks can
/// compare it against finite differences.
pub fn loss_and_gradients(model: &PredictorModel, example: &SequenceExample) -> (f64, Vec<f64>) {
    let grads = sequence_grads(model, example, None);
    let flat: Vec<f64> = grads
        .w_x
        .iter()
        .flatten()
        .chain(grads.w_h.iter().flatten())
        .chain(grads.b_h.iter())
        .chain(grads.w_o.iter())
        .copied()
        .chain([grads.b_o])
        .collect();
    (grads.loss, flat)
}

fn mean_loss(model: &PredictorModel, data: &[&SequenceExample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let total: f64 = data.iter().map(|ex| sequence_grads(model, ex, None).loss).sum();
    total / data.len() as f64
}

fn flatten_model(model: &PredictorModel) -> Vec<f64> {
    model
        .w_x
        .iter()
        .flatten()
        .chain(model.w_h.iter().flatten())
        .chain(model.b_h.iter())
        .chain(model.w_o.iter())
        .copied()
        .chain([model.b_o])
        .collect()
}

fn unflatten_model(model: &mut PredictorModel, flat: &[f64]) {
    let mut cursor = 0;
    for row in model.w_x.iter_mut() {
        let len = row.len();
        row.copy_from_slice(&flat[cursor..cursor + len]);
        cursor += len;
    }
    for row in model.w_h.iter_mut() {
        let len = row.len();
        row.copy_from_slice(&flat[cursor..cursor + len]);
        cursor += len;
    }
    model.b_h.copy_from_slice(&flat[cursor..cursor + model.hidden_dim]);
    cursor += model.hidden_dim;
    model.w_o.copy_from_slice(&flat[cursor..cursor + model.hidden_dim]);
    cursor += model.hidden_dim;
    model.b_o = flat[cursor];
}

/// Trains in place; returns per-epoch train/validation losses and the epoch
/// whose weights were kept.
pub fn train_predictor(
    model: &mut PredictorModel,
    data: &[SequenceExample],
    config: &PredictorConfig,
) -> Result<TrainHistory, PredictorError> {
    let usable: Vec<&SequenceExample> =
        data.iter().filter(|ex| !ex.inputs.is_empty()).collect();
    if usable.is_empty() {
        return Err(PredictorError::EmptyTrainingSet);
    }
    for ex in &usable {
        if ex.inputs[0].len() != model.input_dim {
            return Err(PredictorError::WidthMismatch {
                got: ex.inputs[0].len(),
                want: model.input_dim,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((usable.len() as f64) * config.val_fraction).floor() as usize;
    let n_val = n_val.min(usable.len().saturating_sub(1));
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_set: Vec<&SequenceExample> = train_idx.iter().map(|&i| usable[i]).collect();
    let val_set: Vec<&SequenceExample> = val_idx.iter().map(|&i| usable[i]).collect();

    let mut adam = AdamState::new(model.param_count());
    let mut history = TrainHistory { train_loss: Vec::new(), val_loss: Vec::new(), best_epoch: 0 };
    let mut best_val = f64::INFINITY;
    let mut best_params = flatten_model(model);
    let mut since_best = 0usize;

    let mut epoch_order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        epoch_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in epoch_order.chunks(config.batch.max(1)) {
            let mut grad_acc = vec![0.0; model.param_count()];
            let mut batch_loss = 0.0;
            for &idx in chunk {
                let ex = train_set[idx];
                let masks: Option<Vec<Vec<f64>>> = if config.dropout > 0.0 {
                    let keep = 1.0 - config.dropout;
                    Some(
                        (0..ex.inputs.len())
                            .map(|_| {
                                (0..model.hidden_dim)
                                    .map(|_| {
                                        if rng.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 }
                                    })
                                    .collect()
                            })
                            .collect(),
                    )
                } else {
                    None
                };
                let grads = sequence_grads(model, ex, masks.as_deref());
                batch_loss += grads.loss;
                let flat: Vec<f64> = grads
                    .w_x
                    .iter()
                    .flatten()
                    .chain(grads.w_h.iter().flatten())
                    .chain(grads.b_h.iter())
                    .chain(grads.w_o.iter())
                    .copied()
                    .chain([grads.b_o])
                    .collect();
                for (acc, g) in grad_acc.iter_mut().zip(&flat) {
                    *acc += g;
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for g in &mut grad_acc {
                *g *= inv;
            }
            let mut params = flatten_model(model);
            adam.advance();
            adam.apply(&mut params, &grad_acc, config.lr);
            unflatten_model(model, &params);
            epoch_loss += batch_loss;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        if !train_loss.is_finite() {
            return Err(PredictorError::Divergence { epoch, loss: train_loss });
        }
        let val_loss = if val_set.is_empty() { train_loss } else { mean_loss(model, &val_set) };
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        if val_loss < best_val {
            best_val = val_loss;
            best_params = flatten_model(model);
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    unflatten_model(model, &best_params);
    Ok(history)
}

/// Evaluation summary over pooled predictions. `auc` is absent when the test
/// labels are single-class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: Option<f64>,
    pub acc: f64,
    pub rmse: f64,
    pub n_predictions: usize,
    pub config: serde_json::Value,
}

pub fn evaluate(
    model: &PredictorModel,
    data: &[SequenceExample],
    config_snapshot: serde_json::Value,
) -> Result<EvalReport, PredictorError> {
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for ex in data {
        let mut h = vec![0.0; model.hidden_dim];
        for (x, &target) in ex.inputs.iter().zip(&ex.targets) {
            let (h_next, y) = step(model, x, &h)?;
            labels.push(if target >= 0.5 { 1u8 } else { 0u8 });
            scores.push(y);
            h = h_next;
        }
    }
    if labels.is_empty() {
        return Err(PredictorError::EmptyEvaluation);
    }
    Ok(EvalReport {
        auc: metrics::auc(&labels, &scores),
        acc: metrics::accuracy(&labels, &scores),
        rmse: metrics::rmse(&labels, &scores),
        n_predictions: labels.len(),
        config: config_snapshot,
    })
}
