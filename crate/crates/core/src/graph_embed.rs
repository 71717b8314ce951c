// Indexed loops over coupled rows/columns read better than iterator chains
// in the gradient math below.
#![allow(clippy::needless_range_loop)]

//! Question/skill embeddings trained on the question-skill bipartite graph.
//!
//! Three relation sets are read off the graph: explicit question-skill
//! incidence, question-question co-occurrence (two questions sharing at least
//! one skill), and skill-skill co-occurrence (two skills sharing at least one
//! question). Embeddings are trained to reproduce all three relations through
//! sigmoid dot products under a joint cross-entropy objective, plus a squared
//! attribute head that regresses each question's normalized difficulty from
//! its vector. The trade-off between the relation terms and the attribute
//! term is `lambda`.
//!
//! Gradients are analytic and finite-difference checked in the tests. The
//! full double-sum objective is kept for small graphs and oracle tests;
//! training at corpus scale samples a fixed number of negatives per positive
//! pair each epoch.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, QuestionId, SkillId};
use crate::difficulty::QuestionStats;
use crate::opt::AdamState;

const CLAMP_EPS: f64 = 1e-7;
const EMBEDDING_MAGIC: &[u8; 4] = b"KTE1";

#[derive(Debug, Error)]
pub enum GraphEmbedError {
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("unknown question id `{0}`")]
    UnknownQuestion(String),
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad embedding file: {0}")]
    BadFormat(String),
    #[error("sidecar error: {0}")]
    Sidecar(#[from] serde_json::Error),
}

/// Question-skill incidence plus the derived question-question and
/// skill-skill relations, stored dense.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    pub question_ids: Vec<QuestionId>,
    pub skill_ids: Vec<SkillId>,
    qs: Vec<bool>,
    qq: Vec<bool>,
    ss: Vec<bool>,
    /// Per-question attribute target (normalized difficulty).
    pub attributes: Vec<f64>,
    /// Skill indices per question.
    pub question_skills: Vec<Vec<usize>>,
}

impl BipartiteGraph {
    pub fn question_count(&self) -> usize {
        self.question_ids.len()
    }

    pub fn skill_count(&self) -> usize {
        self.skill_ids.len()
    }

    pub fn qs(&self, i: usize, j: usize) -> bool {
        self.qs[i * self.skill_count() + j]
    }

    pub fn qq(&self, i: usize, j: usize) -> bool {
        self.qq[i * self.question_count() + j]
    }

    pub fn ss(&self, i: usize, j: usize) -> bool {
        self.ss[i * self.skill_count() + j]
    }

    /// Builds the graph from raw incidence edges. `attributes` must have one
    /// entry per question.
    pub fn from_edges(
        question_ids: Vec<QuestionId>,
        skill_ids: Vec<SkillId>,
        edges: &[(usize, usize)],
        attributes: Vec<f64>,
    ) -> Self {
        let m = question_ids.len();
        let n = skill_ids.len();
        assert_eq!(attributes.len(), m);
        let mut qs = vec![false; m * n];
        let mut question_skills: Vec<Vec<usize>> = vec![Vec::new(); m];
        let mut skill_questions: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(q, s) in edges {
            if !qs[q * n + s] {
                qs[q * n + s] = true;
                question_skills[q].push(s);
                skill_questions[s].push(q);
            }
        }
        for list in question_skills.iter_mut().chain(skill_questions.iter_mut()) {
            list.sort_unstable();
        }

        // Derived relations via adjacency lists; the pairwise-intersection
        // oracle in the tests checks this against a direct definition.
        let mut qq = vec![false; m * m];
        for questions in &skill_questions {
            for &a in questions {
                for &b in questions {
                    qq[a * m + b] = true;
                }
            }
        }
        let mut ss = vec![false; n * n];
        for skills in &question_skills {
            for &a in skills {
                for &b in skills {
                    ss[a * n + b] = true;
                }
            }
        }
        BipartiteGraph { question_ids, skill_ids, qs, qq, ss, attributes, question_skills }
    }

    /// Graph over every question/skill in the corpus, with normalized
    /// difficulties as attributes. Questions missing from `stats` (e.g.
    /// unseen in the training split) get a neutral 0.5.
    pub fn from_corpus(corpus: &Corpus, stats: &BTreeMap<QuestionId, QuestionStats>) -> Self {
        let question_ids: Vec<QuestionId> = corpus.question_skills.keys().cloned().collect();
        let mut skill_ids: Vec<SkillId> = corpus
            .question_skills
            .values()
            .flat_map(|set| set.iter().cloned())
            .collect();
        skill_ids.sort_unstable();
        skill_ids.dedup();
        let skill_index: BTreeMap<&SkillId, usize> =
            skill_ids.iter().enumerate().map(|(i, s)| (s, i)).collect();
        let mut edges = Vec::new();
        for (qi, q) in question_ids.iter().enumerate() {
            for skill in &corpus.question_skills[q] {
                edges.push((qi, skill_index[skill]));
            }
        }
        let attributes = question_ids
            .iter()
            .map(|q| stats.get(q).map_or(0.5, |s| s.norm_difficulty))
            .collect();
        Self::from_edges(question_ids, skill_ids, &edges, attributes)
    }
}

/// Learned question vectors, skill vectors, and the attribute head.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub question_ids: Vec<QuestionId>,
    pub skill_ids: Vec<SkillId>,
    pub question_skills: Vec<Vec<usize>>,
    /// M x dv question vectors.
    pub q: Vec<Vec<f64>>,
    /// N x dv skill vectors.
    pub s: Vec<Vec<f64>>,
    /// Attribute head weights (length dv) and bias.
    pub theta_w: Vec<f64>,
    pub theta_b: f64,
    pub dv: usize,
    pub fused_dim: usize,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Probability that two vectors are related: sigmoid of their dot product.
pub fn predict_relation(u: &[f64], v: &[f64]) -> Result<f64, GraphEmbedError> {
    if u.len() != v.len() {
        return Err(GraphEmbedError::LengthMismatch(u.len(), v.len()));
    }
    Ok(sigmoid(dot(u, v)))
}

fn bce(target: f64, p: f64) -> f64 {
    let p = p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    /// Question-skill cross-entropy.
    pub l1: f64,
    /// Question-question cross-entropy.
    pub l2: f64,
    /// Skill-skill cross-entropy.
    pub l3: f64,
    /// Squared attribute error.
    pub l4: f64,
    pub total: f64,
}

/// Full double-sum joint loss: lambda * (L1 + L2 + L3) + (1 - lambda) * L4.
pub fn loss_joint(
    graph: &BipartiteGraph,
    emb: &EmbeddingSet,
    lambda: f64,
) -> Result<LossTerms, GraphEmbedError> {
    let m = graph.question_count();
    let n = graph.skill_count();
    let mut l1 = 0.0;
    for i in 0..m {
        for j in 0..n {
            let p = sigmoid(dot(&emb.q[i], &emb.s[j]));
            l1 += bce(f64::from(u8::from(graph.qs(i, j))), p);
        }
    }
    let mut l2 = 0.0;
    for i in 0..m {
        for j in 0..m {
            let p = sigmoid(dot(&emb.q[i], &emb.q[j]));
            l2 += bce(f64::from(u8::from(graph.qq(i, j))), p);
        }
    }
    let mut l3 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let p = sigmoid(dot(&emb.s[i], &emb.s[j]));
            l3 += bce(f64::from(u8::from(graph.ss(i, j))), p);
        }
    }
    let mut l4 = 0.0;
    for i in 0..m {
        let predicted = dot(&emb.theta_w, &emb.q[i]) + emb.theta_b;
        let residual = graph.attributes[i] - predicted;
        l4 += residual * residual;
    }
    let total = lambda * (l1 + l2 + l3) + (1.0 - lambda) * l4;
    if !total.is_finite() {
        return Err(GraphEmbedError::Divergence { epoch: 0, loss: total });
    }
    Ok(LossTerms { l1, l2, l3, l4, total })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub q: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub theta_w: Vec<f64>,
    pub theta_b: f64,
}

/// Analytic gradients of [`loss_joint`] with respect to every parameter.
pub fn grad_joint(graph: &BipartiteGraph, emb: &EmbeddingSet, lambda: f64) -> Gradients {
    let m = graph.question_count();
    let n = graph.skill_count();
    let dv = emb.dv;
    let mut gq = vec![vec![0.0; dv]; m];
    let mut gs = vec![vec![0.0; dv]; n];
    let mut gtw = vec![0.0; dv];
    let mut gtb = 0.0;

    // d/dz of BCE(r, sigmoid(z)) is sigmoid(z) - r.
    for i in 0..m {
        for j in 0..n {
            let err = sigmoid(dot(&emb.q[i], &emb.s[j]))
                - f64::from(u8::from(graph.qs(i, j)));
            let coeff = lambda * err;
            for k in 0..dv {
                gq[i][k] += coeff * emb.s[j][k];
                gs[j][k] += coeff * emb.q[i][k];
            }
        }
    }
    for i in 0..m {
        for j in 0..m {
            let err = sigmoid(dot(&emb.q[i], &emb.q[j]))
                - f64::from(u8::from(graph.qq(i, j)));
            let coeff = lambda * err;
            for k in 0..dv {
                gq[i][k] += coeff * emb.q[j][k];
                gq[j][k] += coeff * emb.q[i][k];
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            let err = sigmoid(dot(&emb.s[i], &emb.s[j]))
                - f64::from(u8::from(graph.ss(i, j)));
            let coeff = lambda * err;
            for k in 0..dv {
                gs[i][k] += coeff * emb.s[j][k];
                gs[j][k] += coeff * emb.s[i][k];
            }
        }
    }
    for i in 0..m {
        let predicted = dot(&emb.theta_w, &emb.q[i]) + emb.theta_b;
        let coeff = (1.0 - lambda) * 2.0 * (predicted - graph.attributes[i]);
        for k in 0..dv {
            gtw[k] += coeff * emb.q[i][k];
            gq[i][k] += coeff * emb.theta_w[k];
        }
        gtb += coeff;
    }
    Gradients { q: gq, s: gs, theta_w: gtw, theta_b: gtb }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub seed: u64,
    pub dv: usize,
    pub fused_dim: usize,
    /// Negatives sampled per positive pair and epoch; `None` trains on the
    /// full double sums (one full-gradient step per epoch).
    pub negative_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch: 256,
            epochs: 50,
            lambda: 0.5,
            seed: 17,
            dv: 64,
            fused_dim: 128,
            negative_samples: Some(5),
        }
    }
}

/// Seeded uniform init in [-0.05, 0.05].
pub fn init_embeddings(graph: &BipartiteGraph, dv: usize, fused_dim: usize, seed: u64) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vector = |len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-0.05..0.05)).collect()
    };
    let q = (0..graph.question_count()).map(|_| vector(dv)).collect();
    let s = (0..graph.skill_count()).map(|_| vector(dv)).collect();
    let theta_w = vector(dv);
    EmbeddingSet {
        question_ids: graph.question_ids.clone(),
        skill_ids: graph.skill_ids.clone(),
        question_skills: graph.question_skills.clone(),
        q,
        s,
        theta_w,
        theta_b: 0.0,
        dv,
        fused_dim,
    }
}

/// A single training term of the sampled objective.
#[derive(Debug, Clone, Copy)]
enum Term {
    Qs { q: usize, s: usize, r: f64 },
    Qq { a: usize, b: usize, r: f64 },
    Ss { a: usize, b: usize, r: f64 },
    Attr { q: usize },
}

/// Trains embeddings; deterministic for a fixed seed. Returns the trained
/// set and the full joint loss per epoch.
pub fn train(
    graph: &BipartiteGraph,
    config: &TrainConfig,
) -> Result<(EmbeddingSet, Vec<f64>), GraphEmbedError> {
    let mut emb = init_embeddings(graph, config.dv, config.fused_dim, config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    match config.negative_samples {
        None => train_full(graph, &mut emb, config, &mut history)?,
        Some(neg) => train_sampled(graph, &mut emb, config, neg, &mut history)?,
    }
    Ok((emb, history))
}

fn check_finite(emb: &EmbeddingSet, epoch: usize, loss: f64) -> Result<(), GraphEmbedError> {
    let finite = emb.q.iter().chain(emb.s.iter()).all(|row| row.iter().all(|x| x.is_finite()))
        && emb.theta_w.iter().all(|x| x.is_finite())
        && emb.theta_b.is_finite()
        && loss.is_finite();
    if finite {
        Ok(())
    } else {
        Err(GraphEmbedError::Divergence { epoch, loss })
    }
}

fn train_full(
    graph: &BipartiteGraph,
    emb: &mut EmbeddingSet,
    config: &TrainConfig,
    history: &mut Vec<f64>,
) -> Result<(), GraphEmbedError> {
    let dv = config.dv;
    let m = graph.question_count();
    let n = graph.skill_count();
    let mut adam_q = AdamState::new(m * dv);
    let mut adam_s = AdamState::new(n * dv);
    let mut adam_t = AdamState::new(dv + 1);
    for epoch in 0..config.epochs {
        let grads = grad_joint(graph, emb, config.lambda);
        apply_dense(
            emb,
            &grads,
            config.lr,
            &mut adam_q,
            &mut adam_s,
            &mut adam_t,
        );
        let loss = loss_joint(graph, emb, config.lambda)?.total;
        check_finite(emb, epoch, loss)?;
        history.push(loss);
    }
    Ok(())
}

fn apply_dense(
    emb: &mut EmbeddingSet,
    grads: &Gradients,
    lr: f64,
    adam_q: &mut AdamState,
    adam_s: &mut AdamState,
    adam_t: &mut AdamState,
) {
    let dv = emb.dv;
    let mut q_flat: Vec<f64> = emb.q.iter().flatten().copied().collect();
    let gq_flat: Vec<f64> = grads.q.iter().flatten().copied().collect();
    adam_q.advance();
    adam_q.apply(&mut q_flat, &gq_flat, lr);
    for (i, row) in emb.q.iter_mut().enumerate() {
        row.copy_from_slice(&q_flat[i * dv..(i + 1) * dv]);
    }
    let mut s_flat: Vec<f64> = emb.s.iter().flatten().copied().collect();
    let gs_flat: Vec<f64> = grads.s.iter().flatten().copied().collect();
    adam_s.advance();
    adam_s.apply(&mut s_flat, &gs_flat, lr);
    for (i, row) in emb.s.iter_mut().enumerate() {
        row.copy_from_slice(&s_flat[i * dv..(i + 1) * dv]);
    }
    let mut t_flat: Vec<f64> = emb.theta_w.iter().copied().chain([emb.theta_b]).collect();
    let gt_flat: Vec<f64> = grads.theta_w.iter().copied().chain([grads.theta_b]).collect();
    adam_t.advance();
    adam_t.apply(&mut t_flat, &gt_flat, lr);
    emb.theta_w.copy_from_slice(&t_flat[..dv]);
    emb.theta_b = t_flat[dv];
}

fn train_sampled(
    graph: &BipartiteGraph,
    emb: &mut EmbeddingSet,
    config: &TrainConfig,
    negatives: usize,
    history: &mut Vec<f64>,
) -> Result<(), GraphEmbedError> {
    let m = graph.question_count();
    let n = graph.skill_count();
    let dv = config.dv;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    let qs_pos: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| graph.qs(i, j))
        .collect();
    let qq_pos: Vec<(usize, usize)> = (0..m)
        .flat_map(|i| ((i + 1)..m).map(move |j| (i, j)))
        .filter(|&(i, j)| graph.qq(i, j))
        .collect();
    let ss_pos: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .filter(|&(i, j)| graph.ss(i, j))
        .collect();

    let mut adam_q = AdamState::new(m * dv);
    let mut adam_s = AdamState::new(n * dv);
    let mut adam_t = AdamState::new(dv + 1);

    for epoch in 0..config.epochs {
        let mut terms: Vec<Term> = Vec::new();
        for &(i, j) in &qs_pos {
            terms.push(Term::Qs { q: i, s: j, r: 1.0 });
            for _ in 0..negatives {
                if let Some(neg) = sample_index(&mut rng, n, |cand| !graph.qs(i, cand)) {
                    terms.push(Term::Qs { q: i, s: neg, r: 0.0 });
                }
            }
        }
        for &(i, j) in &qq_pos {
            terms.push(Term::Qq { a: i, b: j, r: 1.0 });
            for _ in 0..negatives {
                if let Some(neg) = sample_index(&mut rng, m, |cand| !graph.qq(i, cand)) {
                    terms.push(Term::Qq { a: i, b: neg, r: 0.0 });
                }
            }
        }
        for &(i, j) in &ss_pos {
            terms.push(Term::Ss { a: i, b: j, r: 1.0 });
            for _ in 0..negatives {
                if let Some(neg) = sample_index(&mut rng, n, |cand| !graph.ss(i, cand)) {
                    terms.push(Term::Ss { a: i, b: neg, r: 0.0 });
                }
            }
        }
        for i in 0..m {
            terms.push(Term::Attr { q: i });
        }
        terms.shuffle(&mut rng);

        for batch in terms.chunks(config.batch.max(1)) {
            let scale = 1.0 / batch.len() as f64;
            let mut gq: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            let mut gs: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            let mut gtw = vec![0.0; dv];
            let mut gtb = 0.0;
            let mut touched_theta = false;
            for term in batch {
                match *term {
                    Term::Qs { q, s, r } => {
                        let err = sigmoid(dot(&emb.q[q], &emb.s[s])) - r;
                        let coeff = config.lambda * err * scale;
                        let gq_row = gq.entry(q).or_insert_with(|| vec![0.0; dv]);
                        for k in 0..dv {
                            gq_row[k] += coeff * emb.s[s][k];
                        }
                        let gs_row = gs.entry(s).or_insert_with(|| vec![0.0; dv]);
                        for k in 0..dv {
                            gs_row[k] += coeff * emb.q[q][k];
                        }
                    }
                    Term::Qq { a, b, r } => {
                        let err = sigmoid(dot(&emb.q[a], &emb.q[b])) - r;
                        let coeff = config.lambda * err * scale;
                        {
                            let row = gq.entry(a).or_insert_with(|| vec![0.0; dv]);
                            for k in 0..dv {
                                row[k] += coeff * emb.q[b][k];
                            }
                        }
                        let row = gq.entry(b).or_insert_with(|| vec![0.0; dv]);
                        for k in 0..dv {
                            row[k] += coeff * emb.q[a][k];
                        }
                    }
                    Term::Ss { a, b, r } => {
                        let err = sigmoid(dot(&emb.s[a], &emb.s[b])) - r;
                        let coeff = config.lambda * err * scale;
                        {
                            let row = gs.entry(a).or_insert_with(|| vec![0.0; dv]);
                            for k in 0..dv {
                                row[k] += coeff * emb.s[b][k];
                            }
                        }
                        let row = gs.entry(b).or_insert_with(|| vec![0.0; dv]);
                        for k in 0..dv {
                            row[k] += coeff * emb.s[a][k];
                        }
                    }
                    Term::Attr { q } => {
                        let predicted = dot(&emb.theta_w, &emb.q[q]) + emb.theta_b;
                        let coeff =
                            (1.0 - config.lambda) * 2.0 * (predicted - graph.attributes[q]) * scale;
                        for k in 0..dv {
                            gtw[k] += coeff * emb.q[q][k];
                        }
                        let row = gq.entry(q).or_insert_with(|| vec![0.0; dv]);
                        for k in 0..dv {
                            row[k] += coeff * emb.theta_w[k];
                        }
                        gtb += coeff;
                        touched_theta = true;
                    }
                }
            }
            // Dense buffers sized to the full parameter set keep the moment
            // bookkeeping simple; batches touch a small slice of them.
            let mut gq_dense = vec![0.0; m * dv];
            for (i, row) in gq {
                gq_dense[i * dv..(i + 1) * dv].copy_from_slice(&row);
            }
            let mut gs_dense = vec![0.0; n * dv];
            for (i, row) in gs {
                gs_dense[i * dv..(i + 1) * dv].copy_from_slice(&row);
            }
            let mut q_flat: Vec<f64> = emb.q.iter().flatten().copied().collect();
            adam_q.advance();
            adam_q.apply(&mut q_flat, &gq_dense, config.lr);
            for (i, row) in emb.q.iter_mut().enumerate() {
                row.copy_from_slice(&q_flat[i * dv..(i + 1) * dv]);
            }
            let mut s_flat: Vec<f64> = emb.s.iter().flatten().copied().collect();
            adam_s.advance();
            adam_s.apply(&mut s_flat, &gs_dense, config.lr);
            for (i, row) in emb.s.iter_mut().enumerate() {
                row.copy_from_slice(&s_flat[i * dv..(i + 1) * dv]);
            }
            if touched_theta {
                let mut t_flat: Vec<f64> =
                    emb.theta_w.iter().copied().chain([emb.theta_b]).collect();
                let gt_flat: Vec<f64> = gtw.iter().copied().chain([gtb]).collect();
                adam_t.advance();
                adam_t.apply(&mut t_flat, &gt_flat, config.lr);
                emb.theta_w.copy_from_slice(&t_flat[..dv]);
                emb.theta_b = t_flat[dv];
            }
        }
        let loss = loss_joint(graph, emb, config.lambda)?.total;
        check_finite(emb, epoch, loss)?;
        history.push(loss);
    }
    Ok(())
}

fn sample_index<R: Rng>(rng: &mut R, upper: usize, accept: impl Fn(usize) -> bool) -> Option<usize> {
    for _ in 0..32 {
        let cand = rng.gen_range(0..upper);
        if accept(cand) {
            return Some(cand);
        }
    }
    None
}

/// Final per-question vector: the question embedding concatenated with the
/// arithmetic mean of its skill vectors, zero-padded or truncated to the
/// fused width.
pub fn fused_question_embedding(
    emb: &EmbeddingSet,
    question_id: &str,
) -> Result<Vec<f64>, GraphEmbedError> {
    let idx = emb
        .question_ids
        .iter()
        .position(|q| q == question_id)
        .ok_or_else(|| GraphEmbedError::UnknownQuestion(question_id.to_string()))?;
    Ok(fused_question_embedding_by_index(emb, idx))
}

pub fn fused_question_embedding_by_index(emb: &EmbeddingSet, idx: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(emb.fused_dim);
    out.extend_from_slice(&emb.q[idx]);
    let skills = &emb.question_skills[idx];
    let mut mean = vec![0.0; emb.dv];
    if !skills.is_empty() {
        for &s in skills {
            for k in 0..emb.dv {
                mean[k] += emb.s[s][k];
            }
        }
        let inv = 1.0 / skills.len() as f64;
        for v in &mut mean {
            *v *= inv;
        }
    }
    out.extend_from_slice(&mean);
    out.resize(emb.fused_dim, 0.0);
    out
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    questions: Vec<String>,
    skills: Vec<String>,
    question_skills: Vec<Vec<usize>>,
    fused_dim: usize,
}

/// Writes the binary blob (magic, M, N, dv header, then little-endian f32
/// question rows, skill rows, head weights, head bias) plus the JSON id
/// sidecar beside it.
pub fn write_embeddings<P: AsRef<Path>>(
    bin_path: P,
    sidecar_path: P,
    emb: &EmbeddingSet,
) -> Result<(), GraphEmbedError> {
    let mut w = io::BufWriter::new(std::fs::File::create(bin_path)?);
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&(emb.q.len() as u32).to_le_bytes())?;
    w.write_all(&(emb.s.len() as u32).to_le_bytes())?;
    w.write_all(&(emb.dv as u32).to_le_bytes())?;
    let mut put = |values: &[f64]| -> io::Result<()> {
        for &v in values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    };
    for row in &emb.q {
        put(row)?;
    }
    for row in &emb.s {
        put(row)?;
    }
    put(&emb.theta_w)?;
    put(&[emb.theta_b])?;
    w.flush()?;

    let sidecar = Sidecar {
        questions: emb.question_ids.clone(),
        skills: emb.skill_ids.clone(),
        question_skills: emb.question_skills.clone(),
        fused_dim: emb.fused_dim,
    };
    let file = std::fs::File::create(sidecar_path)?;
    serde_json::to_writer(io::BufWriter::new(file), &sidecar)?;
    Ok(())
}

pub fn read_embeddings<P: AsRef<Path>>(
    bin_path: P,
    sidecar_path: P,
) -> Result<EmbeddingSet, GraphEmbedError> {
    let sidecar: Sidecar =
        serde_json::from_reader(io::BufReader::new(std::fs::File::open(sidecar_path)?))?;
    let mut r = io::BufReader::new(std::fs::File::open(bin_path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != EMBEDDING_MAGIC {
        return Err(GraphEmbedError::BadFormat("wrong magic".into()));
    }
    let mut word = [0u8; 4];
    let mut read_u32 = |r: &mut dyn Read| -> Result<u32, GraphEmbedError> {
        r.read_exact(&mut word)?;
        Ok(u32::from_le_bytes(word))
    };
    let m = read_u32(&mut r)? as usize;
    let n = read_u32(&mut r)? as usize;
    let dv = read_u32(&mut r)? as usize;
    if sidecar.questions.len() != m || sidecar.skills.len() != n {
        return Err(GraphEmbedError::BadFormat("sidecar/header size mismatch".into()));
    }
    let read_row = |r: &mut dyn Read, len: usize| -> Result<Vec<f64>, GraphEmbedError> {
        let mut buf = vec![0u8; len * 4];
        r.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect())
    };
    let q = (0..m).map(|_| read_row(&mut r, dv)).collect::<Result<Vec<_>, _>>()?;
    let s = (0..n).map(|_| read_row(&mut r, dv)).collect::<Result<Vec<_>, _>>()?;
    let theta_w = read_row(&mut r, dv)?;
    let theta_b = read_row(&mut r, 1)?[0];
    Ok(EmbeddingSet {
        question_ids: sidecar.questions,
        skill_ids: sidecar.skills,
        question_skills: sidecar.question_skills,
        q,
        s,
        theta_w,
        theta_b,
        dv,
        fused_dim: sidecar.fused_dim,
    })
}

pub fn write_loss_history_csv<W: io::Write>(history: &[f64], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "loss"])?;
    for (epoch, loss) in history.iter().enumerate() {
        w.write_record([epoch.to_string(), format!("{loss:.17}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_graph() -> BipartiteGraph {
        // 3 questions, 2 skills: q0 -> {s0}, q1 -> {s0, s1}, q2 -> {s1}.
        BipartiteGraph::from_edges(
            vec!["q0".into(), "q1".into(), "q2".into()],
            vec!["s0".into(), "s1".into()],
            &[(0, 0), (1, 0), (1, 1), (2, 1)],
            vec![0.2, 0.5, 0.9],
        )
    }

    #[test]
    fn relations_from_incidence() {
        let g = toy_graph();
        assert!(g.qq(0, 1) && g.qq(1, 2));
        assert!(!g.qq(0, 2), "q0 and q2 share no skill");
        assert!(g.qq(0, 0) && g.qq(2, 2));
        assert!(g.ss(0, 1), "s0 and s1 share q1");
        assert!(g.ss(0, 0));
    }

    #[test]
    fn relation_probability() {
        assert_eq!(predict_relation(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        let x = (3.0f64).ln().sqrt();
        let u = vec![x, 0.0];
        assert!((predict_relation(&u, &u).unwrap() - 0.75).abs() < 1e-12);
        assert!(predict_relation(&[1.0], &[1.0, 2.0]).is_err());
        // 8-dim pair against a by-hand evaluation of the same formula.
        let a = [0.3, -0.1, 0.25, 0.0, -0.4, 0.9, 0.05, -0.2];
        let b = [0.1, 0.7, -0.3, 0.6, 0.2, -0.05, 0.4, 0.35];
        let z: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let expect = 1.0 / (1.0 + (-z).exp());
        assert!((predict_relation(&a, &b).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn clamping_keeps_loss_finite_for_extreme_embeddings() {
        let g = toy_graph();
        let mut emb = init_embeddings(&g, 4, 8, 7);
        for (i, row) in emb.q.iter_mut().chain(emb.s.iter_mut()).enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = if (i + k) % 2 == 0 { 1e6 } else { -1e6 };
            }
        }
        let terms = loss_joint(&g, &emb, 0.5).unwrap();
        assert!(terms.total.is_finite());
        assert!(terms.l1.is_finite() && terms.l2.is_finite() && terms.l3.is_finite());
    }

    #[test]
    fn zero_embeddings_give_ln2_per_pair() {
        let g = toy_graph();
        let mut emb = init_embeddings(&g, 4, 8, 7);
        for row in emb.q.iter_mut().chain(emb.s.iter_mut()) {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        let terms = loss_joint(&g, &emb, 1.0).unwrap();
        // Every pair contributes -ln(0.5) regardless of its target.
        let ln2 = std::f64::consts::LN_2;
        assert!((terms.l1 - 6.0 * ln2).abs() < 1e-12);
        assert!((terms.l2 - 9.0 * ln2).abs() < 1e-12);
        assert!((terms.l3 - 4.0 * ln2).abs() < 1e-12);
    }

    #[test]
    fn lambda_boundaries() {
        let g = toy_graph();
        let emb = init_embeddings(&g, 4, 8, 7);
        let at_one = loss_joint(&g, &emb, 1.0).unwrap();
        assert!((at_one.total - (at_one.l1 + at_one.l2 + at_one.l3)).abs() < 1e-12);
        let at_zero = loss_joint(&g, &emb, 0.0).unwrap();
        assert!((at_zero.total - at_zero.l4).abs() < 1e-12);
    }

    /// Straight-line transcription of the objective, kept deliberately
    /// separate from the implementation loops.
    fn reference_loss(g: &BipartiteGraph, e: &EmbeddingSet, lambda: f64) -> f64 {
        let logistic = |z: f64| 1.0 / (1.0 + (-z).exp());
        let xent = |r: f64, p: f64| {
            let p = p.clamp(1e-7, 1.0 - 1e-7);
            -(r * p.ln() + (1.0 - r) * (1.0 - p).ln())
        };
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        let mut relation_sum = 0.0;
        for i in 0..g.question_count() {
            for j in 0..g.skill_count() {
                relation_sum +=
                    xent(f64::from(u8::from(g.qs(i, j))), logistic(prod(&e.q[i], &e.s[j])));
            }
        }
        for i in 0..g.question_count() {
            for j in 0..g.question_count() {
                relation_sum +=
                    xent(f64::from(u8::from(g.qq(i, j))), logistic(prod(&e.q[i], &e.q[j])));
            }
        }
        for i in 0..g.skill_count() {
            for j in 0..g.skill_count() {
                relation_sum +=
                    xent(f64::from(u8::from(g.ss(i, j))), logistic(prod(&e.s[i], &e.s[j])));
            }
        }
        let mut attr_sum = 0.0;
        for i in 0..g.question_count() {
            let a_hat = prod(&e.theta_w, &e.q[i]) + e.theta_b;
            attr_sum += (g.attributes[i] - a_hat) * (g.attributes[i] - a_hat);
        }
        lambda * relation_sum + (1.0 - lambda) * attr_sum
    }

    #[test]
    fn loss_matches_reference_script() {
        let g = toy_graph();
        let emb = init_embeddings(&g, 4, 8, 42);
        for lambda in [0.0, 0.3, 0.5, 1.0] {
            let got = loss_joint(&g, &emb, lambda).unwrap().total;
            let want = reference_loss(&g, &emb, lambda);
            assert!((got - want).abs() < 1e-10, "lambda={lambda}: {got} vs {want}");
        }
    }

    fn flat_params(emb: &EmbeddingSet) -> Vec<f64> {
        emb.q
            .iter()
            .flatten()
            .chain(emb.s.iter().flatten())
            .chain(emb.theta_w.iter())
            .copied()
            .chain([emb.theta_b])
            .collect()
    }

    fn set_flat_params(emb: &mut EmbeddingSet, flat: &[f64]) {
        let dv = emb.dv;
        let mut cursor = 0;
        for row in emb.q.iter_mut().chain(emb.s.iter_mut()) {
            row.copy_from_slice(&flat[cursor..cursor + dv]);
            cursor += dv;
        }
        emb.theta_w.copy_from_slice(&flat[cursor..cursor + dv]);
        emb.theta_b = flat[cursor + dv];
    }

    fn flat_grads(g: &Gradients) -> Vec<f64> {
        g.q.iter()
            .flatten()
            .chain(g.s.iter().flatten())
            .chain(g.theta_w.iter())
            .copied()
            .chain([g.theta_b])
            .collect()
    }

    #[test]
    fn gradients_match_central_differences() {
        let g = toy_graph();
        let emb = init_embeddings(&g, 3, 6, 11);
        let lambda = 0.4;
        let analytic = flat_grads(&grad_joint(&g, &emb, lambda));
        let base = flat_params(&emb);
        let h = 1e-5;
        for (idx, analytic_g) in analytic.iter().enumerate() {
            let mut plus = emb.clone();
            let mut minus = emb.clone();
            let mut params = base.clone();
            params[idx] += h;
            set_flat_params(&mut plus, &params);
            params[idx] -= 2.0 * h;
            set_flat_params(&mut minus, &params);
            let numeric = (loss_joint(&g, &plus, lambda).unwrap().total
                - loss_joint(&g, &minus, lambda).unwrap().total)
                / (2.0 * h);
            let denom = numeric.abs().max(analytic_g.abs()).max(1e-8);
            assert!(
                (numeric - analytic_g).abs() / denom < 1e-4,
                "param {idx}: analytic {analytic_g} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn gradient_zero_at_exact_attribute_fit() {
        let g = toy_graph();
        let mut emb = init_embeddings(&g, 2, 4, 3);
        // q_i = (a_i, 0), head = (1, 0) with zero bias: residuals vanish.
        for (i, row) in emb.q.iter_mut().enumerate() {
            row[0] = g.attributes[i];
            row[1] = 0.0;
        }
        emb.theta_w = vec![1.0, 0.0];
        emb.theta_b = 0.0;
        let grads = grad_joint(&g, &emb, 0.0);
        assert!(grads.theta_w.iter().all(|v| v.abs() < 1e-12));
        assert!(grads.theta_b.abs() < 1e-12);
        assert!(grads.q.iter().all(|row| row.iter().all(|v| v.abs() < 1e-12)));
    }

    #[test]
    fn identical_questions_get_swapped_gradients() {
        // Two questions with the same skills and attribute, distinct vectors
        // swapped between them -> gradient rows swap too.
        let g = BipartiteGraph::from_edges(
            vec!["a".into(), "b".into()],
            vec!["s".into()],
            &[(0, 0), (1, 0)],
            vec![0.4, 0.4],
        );
        let mut emb = init_embeddings(&g, 3, 6, 5);
        emb.q[0] = vec![0.01, -0.02, 0.03];
        emb.q[1] = vec![-0.04, 0.05, 0.006];
        let grads = grad_joint(&g, &emb, 0.6);
        emb.q.swap(0, 1);
        let swapped = grad_joint(&g, &emb, 0.6);
        for k in 0..3 {
            assert!((grads.q[0][k] - swapped.q[1][k]).abs() < 1e-12);
            assert!((grads.q[1][k] - swapped.q[0][k]).abs() < 1e-12);
        }
    }

    #[test]
    fn full_sum_training_decreases_loss() {
        let g = toy_graph();
        let config = TrainConfig {
            epochs: 200,
            dv: 4,
            fused_dim: 8,
            lr: 0.01,
            negative_samples: None,
            ..TrainConfig::default()
        };
        let (emb, history) = train(&g, &config).unwrap();
        let initial = loss_joint(&g, &init_embeddings(&g, 4, 8, config.seed), config.lambda)
            .unwrap();
        for w in history[..10].windows(2) {
            assert!(w[1] < w[0], "loss should fall over the first epochs: {history:?}");
        }
        let final_terms = loss_joint(&g, &emb, config.lambda).unwrap();
        assert!(final_terms.l1 < initial.l1);
    }

    #[test]
    fn full_batch_descent_with_line_search_never_increases_loss() {
        let g = toy_graph();
        let mut emb = init_embeddings(&g, 4, 8, 21);
        let lambda = 0.5;
        let mut loss = loss_joint(&g, &emb, lambda).unwrap().total;
        for _ in 0..50 {
            let grads = grad_joint(&g, &emb, lambda);
            let mut step = 0.5;
            loop {
                let mut candidate = emb.clone();
                for (row, grow) in candidate.q.iter_mut().zip(&grads.q) {
                    for (v, g) in row.iter_mut().zip(grow) {
                        *v -= step * g;
                    }
                }
                for (row, grow) in candidate.s.iter_mut().zip(&grads.s) {
                    for (v, g) in row.iter_mut().zip(grow) {
                        *v -= step * g;
                    }
                }
                for (v, g) in candidate.theta_w.iter_mut().zip(&grads.theta_w) {
                    *v -= step * g;
                }
                candidate.theta_b -= step * grads.theta_b;
                let candidate_loss = loss_joint(&g, &candidate, lambda).unwrap().total;
                if candidate_loss <= loss {
                    emb = candidate;
                    loss = candidate_loss;
                    break;
                }
                step *= 0.5;
                assert!(step > 1e-12, "no step small enough to avoid increasing the loss");
            }
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let g = toy_graph();
        let config = TrainConfig {
            epochs: 5,
            dv: 4,
            fused_dim: 8,
            batch: 4,
            negative_samples: Some(3),
            ..TrainConfig::default()
        };
        let (emb_a, hist_a) = train(&g, &config).unwrap();
        let (emb_b, hist_b) = train(&g, &config).unwrap();
        assert_eq!(hist_a, hist_b);
        assert_eq!(emb_a, emb_b);
    }

    #[test]
    fn lambda_zero_fits_attributes() {
        let g = toy_graph();
        let config = TrainConfig {
            epochs: 3000,
            dv: 4,
            fused_dim: 8,
            lr: 0.02,
            lambda: 0.0,
            negative_samples: None,
            ..TrainConfig::default()
        };
        let (emb, _) = train(&g, &config).unwrap();
        let mse: f64 = (0..g.question_count())
            .map(|i| {
                let predicted = dot(&emb.theta_w, &emb.q[i]) + emb.theta_b;
                (g.attributes[i] - predicted).powi(2)
            })
            .sum::<f64>()
            / g.question_count() as f64;
        assert!(mse < 1e-3, "attribute mse {mse}");
    }

    #[test]
    fn fused_embedding_layout() {
        let g = toy_graph();
        let emb = init_embeddings(&g, 4, 8, 9);
        // Single-skill question: exactly [q || s].
        let fused = fused_question_embedding(&emb, "q0").unwrap();
        assert_eq!(fused.len(), 8);
        assert_eq!(&fused[..4], emb.q[0].as_slice());
        assert_eq!(&fused[4..], emb.s[0].as_slice());
        // Multi-skill question: mean of skill vectors.
        let fused1 = fused_question_embedding(&emb, "q1").unwrap();
        for k in 0..4 {
            let mean = 0.5 * (emb.s[0][k] + emb.s[1][k]);
            assert!((fused1[4 + k] - mean).abs() < 1e-15);
        }
        assert!(matches!(
            fused_question_embedding(&emb, "nope"),
            Err(GraphEmbedError::UnknownQuestion(_))
        ));
    }

    #[test]
    fn fused_embedding_pads_and_truncates() {
        let g = toy_graph();
        let mut emb = init_embeddings(&g, 4, 12, 9);
        let padded = fused_question_embedding(&emb, "q0").unwrap();
        assert_eq!(padded.len(), 12);
        assert!(padded[8..].iter().all(|&v| v == 0.0));
        emb.fused_dim = 6;
        let truncated = fused_question_embedding(&emb, "q0").unwrap();
        assert_eq!(truncated.len(), 6);
        assert_eq!(&truncated[..4], emb.q[0].as_slice());
    }

    #[test]
    fn embedding_file_roundtrip() {
        let g = toy_graph();
        let (emb, _) = train(
            &g,
            &TrainConfig {
                epochs: 3,
                dv: 4,
                fused_dim: 8,
                negative_samples: None,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("emb.bin");
        let json = dir.path().join("emb.json");
        write_embeddings(&bin, &json, &emb).unwrap();
        let reread = read_embeddings(&bin, &json).unwrap();
        assert_eq!(reread.question_ids, emb.question_ids);
        assert_eq!(reread.dv, emb.dv);
        // On-disk reals are f32; compare after the same narrowing.
        for (a, b) in emb.q.iter().flatten().zip(reread.q.iter().flatten()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }
}
