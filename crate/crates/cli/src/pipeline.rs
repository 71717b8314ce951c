//! End-to-end pipeline: ingest, difficulty, record optimization, embedding
//! training, predictor training, evaluation. Every artifact lands in the run
//! directory and the manifest records the config plus a content hash per
//! artifact, so reruns can be checked for bit-identical output.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ktopt_core::corpus::{self, Corpus, CsvSchema, IngestOptions, IngestReport, StudentId};
use ktopt_core::difficulty::{self, QuestionStats};
use ktopt_core::graph_embed::{self, BipartiteGraph, EmbeddingSet, TrainConfig};
use ktopt_core::optimize::{self, FlipRecord, ModuleKind, OptimizeOptions};
use ktopt_core::predictor::{self, EvalReport, PredictorConfig, PredictorModel, SequenceExample};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: PipelineConfig,
    pub input_sha256: String,
    /// Artifact file name -> sha256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct RunOutput {
    pub run_dir: PathBuf,
    pub report: EvalReport,
    pub manifest: Manifest,
    pub coo_flips: usize,
    pub col_flips: usize,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Deterministic student split: sorted ids shuffled by the seed, leading
/// `train_fraction` for training.
pub fn split_students(
    corpus: &Corpus,
    train_fraction: f64,
    seed: u64,
) -> (BTreeSet<StudentId>, BTreeSet<StudentId>) {
    let mut ids: Vec<&StudentId> = corpus.sequences.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = ((ids.len() as f64) * train_fraction).round() as usize;
    let n_train = n_train.min(ids.len());
    let train: BTreeSet<StudentId> = ids[..n_train].iter().map(|s| (*s).clone()).collect();
    let test: BTreeSet<StudentId> = ids[n_train..].iter().map(|s| (*s).clone()).collect();
    (train, test)
}

/// Builds one prediction sequence per student: input t carries the fused
/// question embedding (weighted `1 - fusion_weight`) and the one-hot of the
/// possibly rewritten response (weighted `fusion_weight`); the target at t is
/// the *recorded* correctness of interaction t + 1.
pub fn build_examples(
    corpus: &Corpus,
    states: &BTreeMap<StudentId, Vec<u8>>,
    embeddings: &EmbeddingSet,
    fusion_weight: f64,
    students: &BTreeSet<StudentId>,
) -> Result<Vec<SequenceExample>> {
    let mut fused_cache: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (idx, q) in embeddings.question_ids.iter().enumerate() {
        let mut v = graph_embed::fused_question_embedding_by_index(embeddings, idx);
        for value in &mut v {
            *value *= 1.0 - fusion_weight;
        }
        fused_cache.insert(q.as_str(), v);
    }
    let mut examples = Vec::new();
    for student in students {
        let seq = &corpus.sequences[student];
        let state_vec = &states[student];
        let t_max = seq.interactions.len();
        if t_max < 2 {
            continue;
        }
        let mut inputs = Vec::with_capacity(t_max - 1);
        let mut targets = Vec::with_capacity(t_max - 1);
        for (pair, &state) in seq.interactions.windows(2).zip(state_vec) {
            let it = &pair[0];
            let fused = fused_cache
                .get(it.question_id.as_str())
                .with_context(|| format!("question {} missing from embeddings", it.question_id))?;
            let mut x = fused.clone();
            x.push(fusion_weight * f64::from(state == 0));
            x.push(fusion_weight * f64::from(state == 1));
            inputs.push(x);
            targets.push(f64::from(pair[1].response));
        }
        examples.push(SequenceExample { inputs, targets });
    }
    Ok(examples)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}

#[derive(Serialize)]
struct IngestSummary {
    input_rows: u64,
    kept: u64,
    skillless: u64,
    nonbinary: u64,
    short_user: u64,
    filtered: u64,
}

impl From<&IngestReport> for IngestSummary {
    fn from(r: &IngestReport) -> Self {
        IngestSummary {
            input_rows: r.input_rows,
            kept: r.kept,
            skillless: r.rejections.skillless,
            nonbinary: r.rejections.nonbinary,
            short_user: r.rejections.short_user,
            filtered: r.rejections.filtered,
        }
    }
}

pub fn load_corpus(
    input: &Path,
    schema: &CsvSchema,
    min_seq_len: usize,
) -> Result<(Corpus, IngestReport)> {
    let options = IngestOptions { min_seq_len, row_filter: None };
    corpus::ingest_csv_with(input, schema, &options)
        .with_context(|| format!("ingesting {}", input.display()))
}

fn embed_train_config(config: &PipelineConfig) -> TrainConfig {
    TrainConfig {
        lr: config.embed_lr,
        batch: config.embed_batch,
        epochs: config.embed_epochs,
        lambda: config.lambda,
        seed: config.seed,
        dv: config.dv,
        fused_dim: config.fused_dim,
        negative_samples: if config.negative_samples == 0 {
            None
        } else {
            Some(config.negative_samples)
        },
    }
}

fn predictor_config(config: &PipelineConfig) -> PredictorConfig {
    PredictorConfig {
        lr: config.predictor_lr,
        batch: config.predictor_batch,
        epochs: config.predictor_epochs,
        dropout: config.dropout,
        seed: config.seed,
        val_fraction: config.val_fraction,
        patience: config.patience,
    }
}

/// Runs the configured pipeline over the canonical-format corpus at `input`
/// and writes all artifacts plus the manifest into `out_dir`.
pub fn run_pipeline(input: &Path, config: &PipelineConfig, out_dir: &Path) -> Result<RunOutput> {
    run_pipeline_with_schema(input, &CsvSchema::canonical(), config, out_dir)
}

pub fn run_pipeline_with_schema(
    input: &Path,
    schema: &CsvSchema,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<RunOutput> {
    fs::create_dir_all(out_dir)?;
    let mut artifacts: Vec<PathBuf> = Vec::new();
    let mut track = |p: PathBuf| -> PathBuf {
        artifacts.push(p.clone());
        p
    };

    // ingest
    let (corpus, ingest_report) =
        load_corpus(input, schema, config.min_seq_len).context("stage ingest")?;
    let corpus_path = track(out_dir.join("corpus.csv"));
    corpus.write_canonical_csv_path(&corpus_path).context("stage ingest")?;
    write_json(&track(out_dir.join("ingest.json")), &IngestSummary::from(&ingest_report))
        .context("stage ingest")?;

    // split + difficulty
    let (train_students, test_students) =
        split_students(&corpus, config.train_fraction, config.seed);
    let stats: BTreeMap<_, QuestionStats> = if config.difficulty_on_full {
        difficulty::compute_stats(&corpus)
    } else {
        difficulty::compute_stats_for_students(&corpus, Some(&train_students))
    };
    {
        let file = fs::File::create(track(out_dir.join("stats.csv")))?;
        difficulty::write_stats_csv(&stats, std::io::BufWriter::new(file))
            .context("stage stats")?;
    }

    // record optimization
    let (states, flips) = match config.effective_order().context("stage optimize")? {
        Some(order) => {
            let options = OptimizeOptions {
                alpha: config.alpha,
                beta: config.beta,
                discount: config.coo_discount,
                order,
                fraction: config.fraction,
            };
            let optimized = optimize::optimize_corpus(&corpus, &stats, &options)
                .context("stage optimize")?;
            (optimized.states, optimized.flips)
        }
        None => {
            let raw = corpus
                .sequences
                .iter()
                .map(|(id, seq)| {
                    (id.clone(), seq.interactions.iter().map(|it| it.response).collect())
                })
                .collect();
            (raw, Vec::<FlipRecord>::new())
        }
    };
    let optimized_corpus =
        optimize::OptimizedCorpus { states: states.clone(), flips: flips.clone() }
            .apply_to(&corpus);
    optimized_corpus
        .write_canonical_csv_path(track(out_dir.join("optimized.csv")))
        .context("stage optimize")?;
    {
        let file = fs::File::create(track(out_dir.join("flips.csv")))?;
        optimize::write_flips_csv(&flips, std::io::BufWriter::new(file))
            .context("stage optimize")?;
    }

    // embeddings
    let graph = BipartiteGraph::from_corpus(&corpus, &stats);
    let (embeddings, loss_history) = if config.modules.bte {
        graph_embed::train(&graph, &embed_train_config(config)).context("stage embed")?
    } else {
        (graph_embed::init_embeddings(&graph, config.dv, config.fused_dim, config.seed), Vec::new())
    };
    graph_embed::write_embeddings(
        &track(out_dir.join("embeddings.bin")),
        &track(out_dir.join("embeddings.json")),
        &embeddings,
    )
    .context("stage embed")?;
    {
        let file = fs::File::create(track(out_dir.join("embed_loss.csv")))?;
        graph_embed::write_loss_history_csv(&loss_history, std::io::BufWriter::new(file))
            .context("stage embed")?;
    }

    // predictor
    let train_examples =
        build_examples(&corpus, &states, &embeddings, config.fusion_weight, &train_students)
            .context("stage train")?;
    let test_examples =
        build_examples(&corpus, &states, &embeddings, config.fusion_weight, &test_students)
            .context("stage train")?;
    let mut model = PredictorModel::new(config.fused_dim + 2, config.hidden, config.seed);
    let history = predictor::train_predictor(&mut model, &train_examples, &predictor_config(config))
        .context("stage train")?;
    write_json(&track(out_dir.join("model.json")), &model).context("stage train")?;
    {
        let mut w = csv::Writer::from_writer(fs::File::create(
            track(out_dir.join("predictor_history.csv")),
        )?);
        w.write_record(["epoch", "train_loss", "val_loss"]).context("stage train")?;
        for (epoch, (t, v)) in history.train_loss.iter().zip(&history.val_loss).enumerate() {
            w.write_record([epoch.to_string(), format!("{t:.17}"), format!("{v:.17}")])
                .context("stage train")?;
        }
        w.flush().context("stage train")?;
    }

    // evaluation
    let report = predictor::evaluate(&model, &test_examples, serde_json::to_value(config)?)
        .context("stage evaluate")?;
    write_json(&track(out_dir.join("eval.json")), &report).context("stage evaluate")?;

    // manifest over everything written above
    let mut hashed = BTreeMap::new();
    for path in &artifacts {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        hashed.insert(name, sha256_file(path)?);
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        input_sha256: sha256_file(input)?,
        artifacts: hashed,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;

    let coo_flips = flips.iter().filter(|f| f.module == ModuleKind::Coo).count();
    let col_flips = flips.iter().filter(|f| f.module == ModuleKind::Col).count();
    Ok(RunOutput { run_dir: out_dir.to_path_buf(), report, manifest, coo_flips, col_flips })
}

/// Re-evaluates a finished run directory from its artifacts alone.
pub fn evaluate_run(run_dir: &Path) -> Result<EvalReport> {
    let manifest: Manifest = serde_json::from_reader(std::io::BufReader::new(
        fs::File::open(run_dir.join("manifest.json")).context("opening manifest.json")?,
    ))?;
    let config = &manifest.config;
    let schema = CsvSchema::canonical();
    let (corpus, _) = load_corpus(&run_dir.join("corpus.csv"), &schema, 1)?;
    let (optimized, _) = load_corpus(&run_dir.join("optimized.csv"), &schema, 1)?;
    let states: BTreeMap<StudentId, Vec<u8>> = optimized
        .sequences
        .iter()
        .map(|(id, seq)| (id.clone(), seq.interactions.iter().map(|it| it.response).collect()))
        .collect();
    let embeddings = graph_embed::read_embeddings(
        &run_dir.join("embeddings.bin"),
        &run_dir.join("embeddings.json"),
    )?;
    let model: PredictorModel = serde_json::from_reader(std::io::BufReader::new(
        fs::File::open(run_dir.join("model.json")).context("opening model.json")?,
    ))?;
    let (_, test_students) = split_students(&corpus, config.train_fraction, config.seed);
    let test_examples =
        build_examples(&corpus, &states, &embeddings, config.fusion_weight, &test_students)?;
    predictor::evaluate(&model, &test_examples, serde_json::to_value(config)?)
        .context("stage evaluate")
}
