use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ktopt_cli::config::{parse_grid, ModuleSelection, PipelineConfig};
use ktopt_cli::experiments;
use ktopt_cli::pipeline::{self, evaluate_run};
use ktopt_core::corpus::{self, CsvSchema, IngestOptions};
use ktopt_core::difficulty;
use ktopt_core::graph_embed::{self, TrainConfig};
use ktopt_core::optimize::{self, OptimizeOptions};
use ktopt_core::synth::{self, SynthConfig};

#[derive(Parser)]
#[command(
    name = "ktopt",
    version,
    about = "Answer-record optimization and evaluation pipeline for knowledge tracing"
)]
struct Cli {
    /// Seed applied to every stage of the invoked command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file for `evaluate`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON pipeline config; explicit flags override its fields.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SchemaArgs {
    /// Column holding the student id.
    #[arg(long, default_value = "student_id")]
    col_student: String,
    /// Column holding the question id.
    #[arg(long, default_value = "question_id")]
    col_question: String,
    /// Column holding the skill id(s).
    #[arg(long, default_value = "skill_ids")]
    col_skills: String,
    /// Column holding the 0/1 correctness.
    #[arg(long, default_value = "response")]
    col_response: String,
    /// Ordering column (timestamp or sequence number); omit to keep file order.
    #[arg(long, default_value = "order_index")]
    col_order: Option<String>,
    /// Separator inside multi-valued skill cells.
    #[arg(long, default_value = ";")]
    skill_sep: char,
}

impl SchemaArgs {
    fn to_schema(&self) -> CsvSchema {
        CsvSchema {
            student: self.col_student.clone(),
            question: self.col_question.clone(),
            skills: self.col_skills.clone(),
            response: self.col_response.clone(),
            order: self.col_order.clone(),
            skill_separator: self.skill_sep,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a raw interaction log into the canonical corpus format.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        schema: SchemaArgs,
        /// Students with fewer surviving records are dropped.
        #[arg(long, default_value_t = 3)]
        min_seq_len: usize,
        /// Drop rows where a column equals a value, e.g. `kind=scaffold`.
        /// Repeatable.
        #[arg(long, value_name = "COL=VALUE")]
        drop_where: Vec<String>,
    },
    /// Per-question attempt counts and difficulty table over the whole file.
    /// (The pipeline computes difficulty on its training split unless
    /// `--difficulty-on-full` is set there.)
    Stats {
        #[arg(long)]
        input: PathBuf,
    },
    /// Rewrite response states via the coordination/collaboration passes.
    Optimize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        alpha: f64,
        #[arg(long, default_value_t = 0.05)]
        beta: f64,
        #[arg(long, default_value_t = 1.0)]
        coo_discount: f64,
        #[arg(long, default_value = "coo-col")]
        module_order: String,
        /// Leading fraction of every sequence eligible for optimization.
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
    },
    /// Train question/skill embeddings on the bipartite graph.
    Embed {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 64)]
        dv: usize,
        #[arg(long, default_value_t = 128)]
        fused_dim: usize,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        /// Negatives per positive pair and epoch; 0 uses the full sums.
        #[arg(long, default_value_t = 5)]
        negative_samples: usize,
    },
    /// Run the full pipeline (ingest through evaluation) into a run directory.
    Train {
        #[arg(long)]
        input: PathBuf,
        /// Module combination: raw, coo, col, bte, bte-coo, bte-col, coo-col, full.
        #[arg(long)]
        modules: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        module_order: Option<String>,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        dv: Option<usize>,
        #[arg(long)]
        fused_dim: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        embed_epochs: Option<usize>,
        #[arg(long)]
        fusion_weight: Option<f64>,
        #[arg(long)]
        difficulty_on_full: bool,
    },
    /// Re-evaluate a finished run directory and print the report.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
    },
    /// One pipeline run per module combination.
    Ablate {
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated combinations, e.g. `raw,coo,col,coo-col`.
        #[arg(long, default_value = "raw,coo,col,bte,bte-coo,bte-col,coo-col,full")]
        grid: String,
    },
    /// Optimize only the leading fraction of each sequence, one run per fraction.
    Quantify {
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated fractions in [0, 1].
        #[arg(long, default_value = "0,0.3,0.5,0.7")]
        fractions: String,
    },
    /// Threshold sensitivity sweep (alpha for coordination, beta for collaboration).
    Sweep {
        #[arg(long)]
        input: PathBuf,
        /// start:end:step, e.g. 0.5:1.0:0.05.
        #[arg(long, default_value = "0.5:1.0:0.05")]
        alpha_grid: String,
        /// start:end:step, e.g. 0.01:0.11:0.01.
        #[arg(long, default_value = "0.01:0.11:0.01")]
        beta_grid: String,
    },
    /// Generate a synthetic corpus with known latent mastery.
    Synth {
        #[arg(long, default_value_t = 100)]
        students: usize,
        #[arg(long, default_value_t = 50)]
        questions: usize,
        #[arg(long, default_value_t = 8)]
        skills: usize,
        #[arg(long, default_value_t = 0.2)]
        slip: f64,
        #[arg(long, default_value_t = 0.2)]
        guess: f64,
        /// Sequence length range lo:hi.
        #[arg(long, default_value = "20:40")]
        seq_len: String,
        /// Beta shape parameters a:b for skill difficulty levels.
        #[arg(long, default_value = "2:3")]
        difficulty: String,
    },
}

fn require_out(out: &Option<PathBuf>) -> Result<PathBuf> {
    out.clone().context("--out is required for this command")
}

fn base_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn parse_pair(spec: &str, what: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 2 {
        bail!("{what} must have the form lo:hi, got `{spec}`");
    }
    Ok((parts[0].parse()?, parts[1].parse()?))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest { input, schema, min_seq_len, drop_where } => {
            let out = require_out(&cli.out)?;
            fs::create_dir_all(&out)?;
            let rules: Vec<(String, String)> = drop_where
                .iter()
                .map(|rule| {
                    rule.split_once('=')
                        .map(|(c, v)| (c.to_string(), v.to_string()))
                        .with_context(|| format!("bad --drop-where `{rule}` (need COL=VALUE)"))
                })
                .collect::<Result<_>>()?;
            let filter = |headers: &csv::StringRecord, record: &csv::StringRecord| -> bool {
                for (col, value) in &rules {
                    if let Some(idx) = headers.iter().position(|h| h == col) {
                        if record.get(idx) == Some(value.as_str()) {
                            return false;
                        }
                    }
                }
                true
            };
            let options = IngestOptions { min_seq_len: *min_seq_len, row_filter: Some(&filter) };
            let (corpus, report) = corpus::ingest_csv_with(input, &schema.to_schema(), &options)
                .context("stage ingest")?;
            corpus.write_canonical_csv_path(out.join("corpus.csv")).context("stage ingest")?;
            let summary = serde_json::json!({
                "input_rows": report.input_rows,
                "kept": report.kept,
                "skillless": report.rejections.skillless,
                "nonbinary": report.rejections.nonbinary,
                "short_user": report.rejections.short_user,
                "filtered": report.rejections.filtered,
                "students": corpus.counts.students,
                "questions": corpus.counts.questions,
                "skills": corpus.counts.skills,
                "records": corpus.counts.records,
            });
            fs::write(out.join("ingest.json"), serde_json::to_string_pretty(&summary)?)?;
            println!("{summary:#}");
        }
        Command::Stats { input } => {
            let out = require_out(&cli.out)?;
            fs::create_dir_all(&out)?;
            let (corpus, _) = pipeline::load_corpus(input, &CsvSchema::canonical(), 1)
                .context("stage ingest")?;
            let stats = difficulty::compute_stats(&corpus);
            let file = fs::File::create(out.join("stats.csv"))?;
            difficulty::write_stats_csv(&stats, std::io::BufWriter::new(file))
                .context("stage stats")?;
            println!("wrote stats for {} questions", stats.len());
        }
        Command::Optimize { input, alpha, beta, coo_discount, module_order, fraction } => {
            let out = require_out(&cli.out)?;
            fs::create_dir_all(&out)?;
            let (corpus, _) = pipeline::load_corpus(input, &CsvSchema::canonical(), 1)
                .context("stage ingest")?;
            let stats = difficulty::compute_stats(&corpus);
            let options = OptimizeOptions {
                alpha: *alpha,
                beta: *beta,
                discount: *coo_discount,
                order: module_order.parse().context("stage optimize")?,
                fraction: *fraction,
            };
            let optimized =
                optimize::optimize_corpus(&corpus, &stats, &options).context("stage optimize")?;
            optimized.apply_to(&corpus).write_canonical_csv_path(out.join("optimized.csv"))?;
            let file = fs::File::create(out.join("flips.csv"))?;
            optimize::write_flips_csv(&optimized.flips, std::io::BufWriter::new(file))?;
            println!("rewrote {} states", optimized.flips.len());
        }
        Command::Embed { input, dv, fused_dim, lambda, epochs, lr, batch, negative_samples } => {
            let out = require_out(&cli.out)?;
            fs::create_dir_all(&out)?;
            let (corpus, _) = pipeline::load_corpus(input, &CsvSchema::canonical(), 1)
                .context("stage ingest")?;
            let stats = difficulty::compute_stats(&corpus);
            let graph = graph_embed::BipartiteGraph::from_corpus(&corpus, &stats);
            let config = TrainConfig {
                lr: *lr,
                batch: *batch,
                epochs: *epochs,
                lambda: *lambda,
                seed: cli.seed.unwrap_or(17),
                dv: *dv,
                fused_dim: *fused_dim,
                negative_samples: if *negative_samples == 0 {
                    None
                } else {
                    Some(*negative_samples)
                },
            };
            let (embeddings, history) =
                graph_embed::train(&graph, &config).context("stage embed")?;
            graph_embed::write_embeddings(
                &out.join("embeddings.bin"),
                &out.join("embeddings.json"),
                &embeddings,
            )
            .context("stage embed")?;
            let file = fs::File::create(out.join("embed_loss.csv"))?;
            graph_embed::write_loss_history_csv(&history, std::io::BufWriter::new(file))?;
            println!(
                "trained {} question and {} skill vectors, final loss {:.6}",
                embeddings.q.len(),
                embeddings.s.len(),
                history.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Train {
            input,
            modules,
            alpha,
            beta,
            module_order,
            fraction,
            lambda,
            dv,
            fused_dim,
            hidden,
            epochs,
            embed_epochs,
            fusion_weight,
            difficulty_on_full,
        } => {
            let out = require_out(&cli.out)?;
            let mut config = base_config(&cli)?;
            if let Some(m) = modules {
                config.modules = ModuleSelection::parse(m)?;
            }
            macro_rules! apply {
                ($field:ident) => {
                    if let Some(v) = $field {
                        config.$field = v.clone();
                    }
                };
            }
            apply!(alpha);
            apply!(beta);
            apply!(module_order);
            apply!(fraction);
            apply!(lambda);
            apply!(dv);
            apply!(fused_dim);
            apply!(hidden);
            apply!(embed_epochs);
            apply!(fusion_weight);
            if let Some(v) = epochs {
                config.predictor_epochs = *v;
            }
            if *difficulty_on_full {
                config.difficulty_on_full = true;
            }
            let run = pipeline::run_pipeline(input, &config, &out)?;
            println!("{}", serde_json::to_string_pretty(&run.report)?);
        }
        Command::Evaluate { run } => {
            let report = evaluate_run(run)?;
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(out) = &cli.out {
                fs::write(out, &text)?;
            }
            println!("{text}");
        }
        Command::Ablate { input, grid } => {
            let out = require_out(&cli.out)?;
            let base = base_config(&cli)?;
            let combos: Vec<ModuleSelection> = grid
                .split(',')
                .filter(|s| !s.is_empty())
                .map(ModuleSelection::parse)
                .collect::<Result<_>>()?;
            let rows = experiments::run_ablation(input, &base, &combos, &out)?;
            for row in &rows {
                println!(
                    "{:8} auc={} acc={:.4} rmse={:.4}",
                    row.name,
                    row.auc.map_or("n/a".into(), |v| format!("{v:.4}")),
                    row.acc,
                    row.rmse
                );
            }
        }
        Command::Quantify { input, fractions } => {
            let out = require_out(&cli.out)?;
            let base = base_config(&cli)?;
            let values: Vec<f64> = fractions
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(Into::into))
                .collect::<Result<_>>()?;
            let rows = experiments::run_quantification(input, &base, &values, &out)?;
            for row in &rows {
                println!(
                    "{:10} auc={} acc={:.4}",
                    row.name,
                    row.auc.map_or("n/a".into(), |v| format!("{v:.4}")),
                    row.acc
                );
            }
        }
        Command::Sweep { input, alpha_grid, beta_grid } => {
            let out = require_out(&cli.out)?;
            let base = base_config(&cli)?;
            let alphas = if alpha_grid.is_empty() { Vec::new() } else { parse_grid(alpha_grid)? };
            let betas = if beta_grid.is_empty() { Vec::new() } else { parse_grid(beta_grid)? };
            let rows = experiments::run_sensitivity(input, &base, &alphas, &betas, &out)?;
            println!("wrote {} sweep rows to {}", rows.len(), out.join("sweep.csv").display());
        }
        Command::Synth { students, questions, skills, slip, guess, seq_len, difficulty } => {
            let out = require_out(&cli.out)?;
            fs::create_dir_all(&out)?;
            let (lo, hi) = parse_pair(seq_len, "--seq-len")?;
            let (da, db) = parse_pair(difficulty, "--difficulty")?;
            let config = SynthConfig {
                n_students: *students,
                n_questions: *questions,
                n_skills: *skills,
                slip: *slip,
                guess: *guess,
                seq_len_min: lo as usize,
                seq_len_max: hi as usize,
                difficulty_alpha: da,
                difficulty_beta: db,
                seed: cli.seed.unwrap_or(17),
            };
            let (corpus, truth) = synth::generate(&config).context("stage synth")?;
            corpus.write_canonical_csv_path(out.join("corpus.csv"))?;
            let file = fs::File::create(out.join("truth.csv"))?;
            synth::write_truth_csv(&truth, std::io::BufWriter::new(file))?;
            println!(
                "generated {} students / {} records into {}",
                corpus.counts.students,
                corpus.counts.records,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
