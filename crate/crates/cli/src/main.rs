//! Command-line surface: pretraining, finetuning, evaluation, mask and
//! attention dumps, the coverage report, and the built-in verification
//! suites. Diagnostics (including the resolved configuration and seed) go
//! to stderr; data outputs go to stdout or files.

mod checks;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use permlm_core::corpus::Vocab;
use permlm_core::coverage;
use permlm_core::graph::Graph;
use permlm_core::mask::{build_attention_masks, full_content_mask, Permutation, TargetSelection};
use permlm_core::model::{forward_content, Bindings, LayerMemory, ModelParams, SegmentInput};
use permlm_core::rng::Rng;
use permlm_core::synth::read_overlap_tsv;
use permlm_core::trainer::{
    self, eval_perplexity, read_training_checkpoint, FinetuneConfig, Objective, TrainConfig,
};

#[derive(Parser)]
#[command(name = "permlm", version, about = "Desk-scale permutation language modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain on a plain-text corpus.
    Pretrain {
        /// Training objective: plm, dae, or ar.
        #[arg(long)]
        objective: String,
        /// Configuration file ("key = value" lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for metrics, vocabulary, and checkpoints.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Resume from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// UTF-8 corpus file.
        corpus: PathBuf,
    },
    /// Finetune a pretrained checkpoint on a labeled two-segment TSV.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Vocabulary file written during pretraining.
        #[arg(long)]
        vocab: PathBuf,
        /// Training TSV: label<TAB>segment A<TAB>segment B.
        #[arg(long)]
        train: PathBuf,
        /// Held-out TSV in the same format.
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, default_value = "finetune-run")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 3e-4)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        /// Layer-wise learning-rate decay factor (1.0 disables).
        #[arg(long, default_value_t = 1.0)]
        layerwise_alpha: f64,
    },
    /// Held-out perplexity in the forward autoregressive mode.
    EvalPpl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        corpus: PathBuf,
    },
    /// Print the content/query visibility masks for a factorization order.
    DumpMasks {
        /// Comma-separated 1-based factorization order, e.g. 3,2,4,1.
        #[arg(long)]
        perm: String,
        /// Memory columns.
        #[arg(long, default_value_t = 0)]
        mem: usize,
        /// Partial-prediction constant used for the target tail.
        #[arg(long, default_value_t = 1.0)]
        k: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dependency-coverage report comparing objectives.
    Coverage {
        #[arg(long, default_value_t = 5)]
        seq_len: usize,
        /// Number of target positions per sampled instance.
        #[arg(long, default_value_t = 2)]
        targets: usize,
        /// Number of sampled (instance, order) lines.
        #[arg(long, default_value_t = 100)]
        orders: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write per-head attention probability matrices for an input text.
    DumpAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value = "attention-dump")]
        out: PathBuf,
        /// Visibility: causal or bidirectional.
        #[arg(long, default_value = "causal")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference verification of every primitive and the full model.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exhaustive-permutation and recurrence-vs-single-pass oracles.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
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

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn announce(cfg: &TrainConfig, seed: u64) {
    eprintln!("resolved configuration:");
    for line in cfg.render().lines() {
        eprintln!("  {line}");
    }
    eprintln!("seed = {seed}");
}

fn load_model(
    checkpoint: &std::path::Path,
    config: &Option<PathBuf>,
    vocab: &std::path::Path,
) -> Result<(ModelParams, Vocab, TrainConfig)> {
    let cfg = load_config(config)?;
    let vocab = Vocab::load(vocab, cfg.tokenizer)
        .with_context(|| format!("reading vocabulary {}", vocab.display()))?;
    let model_config = cfg.model_config(vocab.len());
    let loaded = read_training_checkpoint(checkpoint, &model_config, 0)
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    Ok((loaded.params, vocab, cfg))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { objective, config, out, seed, resume, corpus } => {
            let cfg = load_config(&config)?;
            announce(&cfg, seed);
            let objective = Objective::parse(&objective)
                .with_context(|| format!("unknown objective '{objective}' (use plm, dae, ar)"))?;
            let text = std::fs::read_to_string(&corpus)
                .with_context(|| format!("reading corpus {}", corpus.display()))?;
            let summary = trainer::train(&cfg, &text, objective, &out, seed, resume.as_deref())?;
            eprintln!(
                "finished {} steps: loss {} -> {}",
                summary.steps_run, summary.initial_loss, summary.final_loss
            );
            eprintln!("metrics: {}", summary.metrics_path.display());
            eprintln!("checkpoint: {}", summary.checkpoint_path.display());
            Ok(())
        }
        Command::Finetune {
            checkpoint,
            config,
            vocab,
            train,
            eval,
            out,
            seed,
            steps,
            lr,
            batch_size,
            layerwise_alpha,
        } => {
            let (mut params, vocab, cfg) = load_model(&checkpoint, &config, &vocab)?;
            announce(&cfg, seed);
            let train_data = read_overlap_tsv(&train)
                .with_context(|| format!("reading {}", train.display()))?;
            let eval_data =
                read_overlap_tsv(&eval).with_context(|| format!("reading {}", eval.display()))?;
            if train_data.is_empty() || eval_data.is_empty() {
                bail!("finetuning needs nonempty train and eval sets");
            }
            let ft = FinetuneConfig {
                steps,
                batch_size,
                peak_lr: lr,
                warmup_steps: steps / 10,
                layerwise_alpha,
                seq_len: cfg.seq_len,
                ..FinetuneConfig::default()
            };
            let summary = trainer::finetune(&mut params, &vocab, &train_data, &eval_data, &ft, seed)?;
            std::fs::create_dir_all(&out)?;
            let ckpt = out.join("finetuned.xlnt");
            permlm_core::checkpoint::save(&ckpt, &{
                let mut named = params.named();
                named.iter_mut().for_each(|(_, t)| permlm_core::checkpoint::round_through_f32(t));
                named
            })?;
            println!("eval_accuracy\t{}", summary.eval_accuracy);
            eprintln!("final training loss {}", summary.final_loss);
            eprintln!("checkpoint: {}", ckpt.display());
            Ok(())
        }
        Command::EvalPpl { checkpoint, config, vocab, seed, corpus } => {
            let (params, vocab, cfg) = load_model(&checkpoint, &config, &vocab)?;
            announce(&cfg, seed);
            let text = std::fs::read_to_string(&corpus)
                .with_context(|| format!("reading corpus {}", corpus.display()))?;
            let ppl = eval_perplexity(&params, &text, &vocab)?;
            println!("perplexity\t{ppl}");
            Ok(())
        }
        Command::DumpMasks { perm, mem, k, seed } => {
            let cfg = TrainConfig::default();
            announce(&cfg, seed);
            let order: Vec<usize> = perm
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .with_context(|| format!("parsing factorization order '{perm}'"))?;
            let perm = Permutation::from_order(order)?;
            let sel = permlm_core::mask::select_prediction_targets(&perm, k)?;
            let masks = build_attention_masks(&perm, &sel, mem)?;
            print!("{}", masks.dump(&perm));
            Ok(())
        }
        Command::Coverage { seq_len, targets, orders, seed } => {
            let cfg = TrainConfig::default();
            announce(&cfg, seed);
            if targets == 0 || targets > seq_len {
                bail!("targets must be in 1..=seq_len");
            }
            let fraction = targets as f64 / seq_len as f64;
            let mut rng = Rng::derive(seed, &[0xC0]);
            let report = coverage::coverage_report(seq_len, fraction, orders, &mut rng)?;
            print!("{}", report.to_tsv());
            if !report.all_nested() {
                bail!("coverage nesting property violated");
            }
            Ok(())
        }
        Command::DumpAttention { checkpoint, config, vocab, text, out, mode, seed } => {
            let (params, vocab, cfg) = load_model(&checkpoint, &config, &vocab)?;
            announce(&cfg, seed);
            let tokens = vocab.encode(&text);
            if tokens.is_empty() {
                bail!("input text produced no tokens");
            }
            let t = tokens.len();
            let model_config = params.config.clone();
            let mut graph = Graph::new();
            let bind = Bindings::bind(&mut graph, &params);
            let input = SegmentInput::plain(tokens, 0, 0);
            let memory = LayerMemory::empty(model_config.n_layers, 0);
            let content_mask = match mode.as_str() {
                "causal" => {
                    let perm = Permutation::identity(t)?;
                    let sel = TargetSelection { cut: t, targets: vec![] };
                    build_attention_masks(&perm, &sel, 0)?.content
                }
                "bidirectional" => full_content_mask(t, 0),
                other => bail!("unknown mode '{other}' (use causal or bidirectional)"),
            };
            let fwd =
                forward_content(&mut graph, &bind, &model_config, &input, &memory, &content_mask, None)?;
            std::fs::create_dir_all(&out)?;
            for (layer, probs) in fwd.attn_probs.iter().enumerate() {
                let v = graph.value(*probs);
                let (heads, rows, cols) = (v.shape()[0], v.shape()[1], v.shape()[2]);
                for h in 0..heads {
                    let path = out.join(format!("layer{layer}.head{h}.txt"));
                    let mut body = String::new();
                    for r in 0..rows {
                        let row: Vec<String> = (0..cols)
                            .map(|c| format!("{:.8}", v.at(&[h, r, c])))
                            .collect();
                        body.push_str(&row.join(" "));
                        body.push('\n');
                    }
                    std::fs::write(&path, body)?;
                }
            }
            eprintln!("attention matrices written to {}", out.display());
            Ok(())
        }
        Command::GradCheck { seed } => {
            let cfg = TrainConfig::default();
            announce(&cfg, seed);
            checks::grad_check(seed)
        }
        Command::OracleCheck { seed } => {
            let cfg = TrainConfig::default();
            announce(&cfg, seed);
            checks::oracle_check(seed)
        }
    }
}
