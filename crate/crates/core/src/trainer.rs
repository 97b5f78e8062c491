//! Optimization: Adam with decoupled weight decay, linear warmup then linear
//! decay, optional layer-wise learning-rate decay, gradient clipping by
//! global norm, checkpointing with bitwise-reproducible resume, and the
//! training loops for the three objectives plus classification finetuning.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::corpus::{
    full_window_count, nth_full_window, pack_two_segments, stream_windows, CorpusError,
    TokenizerKind, Vocab,
};
use crate::graph::Graph;
use crate::mask::{
    build_bidirectional_batches, sample_factorization_order, sample_target_span,
    select_prediction_targets, span_factorization_order, MaskError, PipelineRow,
};
use crate::model::{
    ar_loss, dae_loss, finetune_classify, plm_loss, Bindings, ContentRow, LayerMemory,
    ModelConfig, ModelError, ModelParams, PlmRow, SegmentInput,
};
use crate::attention::Dropout;
use crate::rng::Rng;
use crate::synth::OverlapExample;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("corpus shorter than one training window")]
    CorpusTooShort,
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGrad { name: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("checkpoint does not match the configuration: {0}")]
    CheckpointMismatch(String),
}

// ---- learning-rate schedules ------------------------------------------------

/// Linear ramp 0 -> peak over `warmup`, then linear decay peak -> 0 at `total`.
pub fn lr_schedule(step: usize, peak_lr: f64, warmup: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    if step >= total {
        return 0.0;
    }
    if warmup > 0 && step < warmup {
        return peak_lr * step as f64 / warmup as f64;
    }
    peak_lr * (total - step) as f64 / (total - warmup) as f64
}

/// Top-down exponential layer-wise decay: layer m (1-based, of M layers)
/// trains at base_lr * alpha^(M - m). alpha = 1 disables the decay.
pub fn layerwise_lr(base_lr: f64, layer_m: usize, n_layers: usize, alpha: f64) -> f64 {
    base_lr * alpha.powi((n_layers - layer_m) as i32)
}

fn layer_factor(name: &str, n_layers: usize, alpha: f64) -> f64 {
    if alpha == 1.0 {
        return 1.0;
    }
    if let Some(rest) = name.strip_prefix("layer") {
        if let Some(idx) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
            return alpha.powi((n_layers - (idx + 1)) as i32);
        }
    }
    if name == "emb" || name == "g_init" {
        // embeddings sit below the first layer
        return alpha.powi(n_layers as i32);
    }
    // classification head sits above the top layer
    1.0
}

// ---- optimizer ---------------------------------------------------------------

/// Adam moments and hyperparameters. Weight decay is decoupled: it is added
/// to the update, never to the gradient entering the moments.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        OptimState { step: 0, beta1, beta2, eps, weight_decay, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm_sq: f64 = grads.values().flat_map(|g| g.iter()).map(|&x| x * x).sum();
    let norm = norm_sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// One Adam step with bias correction and decoupled weight decay.
/// Deterministic given (params, grads, state); layer-wise decay scales the
/// learning rate of deeper-from-the-top parameters by alpha per layer.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimState,
    base_lr: f64,
    layerwise_alpha: f64,
) -> Result<(), TrainError> {
    let n_layers = params.config.n_layers;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut bad: Option<String> = None;
    let (beta1, beta2, eps, wd) = (state.beta1, state.beta2, state.eps, state.weight_decay);
    let (ms, vs) = (&mut state.m, &mut state.v);
    params.visit_mut(|name, tensor| {
        if bad.is_some() {
            return;
        }
        let n = tensor.numel();
        let zero;
        let grad: &[f64] = match grads.get(&name) {
            Some(g) => g,
            None => {
                zero = vec![0.0; n];
                &zero
            }
        };
        if grad.iter().any(|g| !g.is_finite()) {
            bad = Some(name);
            return;
        }
        let m = ms.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = vs.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let lr = base_lr * layer_factor(&name, n_layers, layerwise_alpha);
        let data = tensor.data_mut();
        for i in 0..n {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * data[i]);
        }
    });
    if let Some(name) = bad {
        return Err(TrainError::NonFiniteGrad { name });
    }
    Ok(())
}

// ---- configuration file --------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetMode {
    Partial,
    Span,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub mem_len: usize,
    pub seq_len: usize,
    pub k: f64,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub max_vocab: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub layerwise_alpha: f64,
    pub batch_size: usize,
    pub tokenizer: TokenizerKind,
    pub target_mode: TargetMode,
    pub mask_rate: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_layers: 2,
            d_model: 128,
            n_heads: 4,
            head_dim: 32,
            ffn_dim: 512,
            mem_len: 64,
            seq_len: 64,
            k: 6.0,
            dropout: 0.1,
            attn_dropout: 0.1,
            max_vocab: 256,
            peak_lr: 5e-4,
            warmup_steps: 100,
            total_steps: 2000,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-6,
            clip_norm: 1.0,
            layerwise_alpha: 1.0,
            batch_size: 16,
            tokenizer: TokenizerKind::Char,
            target_mode: TargetMode::Partial,
            mask_rate: 0.15,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    /// Parse UTF-8 "key = value" lines. Blank lines and '#' comments are
    /// allowed; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TrainError::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                TrainError::Config(format!("line {}: bad {what} value '{value}'", lineno + 1))
            };
            match key {
                "n_layers" => cfg.n_layers = value.parse().map_err(|_| bad(key))?,
                "d_model" => cfg.d_model = value.parse().map_err(|_| bad(key))?,
                "n_heads" => cfg.n_heads = value.parse().map_err(|_| bad(key))?,
                "head_dim" => cfg.head_dim = value.parse().map_err(|_| bad(key))?,
                "ffn_dim" => cfg.ffn_dim = value.parse().map_err(|_| bad(key))?,
                "mem_len" => cfg.mem_len = value.parse().map_err(|_| bad(key))?,
                "seq_len" => cfg.seq_len = value.parse().map_err(|_| bad(key))?,
                "k" => cfg.k = value.parse().map_err(|_| bad(key))?,
                "dropout" => cfg.dropout = value.parse().map_err(|_| bad(key))?,
                "attn_dropout" => cfg.attn_dropout = value.parse().map_err(|_| bad(key))?,
                "max_vocab" => cfg.max_vocab = value.parse().map_err(|_| bad(key))?,
                "peak_lr" => cfg.peak_lr = value.parse().map_err(|_| bad(key))?,
                "warmup_steps" => cfg.warmup_steps = value.parse().map_err(|_| bad(key))?,
                "total_steps" => cfg.total_steps = value.parse().map_err(|_| bad(key))?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad(key))?,
                "adam_beta1" => cfg.adam_beta1 = value.parse().map_err(|_| bad(key))?,
                "adam_beta2" => cfg.adam_beta2 = value.parse().map_err(|_| bad(key))?,
                "adam_eps" => cfg.adam_eps = value.parse().map_err(|_| bad(key))?,
                "clip_norm" => cfg.clip_norm = value.parse().map_err(|_| bad(key))?,
                "layerwise_alpha" => cfg.layerwise_alpha = value.parse().map_err(|_| bad(key))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad(key))?,
                "mask_rate" => cfg.mask_rate = value.parse().map_err(|_| bad(key))?,
                "checkpoint_every" => cfg.checkpoint_every = value.parse().map_err(|_| bad(key))?,
                "tokenizer" => {
                    cfg.tokenizer = match value {
                        "char" => TokenizerKind::Char,
                        "word" => TokenizerKind::Word,
                        _ => return Err(bad(key)),
                    }
                }
                "target_mode" => {
                    cfg.target_mode = match value {
                        "partial" => TargetMode::Partial,
                        "span" => TargetMode::Span,
                        _ => return Err(bad(key)),
                    }
                }
                other => {
                    return Err(TrainError::Config(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            ffn_dim: self.ffn_dim,
            vocab_size,
            mem_len: self.mem_len,
            k: self.k,
            dropout: self.dropout,
            attn_dropout: self.attn_dropout,
            seq_len: self.seq_len,
        }
    }

    /// Resolved key = value form, echoed at the start of every run.
    pub fn render(&self) -> String {
        let tok = match self.tokenizer {
            TokenizerKind::Char => "char",
            TokenizerKind::Word => "word",
        };
        let mode = match self.target_mode {
            TargetMode::Partial => "partial",
            TargetMode::Span => "span",
        };
        format!(
            "n_layers = {}\nd_model = {}\nn_heads = {}\nhead_dim = {}\nffn_dim = {}\n\
             mem_len = {}\nseq_len = {}\nk = {}\ndropout = {}\nattn_dropout = {}\n\
             max_vocab = {}\npeak_lr = {}\nwarmup_steps = {}\ntotal_steps = {}\n\
             weight_decay = {}\nadam_beta1 = {}\nadam_beta2 = {}\nadam_eps = {}\n\
             clip_norm = {}\nlayerwise_alpha = {}\nbatch_size = {}\ntokenizer = {}\n\
             target_mode = {}\nmask_rate = {}\ncheckpoint_every = {}",
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.head_dim,
            self.ffn_dim,
            self.mem_len,
            self.seq_len,
            self.k,
            self.dropout,
            self.attn_dropout,
            self.max_vocab,
            self.peak_lr,
            self.warmup_steps,
            self.total_steps,
            self.weight_decay,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_eps,
            self.clip_norm,
            self.layerwise_alpha,
            self.batch_size,
            tok,
            mode,
            self.mask_rate,
            self.checkpoint_every
        )
    }
}

// ---- checkpoint plumbing ---------------------------------------------------------

fn round_state_through_f32(
    params: &mut ModelParams,
    opt: &mut OptimState,
    memories: &mut [LayerMemory],
) {
    params.visit_mut(|_, t| checkpoint::round_through_f32(t));
    for m in opt.m.values_mut().chain(opt.v.values_mut()) {
        for x in m.iter_mut() {
            *x = *x as f32 as f64;
        }
    }
    for mem in memories.iter_mut() {
        for level in &mut mem.levels {
            checkpoint::round_through_f32(level);
        }
    }
}

/// Serialize parameters, optimizer moments, pipeline memories, and the step
/// counter. Live state is rounded through f32 first so the saved file and
/// the continuing run agree exactly.
pub fn write_training_checkpoint(
    path: &Path,
    params: &mut ModelParams,
    opt: &mut OptimState,
    memories: &mut [LayerMemory],
    steps_done: usize,
) -> Result<(), TrainError> {
    round_state_through_f32(params, opt, memories);
    let mut tensors = params.named();
    for (name, m) in &opt.m {
        tensors.insert(format!("adam.m.{name}"), Tensor::new(vec![m.len()], m.clone()).unwrap());
    }
    for (name, v) in &opt.v {
        tensors.insert(format!("adam.v.{name}"), Tensor::new(vec![v.len()], v.clone()).unwrap());
    }
    tensors.insert("trainer.step".into(), Tensor::scalar(steps_done as f64));
    for (r, mem) in memories.iter().enumerate() {
        if mem.is_empty() {
            continue;
        }
        for (l, level) in mem.levels.iter().enumerate() {
            tensors.insert(format!("memory.row{r}.level{l}"), level.clone());
        }
        let pos: Vec<f64> = mem.positions.iter().map(|&p| p as f64).collect();
        tensors
            .insert(format!("memory.row{r}.pos"), Tensor::new(vec![pos.len()], pos).unwrap());
        tensors.insert(format!("memory.row{r}.doc"), Tensor::scalar(mem.doc_id as f64));
    }
    checkpoint::save(path, &tensors)?;
    Ok(())
}

/// Model parameters (and optionally full training state) from a checkpoint.
pub struct LoadedCheckpoint {
    pub params: ModelParams,
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    pub steps_done: usize,
    pub memories: Vec<LayerMemory>,
}

pub fn read_training_checkpoint(
    path: &Path,
    config: &ModelConfig,
    n_rows: usize,
) -> Result<LoadedCheckpoint, TrainError> {
    let tensors = checkpoint::load(path)?;
    let mut params = ModelParams {
        config: config.clone(),
        embedding: Tensor::zeros(&[config.vocab_size, config.d_model]),
        g_init: Tensor::zeros(&[config.d_model]),
        layers: {
            let shape = config.layer_shape();
            let mut rng = Rng::new(0);
            (0..config.n_layers)
                .map(|_| crate::attention::LayerParams::init(&shape, &mut rng))
                .collect()
        },
        cls_head: None,
    };
    if let (Some(w), Some(b)) = (tensors.get("cls.w"), tensors.get("cls.b")) {
        params.cls_head =
            Some(crate::model::ClsHead { w: w.clone(), b: b.clone() });
    }
    let mut missing = Vec::new();
    params.visit_mut(|name, t| match tensors.get(&name) {
        Some(loaded) if loaded.shape() == t.shape() => *t = loaded.clone(),
        Some(loaded) => missing.push(format!(
            "{name}: shape {:?} in file, {:?} in config",
            loaded.shape(),
            t.shape()
        )),
        None => missing.push(format!("{name}: absent from checkpoint")),
    });
    if !missing.is_empty() {
        return Err(TrainError::CheckpointMismatch(missing.join("; ")));
    }
    let mut moments = BTreeMap::new();
    for (name, t) in &tensors {
        if let Some(pname) = name.strip_prefix("adam.m.") {
            let v_name = format!("adam.v.{pname}");
            if let Some(v) = tensors.get(&v_name) {
                moments.insert(pname.to_string(), (t.data().to_vec(), v.data().to_vec()));
            }
        }
    }
    let steps_done = tensors.get("trainer.step").map(|t| t.item() as usize).unwrap_or(0);
    let mut memories = Vec::with_capacity(n_rows);
    for r in 0..n_rows {
        let first = tensors.get(&format!("memory.row{r}.level0"));
        match first {
            None => memories.push(LayerMemory::empty(config.n_layers, 0)),
            Some(_) => {
                let mut levels = Vec::with_capacity(config.n_layers);
                for l in 0..config.n_layers {
                    let t = tensors.get(&format!("memory.row{r}.level{l}")).ok_or_else(|| {
                        TrainError::CheckpointMismatch(format!("memory.row{r}.level{l} missing"))
                    })?;
                    levels.push(t.clone());
                }
                let pos = tensors
                    .get(&format!("memory.row{r}.pos"))
                    .ok_or_else(|| {
                        TrainError::CheckpointMismatch(format!("memory.row{r}.pos missing"))
                    })?
                    .data()
                    .iter()
                    .map(|&p| p as usize)
                    .collect::<Vec<_>>();
                let doc_id = tensors
                    .get(&format!("memory.row{r}.doc"))
                    .map(|t| t.item() as u64)
                    .unwrap_or(0);
                let seg_ids = vec![0; pos.len()];
                memories.push(LayerMemory { levels, positions: pos, seg_ids, doc_id });
            }
        }
    }
    Ok(LoadedCheckpoint { params, moments, steps_done, memories })
}

// ---- pretraining loop ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Plm,
    Dae,
    Ar,
}

impl Objective {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "plm" => Some(Objective::Plm),
            "dae" => Some(Objective::Dae),
            "ar" => Some(Objective::Ar),
            _ => None,
        }
    }
}

#[derive(Debug)]
pub struct TrainSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps_run: usize,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub vocab_path: PathBuf,
}

/// Pretrain on a plain-text corpus. Per step each pipeline row takes its
/// next consecutive window (memory chained, reset at every epoch wrap) and,
/// for the permutation objective, a fresh factorization order.
pub fn train(
    cfg: &TrainConfig,
    corpus_text: &str,
    objective: Objective,
    out_dir: &Path,
    seed: u64,
    resume: Option<&Path>,
) -> Result<TrainSummary, TrainError> {
    std::fs::create_dir_all(out_dir)?;
    let vocab = Vocab::build(corpus_text, cfg.max_vocab, cfg.tokenizer)?;
    let vocab_path = out_dir.join("vocab.txt");
    vocab.save(&vocab_path)?;
    let stream = vocab.encode(corpus_text);
    let rows: Vec<PipelineRow> = build_bidirectional_batches(&stream, cfg.batch_size, cfg.seq_len)?;
    let windows_per_row: Vec<usize> =
        rows.iter().map(|r| full_window_count(r.tokens.len(), cfg.seq_len)).collect();
    if windows_per_row.contains(&0) {
        return Err(TrainError::CorpusTooShort);
    }
    let config = cfg.model_config(vocab.len());
    config.validate()?;

    let (mut params, mut opt, start_step, mut memories) = match resume {
        Some(path) => {
            let loaded = read_training_checkpoint(path, &config, rows.len())?;
            let mut opt =
                OptimState::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
            opt.step = loaded.steps_done;
            for (name, (m, v)) in loaded.moments {
                opt.m.insert(name.clone(), m);
                opt.v.insert(name, v);
            }
            (loaded.params, opt, loaded.steps_done, loaded.memories)
        }
        None => {
            let mut init_rng = Rng::derive(seed, &[0x1_0000]);
            let params = ModelParams::init(config.clone(), &mut init_rng)?;
            let opt =
                OptimState::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
            let memories =
                (0..rows.len()).map(|_| LayerMemory::empty(config.n_layers, u64::MAX)).collect();
            (params, opt, 0usize, memories)
        }
    };

    let metrics_path = out_dir.join("metrics.tsv");
    let mut metrics = std::fs::File::create(&metrics_path)?;
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut last_ckpt = out_dir.join(format!("ckpt-{start_step}.xlnt"));
    let started = std::time::Instant::now();
    let mut tokens_seen = 0usize;

    for step in start_step..cfg.total_steps {
        let lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps, cfg.total_steps);
        let mut graph = Graph::new();
        let bind = Bindings::bind(&mut graph, &params);

        let inputs: Vec<SegmentInput> = rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let n_windows = windows_per_row[r];
                let widx = step % n_windows;
                let epoch = (step / n_windows) as u64;
                let win = nth_full_window(&row.tokens, cfg.seq_len, widx);
                SegmentInput::plain(win.tokens, win.start_pos, epoch)
            })
            .collect();
        tokens_seen += inputs.iter().map(|i| i.n_real).sum::<usize>();

        let mut dropout = if cfg.dropout > 0.0 || cfg.attn_dropout > 0.0 {
            Some(Dropout {
                rng: Rng::derive(seed, &[0x2_0000, step as u64]),
                attn_p: cfg.attn_dropout,
                hidden_p: cfg.dropout,
            })
        } else {
            None
        };

        let (loss_node, loss_value, new_memories) = match objective {
            Objective::Plm => {
                let mut plm_rows = Vec::with_capacity(rows.len());
                for (r, input) in inputs.iter().enumerate() {
                    let mut row_rng = Rng::derive(seed, &[0x3_0000, step as u64, r as u64]);
                    let (perm, targets) = match cfg.target_mode {
                        TargetMode::Partial => {
                            let perm = sample_factorization_order(cfg.seq_len, &mut row_rng)?;
                            let sel = select_prediction_targets(&perm, cfg.k)?;
                            (perm, sel)
                        }
                        TargetMode::Span => {
                            let span = sample_target_span(cfg.seq_len, cfg.k, &mut row_rng)?;
                            span_factorization_order(&span, cfg.seq_len, &mut row_rng)?
                        }
                    };
                    plm_rows.push(PlmRow { input, memory: &memories[r], perm, targets });
                }
                let out = plm_loss(&mut graph, &bind, &config, &plm_rows, dropout.as_mut())?;
                let value = graph.value(out.loss).item();
                let mems = out.rows.into_iter().map(|f| f.new_memory).collect::<Vec<_>>();
                (Some(out.loss), value, mems)
            }
            Objective::Dae => {
                let content_rows: Vec<ContentRow> = inputs
                    .iter()
                    .enumerate()
                    .map(|(r, input)| ContentRow { input, memory: &memories[r] })
                    .collect();
                let mut corrupt_rng = Rng::derive(seed, &[0x4_0000, step as u64]);
                let out = dae_loss(
                    &mut graph,
                    &bind,
                    &config,
                    &content_rows,
                    cfg.mask_rate,
                    &mut corrupt_rng,
                    dropout.as_mut(),
                )?;
                let mems = out.rows.into_iter().map(|f| f.new_memory).collect::<Vec<_>>();
                if out.n_masked == 0 {
                    (None, 0.0, mems)
                } else {
                    // optimize the per-target mean of the summed objective
                    let mean = graph.scale(out.loss_sum, 1.0 / out.n_masked as f64);
                    let value = graph.value(mean).item();
                    (Some(mean), value, mems)
                }
            }
            Objective::Ar => {
                let content_rows: Vec<ContentRow> = inputs
                    .iter()
                    .enumerate()
                    .map(|(r, input)| ContentRow { input, memory: &memories[r] })
                    .collect();
                let out = ar_loss(&mut graph, &bind, &config, &content_rows, dropout.as_mut())?;
                let value = graph.value(out.loss).item();
                let mems = out.rows.into_iter().map(|f| f.new_memory).collect::<Vec<_>>();
                (Some(out.loss), value, mems)
            }
        };

        if !loss_value.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        if initial_loss.is_nan() {
            initial_loss = loss_value;
        }
        final_loss = loss_value;
        memories = new_memories;

        if let Some(loss) = loss_node {
            graph.backward(loss).map_err(ModelError::from)?;
            let mut grads = bind.grads(&graph);
            clip_global_norm(&mut grads, cfg.clip_norm);
            optimizer_step(&mut params, &grads, &mut opt, lr, cfg.layerwise_alpha)?;
        }

        writeln!(metrics, "{}\t{}\t{}", step, lr, loss_value)?;

        let done = step + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.total_steps {
            last_ckpt = out_dir.join(format!("ckpt-{done}.xlnt"));
            write_training_checkpoint(&last_ckpt, &mut params, &mut opt, &mut memories, done)?;
        }
        if done % 50 == 0 || done == cfg.total_steps {
            let elapsed = started.elapsed().as_secs_f64().max(1e-9);
            eprintln!(
                "step {done}/{} loss {loss_value:.4} ({:.0} tokens/sec)",
                cfg.total_steps,
                tokens_seen as f64 / elapsed
            );
        }
    }
    metrics.flush()?;

    Ok(TrainSummary {
        initial_loss,
        final_loss,
        steps_run: cfg.total_steps - start_step,
        checkpoint_path: last_ckpt,
        metrics_path,
        vocab_path,
    })
}

// ---- evaluation -----------------------------------------------------------------

/// Held-out perplexity under the forward autoregressive mode with memory
/// chained across consecutive windows.
pub fn eval_perplexity(
    params: &ModelParams,
    text: &str,
    vocab: &Vocab,
) -> Result<f64, TrainError> {
    let config = &params.config;
    let stream = vocab.encode(text);
    if stream.is_empty() {
        return Err(TrainError::CorpusTooShort);
    }
    let windows = stream_windows(&stream, config.seq_len, config.seq_len)?;
    let mut memory = LayerMemory::empty(config.n_layers, 0);
    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    for win in windows {
        if win.n_real == 0 {
            continue;
        }
        let mut input = SegmentInput::plain(win.tokens.clone(), win.start_pos, 0);
        input.n_real = win.n_real;
        let mut graph = Graph::new();
        let bind = Bindings::bind(&mut graph, params);
        let row = ContentRow { input: &input, memory: &memory };
        let out = ar_loss(&mut graph, &bind, config, std::slice::from_ref(&row), None)?;
        total_nll += graph.value(out.loss).item() * out.n_targets as f64;
        total_tokens += out.n_targets;
        memory = out.rows.into_iter().next().expect("one row").new_memory;
    }
    Ok((total_nll / total_tokens as f64).exp())
}

// ---- finetuning -----------------------------------------------------------------

pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub layerwise_alpha: f64,
    pub seq_len: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 1000,
            batch_size: 16,
            peak_lr: 3e-4,
            warmup_steps: 50,
            weight_decay: 0.01,
            adam_eps: 1e-6,
            clip_norm: 1.0,
            layerwise_alpha: 1.0,
            seq_len: 64,
        }
    }
}

#[derive(Debug)]
pub struct FinetuneSummary {
    pub eval_accuracy: f64,
    pub final_loss: f64,
}

fn pack_example(
    ex: &OverlapExample,
    vocab: &Vocab,
    seq_len: usize,
) -> Result<SegmentInput, TrainError> {
    let a = vocab.encode(&ex.seg_a);
    let b = vocab.encode(&ex.seg_b);
    let pair = pack_two_segments(&a, &b, seq_len, 0)?;
    let n = pair.token_ids.len();
    Ok(SegmentInput {
        tokens: pair.token_ids,
        seg_ids: pair.seg_ids,
        positions: (0..n).collect(),
        n_real: n,
        doc_id: pair.doc_id,
    })
}

/// Classification accuracy of the content-stream model on labeled pairs.
pub fn classify_accuracy(
    params: &ModelParams,
    vocab: &Vocab,
    data: &[OverlapExample],
    seq_len: usize,
) -> Result<f64, TrainError> {
    let config = &params.config;
    let mut correct = 0usize;
    for ex in data {
        let input = pack_example(ex, vocab, seq_len)?;
        let mut graph = Graph::new();
        let bind = Bindings::bind(&mut graph, params);
        let logits = finetune_classify(&mut graph, &bind, config, &input, None)?;
        let v = graph.value(logits).data();
        let pred = if v[1] > v[0] { 1 } else { 0 };
        if pred == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Finetune a pretrained model (query stream dropped) on the two-segment
/// classification task.
pub fn finetune(
    params: &mut ModelParams,
    vocab: &Vocab,
    train_data: &[OverlapExample],
    eval_data: &[OverlapExample],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneSummary, TrainError> {
    if params.cls_head.is_none() {
        let mut head_rng = Rng::derive(seed, &[0x5_0000]);
        params.add_cls_head(2, &mut head_rng);
    }
    let config = params.config.clone();
    let mut opt = OptimState::new(0.9, 0.999, cfg.adam_eps, cfg.weight_decay);
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let lr = lr_schedule(step, cfg.peak_lr, cfg.warmup_steps, cfg.steps);
        let mut batch_rng = Rng::derive(seed, &[0x6_0000, step as u64]);
        let mut graph = Graph::new();
        let bind = Bindings::bind(&mut graph, params);
        let mut nll_rows = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let ex = &train_data[batch_rng.below(train_data.len())];
            let input = pack_example(ex, vocab, cfg.seq_len)?;
            let logits = finetune_classify(&mut graph, &bind, &config, &input, None)?;
            let n_classes = graph.value(logits).numel();
            let as_row = graph.reshape(logits, &[1, n_classes]).map_err(ModelError::from)?;
            let logp = graph.log_softmax(as_row).map_err(ModelError::from)?;
            let picked = graph.pick(logp, &[ex.label]).map_err(ModelError::from)?;
            nll_rows.push(picked);
        }
        let all = graph.concat(&nll_rows, 0).map_err(ModelError::from)?;
        let mean = graph.mean_all(all);
        let loss = graph.scale(mean, -1.0);
        final_loss = graph.value(loss).item();
        if !final_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        graph.backward(loss).map_err(ModelError::from)?;
        let mut grads = bind.grads(&graph);
        clip_global_norm(&mut grads, cfg.clip_norm);
        optimizer_step(params, &grads, &mut opt, lr, cfg.layerwise_alpha)?;
    }
    let eval_accuracy = classify_accuracy(params, vocab, eval_data, cfg.seq_len)?;
    Ok(FinetuneSummary { eval_accuracy, final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_peak() {
        assert_eq!(lr_schedule(0, 4e-4, 40_000, 500_000), 0.0);
        assert_eq!(lr_schedule(40_000, 4e-4, 40_000, 500_000), 4e-4);
        assert_eq!(lr_schedule(500_000, 4e-4, 40_000, 500_000), 0.0);
        // piecewise linear and continuous at the junction
        let before = lr_schedule(39_999, 4e-4, 40_000, 500_000);
        let after = lr_schedule(40_001, 4e-4, 40_000, 500_000);
        assert!(before < 4e-4 && after < 4e-4);
        let max = (0..=500_000)
            .step_by(1000)
            .map(|s| lr_schedule(s, 4e-4, 40_000, 500_000))
            .fold(0.0, f64::max);
        assert!(max <= 4e-4 + 1e-18);
    }

    #[test]
    fn layerwise_decay_formula() {
        assert_eq!(layerwise_lr(1e-3, 5, 24, 1.0), 1e-3);
        assert_eq!(layerwise_lr(2e-5, 24, 24, 0.75), 2e-5);
        assert!((layerwise_lr(2e-5, 23, 24, 0.75) - 0.75 * 2e-5).abs() < 1e-18);
    }

    fn tiny_params() -> ModelParams {
        let config = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            ffn_dim: 16,
            vocab_size: 10,
            mem_len: 0,
            k: 1.0,
            dropout: 0.0,
            attn_dropout: 0.0,
            seq_len: 4,
        };
        let mut rng = Rng::new(11);
        ModelParams::init(config, &mut rng).unwrap()
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let mut params = tiny_params();
        let before = params.named();
        let mut opt = OptimState::new(0.9, 0.999, 1e-6, 0.0);
        let grads = BTreeMap::new();
        optimizer_step(&mut params, &grads, &mut opt, 1e-3, 1.0).unwrap();
        for (name, t) in params.named() {
            assert_eq!(t.data(), before[&name].data(), "{name} changed");
        }
    }

    #[test]
    fn decay_shrinks_parameters_with_zero_gradients() {
        let mut params = tiny_params();
        let norm = |p: &ModelParams| -> f64 {
            let mut s = 0.0;
            p.visit(|_, t| s += t.data().iter().map(|x| x * x).sum::<f64>());
            s.sqrt()
        };
        let before = norm(&params);
        let mut opt = OptimState::new(0.9, 0.999, 1e-6, 0.1);
        optimizer_step(&mut params, &BTreeMap::new(), &mut opt, 1e-2, 1.0).unwrap();
        assert!(norm(&params) < before);
    }

    #[test]
    fn descent_on_a_quadratic() {
        // one step on f(x) = x^2 from x = 1 must decrease x
        let mut params = tiny_params();
        let mut x0 = f64::NAN;
        params.visit_mut(|name, t| {
            if name == "g_init" {
                t.data_mut()[0] = 1.0;
                x0 = 1.0;
            }
        });
        let mut grads = BTreeMap::new();
        grads.insert("g_init".to_string(), {
            let mut g = vec![0.0; 8];
            g[0] = 2.0; // d/dx x^2 at 1
            g
        });
        let mut opt = OptimState::new(0.9, 0.999, 1e-6, 0.0);
        optimizer_step(&mut params, &grads, &mut opt, 1e-2, 1.0).unwrap();
        params.visit(|name, t| {
            if name == "g_init" {
                assert!(t.data()[0] < x0);
            }
        });
    }

    #[test]
    fn optimizer_is_deterministic() {
        let run = || {
            let mut params = tiny_params();
            let mut opt = OptimState::new(0.9, 0.999, 1e-6, 0.01);
            let mut grads = BTreeMap::new();
            grads.insert("emb".to_string(), vec![0.3; 80]);
            for _ in 0..5 {
                optimizer_step(&mut params, &grads, &mut opt, 1e-3, 1.0).unwrap();
            }
            params.named()
        };
        let a = run();
        let b = run();
        for (name, t) in &a {
            assert_eq!(t.data(), b[name].data(), "{name} diverged");
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut params = tiny_params();
        let mut grads = BTreeMap::new();
        grads.insert("g_init".to_string(), vec![f64::NAN; 8]);
        let mut opt = OptimState::new(0.9, 0.999, 1e-6, 0.0);
        match optimizer_step(&mut params, &grads, &mut opt, 1e-3, 1.0) {
            Err(TrainError::NonFiniteGrad { name }) => assert_eq!(name, "g_init"),
            other => panic!("expected NonFiniteGrad, got {other:?}"),
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = TrainConfig::parse("d_model = 64\nbogus_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
        assert!(TrainConfig::parse("# comment\n\nd_model = 64").is_ok());
    }

    #[test]
    fn default_corruption_rate_is_fifteen_percent() {
        assert_eq!(TrainConfig::default().mask_rate, 0.15);
        assert_eq!(TrainConfig::default().k, 6.0);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), vec![3.0, 4.0]); // norm 5
        let pre = clip_global_norm(&mut grads, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let post: f64 = grads["a"].iter().map(|x| x * x).sum::<f64>();
        assert!((post.sqrt() - 1.0).abs() < 1e-12);
    }
}
