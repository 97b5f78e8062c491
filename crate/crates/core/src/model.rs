//! Model assembly: embeddings, stacked two-stream layers, segment memory,
//! the three pretraining objectives, and the classification head used after
//! dropping the query stream.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::attention::{
    bind_layer, build_layer_context, project_rel_table, relative_position_table, two_stream_layer,
    AttnError, Dropout, LayerNodes, LayerParams, LayerShape,
};
use crate::corpus::{CLS_ID, RESERVED_TOKENS};
use crate::graph::{Graph, NodeId};
use crate::mask::{
    build_attention_masks, full_content_mask, AttentionMaskPair, MaskError, Permutation,
    TargetSelection,
};
use crate::rng::Rng;
use crate::tensor::{BoolMat, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attn(#[from] AttnError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { id: usize, vocab: usize },
    #[error("target set is empty")]
    EmptyTargets,
    #[error("memory shape mismatch: {0}")]
    MemoryShape(String),
    #[error("classification input must start with CLS")]
    MissingClsToken,
    #[error("no classification head present in parameters")]
    MissingHead,
    #[error("mask rate {0} outside (0, 1)")]
    MaskRate(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub mem_len: usize,
    /// Partial-prediction constant: about 1/K of tokens become targets.
    pub k: f64,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub seq_len: usize,
}

impl ModelConfig {
    /// Desk-scale defaults; vocabulary size comes from the corpus.
    pub fn desk_default(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 128,
            n_heads: 4,
            head_dim: 32,
            ffn_dim: 512,
            vocab_size,
            mem_len: 64,
            k: 6.0,
            dropout: 0.1,
            attn_dropout: 0.1,
            seq_len: 64,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_heads * self.head_dim != self.d_model {
            return Err(ModelError::Config(format!(
                "n_heads {} x head_dim {} != d_model {}",
                self.n_heads, self.head_dim, self.d_model
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(ModelError::Config("d_model must be even for sinusoids".into()));
        }
        if self.n_layers == 0 || self.seq_len == 0 || self.ffn_dim == 0 {
            return Err(ModelError::Config("layers, seq_len and ffn_dim must be positive".into()));
        }
        if self.k < 1.0 {
            return Err(ModelError::Config(format!("K must be >= 1 (got {})", self.k)));
        }
        if self.vocab_size <= RESERVED_TOKENS.len() {
            return Err(ModelError::Config("vocabulary holds only reserved ids".into()));
        }
        Ok(())
    }

    pub fn layer_shape(&self) -> LayerShape {
        LayerShape {
            d_model: self.d_model,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            ffn_dim: self.ffn_dim,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClsHead {
    pub w: Tensor,
    pub b: Tensor,
}

/// All learnable tensors. The embedding table is shared between input
/// lookup and the output softmax (its gradient accumulates both roles).
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: Tensor,
    /// Initial query-stream vector, broadcast to every target position.
    pub g_init: Tensor,
    pub layers: Vec<LayerParams>,
    pub cls_head: Option<ClsHead>,
}

impl ModelParams {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let shape = config.layer_shape();
        let embedding =
            Tensor::trunc_normal(&[config.vocab_size, config.d_model], crate::attention::INIT_STD, rng);
        let g_init = Tensor::trunc_normal(&[config.d_model], crate::attention::INIT_STD, rng);
        let layers = (0..config.n_layers).map(|_| LayerParams::init(&shape, rng)).collect();
        Ok(ModelParams { config, embedding, g_init, layers, cls_head: None })
    }

    pub fn add_cls_head(&mut self, n_classes: usize, rng: &mut Rng) {
        self.cls_head = Some(ClsHead {
            w: Tensor::trunc_normal(&[self.config.d_model, n_classes], crate::attention::INIT_STD, rng),
            b: Tensor::zeros(&[n_classes]),
        });
    }

    pub fn visit(&self, mut f: impl FnMut(String, &Tensor)) {
        f("emb".into(), &self.embedding);
        f("g_init".into(), &self.g_init);
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.fields() {
                f(format!("layer{i}.{name}"), t);
            }
        }
        if let Some(head) = &self.cls_head {
            f("cls.w".into(), &head.w);
            f("cls.b".into(), &head.b);
        }
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        f("emb".into(), &mut self.embedding);
        f("g_init".into(), &mut self.g_init);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.fields_mut() {
                f(format!("layer{i}.{name}"), t);
            }
        }
        if let Some(head) = &mut self.cls_head {
            f("cls.w".into(), &mut head.w);
            f("cls.b".into(), &mut head.b);
        }
    }

    /// Named tensors in deterministic order.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit(|name, t| {
            out.insert(name, t.clone());
        });
        out
    }
}

/// Graph bindings of all parameters for one forward/backward pass.
pub struct Bindings {
    pub emb: NodeId,
    pub g_init: NodeId,
    pub layers: Vec<LayerNodes>,
    pub cls: Option<(NodeId, NodeId)>,
    named: Vec<(String, NodeId)>,
}

impl Bindings {
    pub fn bind(graph: &mut Graph, params: &ModelParams) -> Self {
        let mut named = Vec::new();
        let emb = graph.leaf(params.embedding.clone(), true);
        named.push(("emb".to_string(), emb));
        let g_init = graph.leaf(params.g_init.clone(), true);
        named.push(("g_init".to_string(), g_init));
        let mut layers = Vec::with_capacity(params.layers.len());
        for (i, layer) in params.layers.iter().enumerate() {
            let nodes = bind_layer(graph, layer);
            for (name, id) in [
                ("wq", nodes.w_q),
                ("wk", nodes.w_k),
                ("wv", nodes.w_v),
                ("wo", nodes.w_o),
                ("wr", nodes.w_r),
                ("u", nodes.u),
                ("v", nodes.v),
                ("s_plus", nodes.s_plus),
                ("s_minus", nodes.s_minus),
                ("seg_b", nodes.seg_b),
                ("ffn_w1", nodes.ffn_w1),
                ("ffn_b1", nodes.ffn_b1),
                ("ffn_w2", nodes.ffn_w2),
                ("ffn_b2", nodes.ffn_b2),
                ("ln1_g", nodes.ln1_g),
                ("ln1_b", nodes.ln1_b),
                ("ln2_g", nodes.ln2_g),
                ("ln2_b", nodes.ln2_b),
            ] {
                named.push((format!("layer{i}.{name}"), id));
            }
            layers.push(nodes);
        }
        let cls = params.cls_head.as_ref().map(|head| {
            let w = graph.leaf(head.w.clone(), true);
            let b = graph.leaf(head.b.clone(), true);
            named.push(("cls.w".to_string(), w));
            named.push(("cls.b".to_string(), b));
            (w, b)
        });
        Bindings { emb, g_init, layers, cls, named }
    }

    /// Gradients by parameter name after a backward pass (zero if unreached).
    pub fn grads(&self, graph: &Graph) -> BTreeMap<String, Vec<f64>> {
        self.named
            .iter()
            .map(|(name, id)| {
                let g = graph
                    .grad(*id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; graph.value(*id).numel()]);
                (name.clone(), g)
            })
            .collect()
    }

    pub fn node_of(&self, name: &str) -> Option<NodeId> {
        self.named.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }
}

/// Cached content representations from the previous segment, one tensor per
/// layer input level, detached from any graph.
#[derive(Clone, Debug)]
pub struct LayerMemory {
    pub levels: Vec<Tensor>,
    pub positions: Vec<usize>,
    pub seg_ids: Vec<u32>,
    pub doc_id: u64,
}

impl LayerMemory {
    pub fn empty(n_layers: usize, doc_id: u64) -> Self {
        LayerMemory {
            levels: (0..n_layers).map(|_| Tensor::zeros(&[0, 0])).collect(),
            positions: Vec::new(),
            seg_ids: Vec::new(),
            doc_id,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if self.is_empty() {
            return Ok(());
        }
        if self.levels.len() != config.n_layers {
            return Err(ModelError::MemoryShape(format!(
                "memory has {} levels, model has {} layers",
                self.levels.len(),
                config.n_layers
            )));
        }
        for (i, level) in self.levels.iter().enumerate() {
            if level.shape() != [self.len(), config.d_model] {
                return Err(ModelError::MemoryShape(format!(
                    "level {i} shape {:?}, expected [{}, {}]",
                    level.shape(),
                    self.len(),
                    config.d_model
                )));
            }
        }
        Ok(())
    }
}

/// One segment of input tokens with original positions and segment ids.
#[derive(Clone, Debug)]
pub struct SegmentInput {
    pub tokens: Vec<usize>,
    pub seg_ids: Vec<u32>,
    pub positions: Vec<usize>,
    /// Number of non-padding tokens (everything below stays real).
    pub n_real: usize,
    pub doc_id: u64,
}

impl SegmentInput {
    pub fn plain(tokens: Vec<usize>, start_pos: usize, doc_id: u64) -> Self {
        let n = tokens.len();
        SegmentInput {
            tokens,
            seg_ids: vec![0; n],
            positions: (start_pos..start_pos + n).collect(),
            n_real: n,
            doc_id,
        }
    }
}

pub struct ContentForward {
    /// Per-level content states: levels[0] is the embedding output,
    /// levels[n_layers] the final hidden state. All [T, d].
    pub levels: Vec<NodeId>,
    pub new_memory: LayerMemory,
    pub attn_probs: Vec<NodeId>,
}

pub struct TwoStreamForward {
    pub h_levels: Vec<NodeId>,
    /// Per-level query states at target rows, g_levels[0] = broadcast init.
    pub g_levels: Vec<NodeId>,
    /// Sorted 0-based positions carrying a query stream.
    pub target_idx: Vec<usize>,
    pub new_memory: LayerMemory,
    pub h_probs: Vec<NodeId>,
    pub g_probs: Vec<NodeId>,
}

fn check_tokens(tokens: &[usize], vocab: usize) -> Result<(), ModelError> {
    for &t in tokens {
        if t >= vocab {
            return Err(ModelError::TokenOutOfVocab { id: t, vocab });
        }
    }
    Ok(())
}

/// Memory effective for this segment: reset when the document changes.
fn effective_memory<'a>(memory: &'a LayerMemory, input: &SegmentInput) -> Option<&'a LayerMemory> {
    if memory.doc_id == input.doc_id && !memory.is_empty() {
        Some(memory)
    } else {
        None
    }
}

fn roll_memory(
    old: Option<&LayerMemory>,
    level_values: Vec<Tensor>,
    input: &SegmentInput,
    config: &ModelConfig,
) -> LayerMemory {
    let d = config.d_model;
    let keep = config.mem_len;
    if keep == 0 {
        return LayerMemory::empty(config.n_layers, input.doc_id);
    }
    let t = input.tokens.len();
    let old_len = old.map(|m| m.len()).unwrap_or(0);
    let total = old_len + t;
    let take = keep.min(total);
    let skip = total - take;
    let mut positions: Vec<usize> = old.map(|m| m.positions.clone()).unwrap_or_default();
    positions.extend(&input.positions);
    let mut seg_ids: Vec<u32> = old.map(|m| m.seg_ids.clone()).unwrap_or_default();
    seg_ids.extend(&input.seg_ids);
    let levels = level_values
        .into_iter()
        .enumerate()
        .map(|(li, new)| {
            let mut data = Vec::with_capacity(take * d);
            for col in skip..total {
                if col < old_len {
                    data.extend_from_slice(old.unwrap().levels[li].row(col));
                } else {
                    data.extend_from_slice(new.row(col - old_len));
                }
            }
            Tensor::new(vec![take, d], data).expect("memory shape")
        })
        .collect();
    LayerMemory {
        levels,
        positions: positions[skip..].to_vec(),
        seg_ids: seg_ids[skip..].to_vec(),
        doc_id: input.doc_id,
    }
}

/// Content-stream-only forward pass under an arbitrary visibility mask.
pub fn forward_content(
    graph: &mut Graph,
    bind: &Bindings,
    config: &ModelConfig,
    input: &SegmentInput,
    memory: &LayerMemory,
    content_mask: &BoolMat,
    mut dropout: Option<&mut Dropout>,
) -> Result<ContentForward, ModelError> {
    check_tokens(&input.tokens, config.vocab_size)?;
    memory.validate(config)?;
    let mem = effective_memory(memory, input);
    let m = mem.map(|mm| mm.len()).unwrap_or(0);
    let t = input.tokens.len();
    if content_mask.rows() != t || content_mask.cols() != m + t {
        return Err(ModelError::MemoryShape(format!(
            "content mask {}x{} vs sequence {t} with memory {m}",
            content_mask.rows(),
            content_mask.cols()
        )));
    }
    let rel = relative_position_table(t, m, config.d_model);
    let ctx = build_layer_context(
        graph,
        content_mask.clone(),
        None,
        Vec::new(),
        &input.positions,
        mem.map(|mm| mm.positions.as_slice()).unwrap_or(&[]),
        &input.seg_ids,
        mem.map(|mm| mm.seg_ids.as_slice()).unwrap_or(&[]),
        &rel,
    )?;
    let shape = config.layer_shape();
    let h0 = {
        let looked = graph.embedding(bind.emb, &input.tokens)?;
        graph.scale(looked, (config.d_model as f64).sqrt())
    };
    let mut levels = vec![h0];
    let mut attn_probs = Vec::with_capacity(config.n_layers);
    for (li, layer) in bind.layers.iter().enumerate() {
        let mem_node = mem.map(|mm| graph.constant(mm.levels[li].clone()));
        let r_proj_t = project_rel_table(graph, ctx.rel_node, layer, &shape)?;
        let out = two_stream_layer(
            graph,
            layer,
            &shape,
            &ctx,
            *levels.last().unwrap(),
            None,
            mem_node,
            r_proj_t,
            dropout.as_deref_mut(),
        )?;
        levels.push(out.h_next);
        attn_probs.push(out.h_probs);
    }
    let level_values: Vec<Tensor> =
        levels[..config.n_layers].iter().map(|&id| graph.value(id).clone()).collect();
    let new_memory = roll_memory(mem, level_values, input, config);
    Ok(ContentForward { levels, new_memory, attn_probs })
}

/// Joint two-stream forward: content everywhere, query states only at
/// target rows (initialized from the trainable vector).
#[allow(clippy::too_many_arguments)]
pub fn forward_two_stream(
    graph: &mut Graph,
    bind: &Bindings,
    config: &ModelConfig,
    input: &SegmentInput,
    memory: &LayerMemory,
    masks: &AttentionMaskPair,
    target_idx: Vec<usize>,
    mut dropout: Option<&mut Dropout>,
) -> Result<TwoStreamForward, ModelError> {
    if target_idx.is_empty() {
        return Err(ModelError::EmptyTargets);
    }
    check_tokens(&input.tokens, config.vocab_size)?;
    memory.validate(config)?;
    let mem = effective_memory(memory, input);
    let m = mem.map(|mm| mm.len()).unwrap_or(0);
    let t = input.tokens.len();
    if masks.seq_len() != t || masks.mem_len != m {
        return Err(ModelError::MemoryShape(format!(
            "mask {}x{} (mem {}) vs sequence {t} with memory {m}",
            masks.content.rows(),
            masks.content.cols(),
            masks.mem_len
        )));
    }
    let rel = relative_position_table(t, m, config.d_model);
    let ctx = build_layer_context(
        graph,
        masks.content.clone(),
        Some(&masks.query),
        target_idx,
        &input.positions,
        mem.map(|mm| mm.positions.as_slice()).unwrap_or(&[]),
        &input.seg_ids,
        mem.map(|mm| mm.seg_ids.as_slice()).unwrap_or(&[]),
        &rel,
    )?;
    let shape = config.layer_shape();
    let p = ctx.target_idx.len();

    let h0 = {
        let looked = graph.embedding(bind.emb, &input.tokens)?;
        graph.scale(looked, (config.d_model as f64).sqrt())
    };
    let g_row = graph.reshape(bind.g_init, &[1, config.d_model])?;
    let zeros = graph.constant(Tensor::zeros(&[p, config.d_model]));
    let g0 = graph.add(zeros, g_row)?;

    let mut h_levels = vec![h0];
    let mut g_levels = vec![g0];
    let mut h_probs = Vec::new();
    let mut g_probs = Vec::new();
    for (li, layer) in bind.layers.iter().enumerate() {
        let mem_node = mem.map(|mm| graph.constant(mm.levels[li].clone()));
        let r_proj_t = project_rel_table(graph, ctx.rel_node, layer, &shape)?;
        let out = two_stream_layer(
            graph,
            layer,
            &shape,
            &ctx,
            *h_levels.last().unwrap(),
            Some(*g_levels.last().unwrap()),
            mem_node,
            r_proj_t,
            dropout.as_deref_mut(),
        )?;
        h_levels.push(out.h_next);
        g_levels.push(out.g_next.expect("query stream requested"));
        h_probs.push(out.h_probs);
        g_probs.push(out.g_probs.expect("query probs requested"));
    }
    let level_values: Vec<Tensor> =
        h_levels[..config.n_layers].iter().map(|&id| graph.value(id).clone()).collect();
    let new_memory = roll_memory(mem, level_values, input, config);
    let target_idx = ctx.target_idx.clone();
    Ok(TwoStreamForward { h_levels, g_levels, target_idx, new_memory, h_probs, g_probs })
}

/// Query-stream forward per the two-stream update; returns the last-layer
/// query states at target rows along with everything computed jointly.
#[allow(clippy::too_many_arguments)]
pub fn forward_query(
    graph: &mut Graph,
    bind: &Bindings,
    config: &ModelConfig,
    input: &SegmentInput,
    memory: &LayerMemory,
    masks: &AttentionMaskPair,
    targets: &TargetSelection,
    dropout: Option<&mut Dropout>,
) -> Result<(NodeId, TwoStreamForward), ModelError> {
    let target_idx = targets.target_positions0();
    let fwd = forward_two_stream(graph, bind, config, input, memory, masks, target_idx, dropout)?;
    Ok((*fwd.g_levels.last().unwrap(), fwd))
}

/// Log-probability of each true target id under the tied-embedding softmax.
pub fn target_log_probs(
    graph: &mut Graph,
    emb: NodeId,
    g_last: NodeId,
    target_ids: &[usize],
) -> Result<NodeId, ModelError> {
    let vocab = graph.value(emb).shape()[0];
    for &id in target_ids {
        if id >= vocab {
            return Err(ModelError::TokenOutOfVocab { id, vocab });
        }
    }
    let emb_t = graph.transpose(emb)?;
    let logits = graph.matmul(g_last, emb_t)?;
    let logp = graph.log_softmax(logits)?;
    Ok(graph.pick(logp, target_ids)?)
}

/// One batch row for the permutation objective.
pub struct PlmRow<'a> {
    pub input: &'a SegmentInput,
    pub memory: &'a LayerMemory,
    pub perm: Permutation,
    pub targets: TargetSelection,
}

pub struct PlmOut {
    /// Mean negative log-probability over all targets in the batch.
    pub loss: NodeId,
    pub n_targets: usize,
    pub rows: Vec<TwoStreamForward>,
}

/// Permutation language modeling loss: one sampled factorization order per
/// row, predicting the order's tail conditioned on its head.
pub fn plm_loss(
    graph: &mut Graph,
    bind: &Bindings,
    config: &ModelConfig,
    rows: &[PlmRow],
    mut dropout: Option<&mut Dropout>,
) -> Result<PlmOut, ModelError> {
    let mut nll_parts = Vec::new();
    let mut fwds = Vec::new();
    let mut n_targets = 0;
    for row in rows {
        let mem = effective_memory(row.memory, row.input);
        let m = mem.map(|mm| mm.len()).unwrap_or(0);
        let masks = build_attention_masks(&row.perm, &row.targets, m)?;
        let (g_last, fwd) = forward_query(
            graph,
            bind,
            config,
            row.input,
            row.memory,
            &masks,
            &row.targets,
            dropout.as_deref_mut(),
        )?;
        let ids: Vec<usize> = fwd.target_idx.iter().map(|&i| row.input.tokens[i]).collect();
        let logp = target_log_probs(graph, bind.emb, g_last, &ids)?;
        n_targets += ids.len();
        nll_parts.push(logp);
        fwds.push(fwd);
    }
    if n_targets == 0 {
        return Err(ModelError::EmptyTargets);
    }
    let all = graph.concat(&nll_parts, 0)?;
    let mean = graph.mean_all(all);
    let loss = graph.scale(mean, -1.0);
    Ok(PlmOut { loss, n_targets, rows: fwds })
}

/// One batch row carrying only tokens and a memory handle.
pub struct ContentRow<'a> {
    pub input: &'a SegmentInput,
    pub memory: &'a LayerMemory,
}

pub struct DaeOut {
    /// Summed negative log-probability over masked positions (the objective
    /// treats masked tokens as independently reconstructed).
    pub loss_sum: NodeId,
    pub n_masked: usize,
    /// Rows whose corruption draw selected nothing contribute no loss.
    pub rows_without_targets: usize,
    pub rows: Vec<ContentForward>,
}

/// Denoising objective: corrupt ~mask_rate of real tokens with MASK, run the
/// bidirectional content-only encoder, reconstruct originals at masked spots.
pub fn dae_loss(
    graph: &mut Graph,
    bind: &Bindings,
    config: &ModelConfig,
    rows: &[ContentRow],
    mask_rate: f64,
    rng: &mut Rng,
    mut dropout: Option<&mut Dropout>,
) -> Result<DaeOut, ModelError> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(ModelError::MaskRate(mask_rate));
    }
    let mut nll_parts = Vec::new();
    let mut fwds = Vec::new();
    let mut n_masked = 0;
    let mut rows_without_targets = 0;
    for row in rows {
        let mut corrupted = row.input.tokens.clone();
        let mut masked_idx = Vec::new();
        for i in 0..row.input.n_real {
            if corrupted[i] >= RESERVED_TOKENS.len() && rng.bernoulli(mask_rate) {
                masked_idx.push(i);
                corrupted[i] = crate::corpus::MASK_ID;
            }
        }
        let corrupted_input = SegmentInput { tokens: corrupted, ..row.input.clone() };
        let mem = effective_memory(row.memory, &corrupted_input);
        let m = mem.map(|mm| mm.len()).unwrap_or(0);
        let mask = full_content_mask(corrupted_input.tokens.len(), m);
        let fwd = forward_content(
            graph,
            bind,
            config,
            &corrupted_input,
            row.memory,
            &mask,
            dropout.as_deref_mut(),
        )?;
        if masked_idx.is_empty() {
            rows_without_targets += 1;
            fwds.push(fwd);
            continue;
        }
        let h_last = *fwd.levels.last().unwrap();
        let gathered = graph.embedding(h_last, &masked_idx)?;
        let ids: Vec<usize> = masked_idx.iter().map(|&i| row.input.tokens[i]).collect();
        let logp = target_log_probs(graph, bind.emb, gathered, &ids)?;
        n_masked += ids.len();
        nll_parts.push(logp);
        fwds.push(fwd);
    }
    let loss_sum = if nll_parts.is_empty() {
        graph.constant(Tensor::scalar(0.0))
    } else {
        let all = graph.concat(&nll_parts, 0)?;
        let total = graph.sum_all(all);
        graph.scale(total, -1.0)
    };
    Ok(DaeOut { loss_sum, n_masked, rows_without_targets, rows: fwds })
}

pub struct ArOut {
    /// Mean negative log-probability per predicted token.
    pub loss: NodeId,
    pub n_targets: usize,
    pub rows: Vec<TwoStreamForward>,
}

/// Forward autoregressive objective: hand-built causal masks (not routed
/// through a factorization order), every real position predicted.
pub fn ar_loss(
    graph: &mut Graph,
    bind: &Bindings,
    config: &ModelConfig,
    rows: &[ContentRow],
    mut dropout: Option<&mut Dropout>,
) -> Result<ArOut, ModelError> {
    let mut nll_parts = Vec::new();
    let mut fwds = Vec::new();
    let mut n_targets = 0;
    for row in rows {
        if row.input.n_real == 0 {
            continue;
        }
        let mem = effective_memory(row.memory, row.input);
        let m = mem.map(|mm| mm.len()).unwrap_or(0);
        let masks = AttentionMaskPair::causal(row.input.tokens.len(), m)?;
        let target_idx: Vec<usize> = (0..row.input.n_real).collect();
        let fwd = forward_two_stream(
            graph,
            bind,
            config,
            row.input,
            row.memory,
            &masks,
            target_idx,
            dropout.as_deref_mut(),
        )?;
        let g_last = *fwd.g_levels.last().unwrap();
        let ids: Vec<usize> = fwd.target_idx.iter().map(|&i| row.input.tokens[i]).collect();
        let logp = target_log_probs(graph, bind.emb, g_last, &ids)?;
        n_targets += ids.len();
        nll_parts.push(logp);
        fwds.push(fwd);
    }
    if n_targets == 0 {
        return Err(ModelError::EmptyTargets);
    }
    let all = graph.concat(&nll_parts, 0)?;
    let mean = graph.mean_all(all);
    let loss = graph.scale(mean, -1.0);
    Ok(ArOut { loss, n_targets, rows: fwds })
}

/// The deliberately wrong position-blind head: predict from the content state
/// of the last context position instead of a target-aware query state. Any
/// two target positions sharing a factorization prefix receive the same
/// distribution, which is exactly the failure this mode exposes; the
/// `target_position` argument cannot influence the result.
pub fn naive_parameterization_distribution(
    params: &ModelParams,
    tokens: &[usize],
    perm_prefix: &[usize],
    _target_position: usize,
) -> Result<Vec<f64>, ModelError> {
    let config = &params.config;
    check_tokens(tokens, config.vocab_size)?;
    let t = tokens.len();
    let mut graph = Graph::new();
    let bind = Bindings::bind(&mut graph, params);
    if perm_prefix.is_empty() {
        // no context at all: the position-blind head has nothing to condition
        // on, so the distribution is the softmax of zero logits
        return Ok(vec![1.0 / config.vocab_size as f64; config.vocab_size]);
    }
    let mut order = perm_prefix.to_vec();
    for p in 1..=t {
        if !order.contains(&p) {
            order.push(p);
        }
    }
    let perm = Permutation::from_order(order)?;
    // content mask only; the tail ordering cannot influence prefix rows
    let masks =
        build_attention_masks(&perm, &TargetSelection { cut: t, targets: vec![] }, 0)?;
    let input = SegmentInput::plain(tokens.to_vec(), 0, 0);
    let empty_mem = LayerMemory::empty(config.n_layers, 0);
    let fwd =
        forward_content(&mut graph, &bind, config, &input, &empty_mem, &masks.content, None)?;
    let h_last = *fwd.levels.last().unwrap();
    let anchor = perm_prefix[perm_prefix.len() - 1] - 1;
    let h_anchor = graph.embedding(h_last, &[anchor])?;
    let emb_t = graph.transpose(bind.emb)?;
    let logits = graph.matmul(h_anchor, emb_t)?;
    let probs = graph.softmax(logits)?;
    Ok(graph.value(probs).data().to_vec())
}

/// Target-aware distribution for one position given a factorization prefix,
/// through the query stream (the correct head).
pub fn target_aware_distribution(
    params: &ModelParams,
    tokens: &[usize],
    perm_prefix: &[usize],
    target_position: usize,
) -> Result<Vec<f64>, ModelError> {
    let config = &params.config;
    check_tokens(tokens, config.vocab_size)?;
    let t = tokens.len();
    let mut order = perm_prefix.to_vec();
    order.push(target_position);
    for p in 1..=t {
        if !order.contains(&p) {
            order.push(p);
        }
    }
    let perm = Permutation::from_order(order)?;
    let cut = perm_prefix.len();
    let targets = TargetSelection { cut, targets: perm.order()[cut..].to_vec() };
    let masks = build_attention_masks(&perm, &targets, 0)?;
    let mut graph = Graph::new();
    let bind = Bindings::bind(&mut graph, params);
    let input = SegmentInput::plain(tokens.to_vec(), 0, 0);
    let empty_mem = LayerMemory::empty(config.n_layers, 0);
    let (g_last, fwd) =
        forward_query(&mut graph, &bind, config, &input, &empty_mem, &masks, &targets, None)?;
    let row = fwd
        .target_idx
        .iter()
        .position(|&i| i == target_position - 1)
        .expect("target present in selection");
    let g_row = graph.embedding(g_last, &[row])?;
    let emb_t = graph.transpose(bind.emb)?;
    let logits = graph.matmul(g_row, emb_t)?;
    let probs = graph.softmax(logits)?;
    Ok(graph.value(probs).data().to_vec())
}

/// Classification forward: content stream only with full bidirectional
/// visibility, logits from the CLS position. The query stream and its
/// initial vector are dropped entirely.
pub fn finetune_classify(
    graph: &mut Graph,
    bind: &Bindings,
    config: &ModelConfig,
    input: &SegmentInput,
    dropout: Option<&mut Dropout>,
) -> Result<NodeId, ModelError> {
    let (w, b) = bind.cls.ok_or(ModelError::MissingHead)?;
    if input.tokens.first() != Some(&CLS_ID) {
        return Err(ModelError::MissingClsToken);
    }
    let mask = full_content_mask(input.tokens.len(), 0);
    let empty_mem = LayerMemory::empty(config.n_layers, input.doc_id);
    let fwd = forward_content(graph, bind, config, input, &empty_mem, &mask, dropout)?;
    let h_last = *fwd.levels.last().unwrap();
    let cls_row = graph.embedding(h_last, &[0])?;
    let logits = graph.matmul(cls_row, w)?;
    let shifted = graph.add(logits, b)?;
    let n_classes = graph.value(shifted).shape()[1];
    Ok(graph.reshape(shifted, &[n_classes])?)
}
