//! One two-stream self-attention layer with relative positional encoding,
//! relative segment encoding, and a position-wise feed-forward block.
//!
//! Attention scores follow the four-term relative-attention decomposition
//! (content-content with a global content bias, content-position with a
//! global position bias) plus a per-head segment addend (q + b) . s_ij,
//! where s_ij is s_plus when query and key lie in the same segment and
//! s_minus otherwise. Both streams share every parameter: the query stream
//! differs only in its queries (g instead of h) and its mask (a position
//! never sees its own content).

use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::mask::MaskError;
use crate::rng::Rng;
use crate::tensor::{BoolMat, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("relative distance {0} outside the encoding table")]
    RelDistance(i64),
    #[error("query row at position {0} is fully masked with memory present or rank > 0")]
    IllegalEmptyQueryRow(usize),
    #[error("attention input mismatch: {0}")]
    BadInput(String),
}

/// Head geometry of one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
}

impl LayerShape {
    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}

/// Learnable tensors of one layer.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    /// Projection applied to the relative-position encodings.
    pub w_r: Tensor,
    /// Global content bias, per head.
    pub u: Tensor,
    /// Global position bias, per head.
    pub v: Tensor,
    pub s_plus: Tensor,
    pub s_minus: Tensor,
    /// Segment attention bias b in (q + b) . s_ij, per head.
    pub seg_b: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
}

pub const INIT_STD: f64 = 0.02;

impl LayerParams {
    pub fn init(shape: &LayerShape, rng: &mut Rng) -> Self {
        let d = shape.d_model;
        let hb = [shape.n_heads, shape.head_dim];
        let p = Self {
            w_q: Tensor::trunc_normal(&[d, d], INIT_STD, rng),
            w_k: Tensor::trunc_normal(&[d, d], INIT_STD, rng),
            w_v: Tensor::trunc_normal(&[d, d], INIT_STD, rng),
            w_o: Tensor::trunc_normal(&[d, d], INIT_STD, rng),
            w_r: Tensor::trunc_normal(&[d, d], INIT_STD, rng),
            u: Tensor::trunc_normal(&hb, INIT_STD, rng),
            v: Tensor::trunc_normal(&hb, INIT_STD, rng),
            s_plus: Tensor::trunc_normal(&hb, INIT_STD, rng),
            s_minus: Tensor::trunc_normal(&hb, INIT_STD, rng),
            seg_b: Tensor::trunc_normal(&hb, INIT_STD, rng),
            ffn_w1: Tensor::trunc_normal(&[d, shape.ffn_dim], INIT_STD, rng),
            ffn_b1: Tensor::zeros(&[shape.ffn_dim]),
            ffn_w2: Tensor::trunc_normal(&[shape.ffn_dim, d], INIT_STD, rng),
            ffn_b2: Tensor::zeros(&[d]),
            ln1_g: Tensor::filled(&[d], 1.0),
            ln1_b: Tensor::zeros(&[d]),
            ln2_g: Tensor::filled(&[d], 1.0),
            ln2_b: Tensor::zeros(&[d]),
        };
        debug_assert!(p.s_plus != p.s_minus, "segment encodings must be distinct");
        p
    }

    pub fn visit(&self, mut f: impl FnMut(&'static str, &Tensor)) {
        for (name, t) in self.fields() {
            f(name, t);
        }
    }

    pub fn fields(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("wq", &self.w_q),
            ("wk", &self.w_k),
            ("wv", &self.w_v),
            ("wo", &self.w_o),
            ("wr", &self.w_r),
            ("u", &self.u),
            ("v", &self.v),
            ("s_plus", &self.s_plus),
            ("s_minus", &self.s_minus),
            ("seg_b", &self.seg_b),
            ("ffn_w1", &self.ffn_w1),
            ("ffn_b1", &self.ffn_b1),
            ("ffn_w2", &self.ffn_w2),
            ("ffn_b2", &self.ffn_b2),
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
        ]
    }

    pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("wq", &mut self.w_q),
            ("wk", &mut self.w_k),
            ("wv", &mut self.w_v),
            ("wo", &mut self.w_o),
            ("wr", &mut self.w_r),
            ("u", &mut self.u),
            ("v", &mut self.v),
            ("s_plus", &mut self.s_plus),
            ("s_minus", &mut self.s_minus),
            ("seg_b", &mut self.seg_b),
            ("ffn_w1", &mut self.ffn_w1),
            ("ffn_b1", &mut self.ffn_b1),
            ("ffn_w2", &mut self.ffn_w2),
            ("ffn_b2", &mut self.ffn_b2),
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
        ]
    }
}

/// Graph bindings of one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerNodes {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
    pub w_r: NodeId,
    pub u: NodeId,
    pub v: NodeId,
    pub s_plus: NodeId,
    pub s_minus: NodeId,
    pub seg_b: NodeId,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
}

pub fn bind_layer(graph: &mut Graph, p: &LayerParams) -> LayerNodes {
    LayerNodes {
        w_q: graph.leaf(p.w_q.clone(), true),
        w_k: graph.leaf(p.w_k.clone(), true),
        w_v: graph.leaf(p.w_v.clone(), true),
        w_o: graph.leaf(p.w_o.clone(), true),
        w_r: graph.leaf(p.w_r.clone(), true),
        u: graph.leaf(p.u.clone(), true),
        v: graph.leaf(p.v.clone(), true),
        s_plus: graph.leaf(p.s_plus.clone(), true),
        s_minus: graph.leaf(p.s_minus.clone(), true),
        seg_b: graph.leaf(p.seg_b.clone(), true),
        ffn_w1: graph.leaf(p.ffn_w1.clone(), true),
        ffn_b1: graph.leaf(p.ffn_b1.clone(), true),
        ffn_w2: graph.leaf(p.ffn_w2.clone(), true),
        ffn_b2: graph.leaf(p.ffn_b2.clone(), true),
        ln1_g: graph.leaf(p.ln1_g.clone(), true),
        ln1_b: graph.leaf(p.ln1_b.clone(), true),
        ln2_g: graph.leaf(p.ln2_g.clone(), true),
        ln2_b: graph.leaf(p.ln2_b.clone(), true),
    }
}

/// Sinusoidal encodings for relative distances, computed from original
/// sequence positions. Rows cover d in [-(T-1), M+T-1] in increasing order.
#[derive(Clone, Debug)]
pub struct RelPosTable {
    pub d_min: i64,
    pub table: Tensor,
}

pub fn relative_position_table(t: usize, mem_len: usize, d_model: usize) -> RelPosTable {
    assert!(t >= 1 && d_model.is_multiple_of(2));
    let d_min = -((t as i64) - 1);
    let d_max = (mem_len + t) as i64 - 1;
    let rows = (d_max - d_min + 1) as usize;
    let half = d_model / 2;
    let mut data = vec![0.0; rows * d_model];
    for r in 0..rows {
        let dist = (d_min + r as i64) as f64;
        for i in 0..half {
            let inv_freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[r * d_model + 2 * i] = (dist * inv_freq).sin();
            data[r * d_model + 2 * i + 1] = (dist * inv_freq).cos();
        }
    }
    RelPosTable { d_min, table: Tensor::new(vec![rows, d_model], data).expect("rel table shape") }
}

impl RelPosTable {
    pub fn rows(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn index_of(&self, distance: i64) -> Option<usize> {
        let idx = distance - self.d_min;
        if idx < 0 || idx as usize >= self.rows() {
            None
        } else {
            Some(idx as usize)
        }
    }

    pub fn row(&self, distance: i64) -> Option<&[f64]> {
        self.index_of(distance).map(|r| self.table.row(r))
    }
}

/// Same/different segment addend for a single query/key pair.
/// Reference route used by oracles; the layer computes the batched form.
pub fn segment_bias(
    seg_q: u32,
    seg_k: u32,
    s_plus: &[f64],
    s_minus: &[f64],
    b: &[f64],
    query: &[f64],
) -> f64 {
    let s = if seg_q == seg_k { s_plus } else { s_minus };
    query.iter().zip(b).zip(s).map(|((&q, &bv), &sv)| (q + bv) * sv).sum()
}

/// Per-segment precomputation shared by all layers of one forward pass.
pub struct LayerContext {
    pub content_mask: BoolMat,
    pub mem_len: usize,
    /// Local (0-based) indices of rows that carry a query stream.
    pub target_idx: Vec<usize>,
    pub rel_node: NodeId,
    content_rel_idx: Vec<u32>,
    query_rel_idx: Vec<u32>,
    same_content: NodeId,
    diff_content: NodeId,
    same_query: Option<NodeId>,
    diff_query: Option<NodeId>,
    query_mask_rows: BoolMat,
}

#[allow(clippy::too_many_arguments)]
pub fn build_layer_context(
    graph: &mut Graph,
    content_mask: BoolMat,
    query_mask: Option<&BoolMat>,
    target_idx: Vec<usize>,
    positions: &[usize],
    mem_positions: &[usize],
    seg_ids: &[u32],
    mem_seg_ids: &[u32],
    rel: &RelPosTable,
) -> Result<LayerContext, AttnError> {
    let t = content_mask.rows();
    let cols = content_mask.cols();
    if cols < t {
        return Err(AttnError::BadInput(format!("mask {t}x{cols} narrower than sequence")));
    }
    let m = cols - t;
    if positions.len() != t || seg_ids.len() != t {
        return Err(AttnError::BadInput(format!(
            "positions/segments length {} vs sequence length {t}",
            positions.len()
        )));
    }
    if mem_positions.len() != m || mem_seg_ids.len() != m {
        return Err(AttnError::BadInput(format!(
            "memory positions length {} vs mask memory {m}",
            mem_positions.len()
        )));
    }
    if let Some(&bad) = target_idx.iter().find(|&&i| i >= t) {
        return Err(AttnError::BadInput(format!("target index {bad} out of range")));
    }
    if !target_idx.is_empty() && query_mask.is_none() {
        return Err(AttnError::BadInput("targets given without a query mask".into()));
    }
    if let Some(qm) = query_mask {
        if qm.rows() != t || qm.cols() != cols {
            return Err(AttnError::BadInput(format!(
                "query mask {}x{} vs content mask {t}x{cols}",
                qm.rows(),
                qm.cols()
            )));
        }
        // A fully masked query row is only legal for the first token in the
        // factorization order with no memory; its attention output is zero
        // and the residual path carries the initial query vector forward.
        for &i in &target_idx {
            if qm.row_count_true(i) == 0 && !(m == 0 && content_mask.row_count_true(i) == 1) {
                return Err(AttnError::IllegalEmptyQueryRow(i + 1));
            }
        }
    }

    let key_pos: Vec<usize> = mem_positions.iter().chain(positions).copied().collect();
    let key_seg: Vec<u32> = mem_seg_ids.iter().chain(seg_ids).copied().collect();

    let rel_index = |qp: usize, kp: usize| -> Result<u32, AttnError> {
        let d = qp as i64 - kp as i64;
        rel.index_of(d).map(|i| i as u32).ok_or(AttnError::RelDistance(d))
    };

    let mut content_rel_idx = Vec::with_capacity(t * cols);
    let mut same_c = vec![0.0; t * cols];
    for i in 0..t {
        for (j, (&kp, &ks)) in key_pos.iter().zip(&key_seg).enumerate() {
            content_rel_idx.push(rel_index(positions[i], kp)?);
            same_c[i * cols + j] = if seg_ids[i] == ks { 1.0 } else { 0.0 };
        }
    }
    let diff_c: Vec<f64> = same_c.iter().map(|&x| 1.0 - x).collect();
    let same_content = graph.constant(Tensor::new(vec![1, t, cols], same_c)?);
    let diff_content = graph.constant(Tensor::new(vec![1, t, cols], diff_c)?);

    let p = target_idx.len();
    let mut query_rel_idx = Vec::with_capacity(p * cols);
    let mut same_q = vec![0.0; p * cols];
    for (r, &i) in target_idx.iter().enumerate() {
        for (j, (&kp, &ks)) in key_pos.iter().zip(&key_seg).enumerate() {
            query_rel_idx.push(rel_index(positions[i], kp)?);
            same_q[r * cols + j] = if seg_ids[i] == ks { 1.0 } else { 0.0 };
        }
    }
    let (same_query, diff_query) = if p > 0 {
        let diff_q: Vec<f64> = same_q.iter().map(|&x| 1.0 - x).collect();
        (
            Some(graph.constant(Tensor::new(vec![1, p, cols], same_q)?)),
            Some(graph.constant(Tensor::new(vec![1, p, cols], diff_q)?)),
        )
    } else {
        (None, None)
    };

    let rel_node = graph.constant(rel.table.clone());
    let query_mask_rows = match query_mask {
        Some(qm) => qm.select_rows(&target_idx),
        None => BoolMat::new(0, cols, false),
    };

    Ok(LayerContext {
        content_mask,
        mem_len: m,
        target_idx,
        rel_node,
        content_rel_idx,
        query_rel_idx,
        same_content,
        diff_content,
        same_query,
        diff_query,
        query_mask_rows,
    })
}

/// Project the relative-position table once per layer: [L, d] -> [H, hd, L].
pub fn project_rel_table(
    graph: &mut Graph,
    rel_node: NodeId,
    layer: &LayerNodes,
    shape: &LayerShape,
) -> Result<NodeId, TensorError> {
    let l = graph.value(rel_node).shape()[0];
    let proj = graph.matmul(rel_node, layer.w_r)?;
    let reshaped = graph.reshape(proj, &[l, shape.n_heads, shape.head_dim])?;
    graph.permute(reshaped, &[1, 2, 0])
}

/// Dropout state for one forward pass; disabled when rates are zero.
pub struct Dropout {
    pub rng: Rng,
    pub attn_p: f64,
    pub hidden_p: f64,
}

impl Dropout {
    fn apply(&mut self, graph: &mut Graph, x: NodeId, p: f64) -> Result<NodeId, TensorError> {
        if p <= 0.0 {
            return Ok(x);
        }
        let shape = graph.value(x).shape().to_vec();
        let keep = 1.0 / (1.0 - p);
        let numel: usize = shape.iter().product();
        let mask: Vec<f64> =
            (0..numel).map(|_| if self.rng.bernoulli(p) { 0.0 } else { keep }).collect();
        let m = graph.constant(Tensor::new(shape, mask)?);
        graph.mul(x, m)
    }
}

pub struct TwoStreamOut {
    pub h_next: NodeId,
    pub g_next: Option<NodeId>,
    /// Content-stream attention probabilities, [H, T, M+T].
    pub h_probs: NodeId,
    /// Query-stream attention probabilities, [H, P, M+T].
    pub g_probs: Option<NodeId>,
}

/// Apply one two-stream layer.
///
/// Keys and values are built from [memory, h_prev] for both streams and the
/// query stream never reads g of other positions, so computing g only at
/// target rows is exact.
#[allow(clippy::too_many_arguments)]
pub fn two_stream_layer(
    graph: &mut Graph,
    layer: &LayerNodes,
    shape: &LayerShape,
    ctx: &LayerContext,
    h_prev: NodeId,
    g_prev: Option<NodeId>,
    memory: Option<NodeId>,
    r_proj_t: NodeId,
    mut dropout: Option<&mut Dropout>,
) -> Result<TwoStreamOut, AttnError> {
    let t = ctx.content_mask.rows();
    let m = ctx.mem_len;
    let cols = m + t;
    let d = shape.d_model;
    let mem_rows = memory.map(|mn| graph.value(mn).shape()[0]).unwrap_or(0);
    if mem_rows != m {
        return Err(AttnError::BadInput(format!("memory rows {mem_rows} vs mask memory {m}")));
    }
    if graph.value(h_prev).shape() != [t, d] {
        return Err(AttnError::BadInput(format!(
            "content input shape {:?}, expected [{t}, {d}]",
            graph.value(h_prev).shape()
        )));
    }

    let kv_src = match memory {
        Some(mn) => graph.concat(&[mn, h_prev], 0)?,
        None => h_prev,
    };

    let heads = shape.n_heads;
    let hd = shape.head_dim;
    let to_heads = |graph: &mut Graph, x: NodeId, rows: usize| -> Result<NodeId, TensorError> {
        let r = graph.reshape(x, &[rows, heads, hd])?;
        graph.permute(r, &[1, 0, 2])
    };

    let k_flat = graph.matmul(kv_src, layer.w_k)?;
    let k = to_heads(graph, k_flat, cols)?; // [H, C, hd]
    let k_t = graph.permute(k, &[0, 2, 1])?; // [H, hd, C]
    let v_flat = graph.matmul(kv_src, layer.w_v)?;
    let v = to_heads(graph, v_flat, cols)?; // [H, C, hd]

    let u_b = graph.reshape(layer.u, &[heads, 1, hd])?;
    let v_b = graph.reshape(layer.v, &[heads, 1, hd])?;
    let b_b = graph.reshape(layer.seg_b, &[heads, 1, hd])?;
    let sp_b = graph.reshape(layer.s_plus, &[heads, 1, hd])?;
    let sm_b = graph.reshape(layer.s_minus, &[heads, 1, hd])?;

    let attend = |graph: &mut Graph,
                      x_q: NodeId,
                      rows: usize,
                      mask: &BoolMat,
                      rel_idx: &[u32],
                      same: NodeId,
                      diff: NodeId,
                      allow_empty: bool,
                      dropout: &mut Option<&mut Dropout>|
     -> Result<(NodeId, NodeId), AttnError> {
        let q_flat = graph.matmul(x_q, layer.w_q)?;
        let q = to_heads(graph, q_flat, rows)?; // [H, R, hd]

        let qu = graph.add(q, u_b)?;
        let ac = graph.bmm(qu, k_t)?; // [H, R, C]

        let qv = graph.add(q, v_b)?;
        let qr = graph.bmm(qv, r_proj_t)?; // [H, R, L]
        let bd = graph.rel_gather(qr, rel_idx, cols)?; // [H, R, C]

        let qb = graph.add(q, b_b)?;
        let qbs_p = graph.mul(qb, sp_b)?;
        let sp = graph.sum_axis(qbs_p, 2)?; // [H, R, 1]
        let qbs_m = graph.mul(qb, sm_b)?;
        let sm = graph.sum_axis(qbs_m, 2)?;
        let seg_same = graph.mul(sp, same)?;
        let seg_diff = graph.mul(sm, diff)?;
        let seg = graph.add(seg_same, seg_diff)?; // [H, R, C]

        let acbd = graph.add(ac, bd)?;
        let score_sum = graph.add(acbd, seg)?;
        let scores = graph.scale(score_sum, shape.scale());
        let probs = graph.softmax_masked(scores, Some(mask), allow_empty)?;
        let probs_used = match dropout.as_deref_mut() {
            Some(dr) => {
                let p = dr.attn_p;
                dr.apply(graph, probs, p)?
            }
            None => probs,
        };

        let ctx_heads = graph.bmm(probs_used, v)?; // [H, R, hd]
        let merged = graph.permute(ctx_heads, &[1, 0, 2])?;
        let flat = graph.reshape(merged, &[rows, d])?;
        let attn_out = graph.matmul(flat, layer.w_o)?;

        let resid1 = graph.add(x_q, attn_out)?;
        let x1 = graph.layer_norm(resid1, layer.ln1_g, layer.ln1_b)?;

        let ff1 = graph.matmul(x1, layer.ffn_w1)?;
        let ff1b = graph.add(ff1, layer.ffn_b1)?;
        let act = graph.gelu(ff1b);
        let ff2 = graph.matmul(act, layer.ffn_w2)?;
        let ff2b = graph.add(ff2, layer.ffn_b2)?;
        let ff_used = match dropout.as_deref_mut() {
            Some(dr) => {
                let p = dr.hidden_p;
                dr.apply(graph, ff2b, p)?
            }
            None => ff2b,
        };
        let resid2 = graph.add(x1, ff_used)?;
        let out = graph.layer_norm(resid2, layer.ln2_g, layer.ln2_b)?;
        Ok((out, probs))
    };

    let (h_next, h_probs) = attend(
        graph,
        h_prev,
        t,
        &ctx.content_mask,
        &ctx.content_rel_idx,
        ctx.same_content,
        ctx.diff_content,
        false,
        &mut dropout,
    )?;

    let (g_next, g_probs) = match g_prev {
        Some(gp) => {
            let p = ctx.target_idx.len();
            if graph.value(gp).shape() != [p, d] {
                return Err(AttnError::BadInput(format!(
                    "query input shape {:?}, expected [{p}, {d}]",
                    graph.value(gp).shape()
                )));
            }
            let same = ctx.same_query.ok_or_else(|| {
                AttnError::BadInput("query stream requested with no targets".into())
            })?;
            let diff = ctx.diff_query.expect("same/diff built together");
            let (g_out, g_pr) = attend(
                graph,
                gp,
                p,
                &ctx.query_mask_rows,
                &ctx.query_rel_idx,
                same,
                diff,
                true,
                &mut dropout,
            )?;
            (Some(g_out), Some(g_pr))
        }
        None => (None, None),
    };

    Ok(TwoStreamOut { h_next, g_next, h_probs, g_probs })
}
