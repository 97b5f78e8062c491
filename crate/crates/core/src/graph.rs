//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A `Graph` is a define-by-run tape: every operation appends a node whose
//! inputs have strictly smaller ids, so creation order is a topological
//! order and the backward pass is a single reverse sweep that visits each
//! node exactly once. Graphs are confined to one worker; parameters enter
//! as leaves and are immutable for the lifetime of the graph.

use crate::tensor::{
    broadcast_binary, mm, mm_at, mm_bt, reduce_to_shape, BoolMat, Tensor,
    TensorError,
};

/// Additive mask constant: large enough that exp(x - max) underflows to
/// exactly zero for any finite visible max, making "cannot see" structural.
pub const MASK_NEG: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Bmm { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    MaskedSoftmax { a: usize },
    LogSoftmax { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, inv_std: Vec<f64>, normalized: Vec<f64> },
    Gelu { a: usize },
    Embedding { table: usize, ids: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Permute { a: usize, perm: Vec<usize> },
    Reshape { a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    SumAxis { a: usize, axis: usize },
    RelGather { a: usize, idx: Vec<u32>, out_cols: usize },
    Pick { a: usize, idx: Vec<usize> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient, if the backward pass reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, id: NodeId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    // ---- leaves ------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.push(value, trainable, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = mm(va.data(), vb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(value, ng, Op::Matmul { a: a.0, b: b.0 }))
    }

    /// Batched matmul: [B, m, k] . [B, k, n] -> [B, m, n].
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Vec::with_capacity(bsz * m * n);
        for i in 0..bsz {
            out.extend(mm(
                &va.data()[i * m * k..(i + 1) * m * k],
                &vb.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let value = Tensor::new(vec![bsz, m, n], out)?;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(value, ng, Op::Bmm { a: a.0, b: b.0 }))
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value =
            broadcast_binary("add", &self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y)?;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(value, ng, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let value =
            broadcast_binary("mul", &self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y)?;
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(value, ng, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| x * factor).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("scale shape");
        let ng = self.needs(&[a.0]);
        self.push(value, ng, Op::Scale { a: a.0, factor })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    // ---- softmax ---------------------------------------------------------

    /// Softmax over the last axis with an optional boolean visibility mask
    /// applied to the last two axes. Invisible entries get `MASK_NEG` added
    /// before normalization, which makes their probability exactly zero.
    ///
    /// A fully masked row is an error unless `allow_empty_rows` is set, in
    /// which case the row's probabilities are all zero (attention output for
    /// that row is then the zero vector and the residual path carries the
    /// query input forward).
    pub fn softmax_masked(
        &mut self,
        a: NodeId,
        mask: Option<&BoolMat>,
        allow_empty_rows: bool,
    ) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape().to_vec();
        if shape.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "masked_softmax",
                shape,
                detail: "softmax needs at least one axis".into(),
            });
        }
        let cols = shape[shape.len() - 1];
        if let Some(m) = mask {
            let rows = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
            if m.rows() != rows || m.cols() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax",
                    lhs: shape,
                    rhs: vec![m.rows(), m.cols()],
                });
            }
            for r in 0..rows {
                if m.row(r).iter().all(|&v| !v) && !allow_empty_rows {
                    return Err(TensorError::FullyMaskedRow { op: "masked_softmax", row: r });
                }
            }
        }
        let rows_total = va.numel() / cols;
        let mask_rows = mask.map(|m| m.rows()).unwrap_or(1);
        let mut out = vec![0.0; va.numel()];
        for r in 0..rows_total {
            let row = &va.data()[r * cols..(r + 1) * cols];
            let orow = &mut out[r * cols..(r + 1) * cols];
            let mrow = mask.map(|m| m.row(r % mask_rows));
            let visible = |c: usize| mrow.map(|mr| mr[c]).unwrap_or(true);
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if visible(c) && row[c] > max {
                    max = row[c];
                }
            }
            if max == f64::NEG_INFINITY {
                // fully masked, permitted row: all-zero probabilities
                continue;
            }
            let mut sum = 0.0;
            for c in 0..cols {
                let logit = if visible(c) { row[c] } else { row[c] + MASK_NEG };
                let e = (logit - max).exp();
                orow[c] = e;
                sum += e;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let value = Tensor::new(shape, out)?;
        let ng = self.needs(&[a.0]);
        Ok(self.push(value, ng, Op::MaskedSoftmax { a: a.0 }))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.softmax_masked(a, None, false)
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape().to_vec();
        let cols = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "log_softmax",
            shape: shape.clone(),
            detail: "log_softmax needs at least one axis".into(),
        })?;
        let rows = va.numel() / cols;
        let mut out = vec![0.0; va.numel()];
        for r in 0..rows {
            let row = &va.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let value = Tensor::new(shape, out)?;
        let ng = self.needs(&[a.0]);
        Ok(self.push(value, ng, Op::LogSoftmax { a: a.0 }))
    }

    // ---- normalization and activation -------------------------------------

    pub const LAYER_NORM_EPS: f64 = 1e-5;

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (vx, vg, vb) =
            (&self.nodes[x.0].value, &self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let shape = vx.shape().to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::InvalidShape {
            op: "layer_norm",
            shape: shape.clone(),
            detail: "layer_norm needs at least one axis".into(),
        })?;
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: vg.shape().to_vec(),
            });
        }
        let rows = vx.numel() / d;
        let mut out = vec![0.0; vx.numel()];
        let mut normalized = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + Self::LAYER_NORM_EPS).sqrt();
            inv_std[r] = istd;
            for c in 0..d {
                let nh = (row[c] - mean) * istd;
                normalized[r * d + c] = nh;
                out[r * d + c] = nh * vg.data()[c] + vb.data()[c];
            }
        }
        let value = Tensor::new(shape, out)?;
        let ng = self.needs(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            value,
            ng,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, inv_std, normalized },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| gelu_fwd(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("gelu shape");
        let ng = self.needs(&[a.0]);
        self.push(value, ng, Op::Gelu { a: a.0 })
    }

    // ---- lookup / structure -----------------------------------------------

    /// Rows of `table` selected by token ids: [V, d] x ids -> [len, d].
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let vt = &self.nodes[table.0].value;
        if vt.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                shape: vt.shape().to_vec(),
                detail: "embedding table must be rank 2".into(),
            });
        }
        let (v, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { op: "embedding", index: id, bound: v });
            }
            data.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.needs(&[table.0]);
        Ok(self.push(value, ng, Op::Embedding { table: table.0, ids: ids.to_vec() }))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: vec![],
                detail: "concat needs at least one input".into(),
            });
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: first,
                detail: format!("axis {axis} out of range"),
            });
        }
        let mut axis_total = 0;
        for &inp in inputs {
            let s = self.nodes[inp.0].value.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; shape.iter().product()];
        let out_stride = axis_total * inner;
        let mut offset = 0;
        for &inp in inputs {
            let v = &self.nodes[inp.0].value;
            let this_axis = v.shape()[axis];
            let block = this_axis * inner;
            for o in 0..outer {
                let src = &v.data()[o * block..(o + 1) * block];
                let dst = &mut data[o * out_stride + offset..o * out_stride + offset + block];
                dst.copy_from_slice(src);
            }
            offset += block;
        }
        let value = Tensor::new(shape, data)?;
        let ids: Vec<usize> = inputs.iter().map(|n| n.0).collect();
        let ng = self.needs(&ids);
        Ok(self.push(value, ng, Op::Concat { inputs: ids, axis }))
    }

    /// Contiguous range along one axis.
    pub fn slice(
        &mut self,
        a: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape,
                detail: format!("range {start}..{} on axis {axis}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src_stride = shape[axis] * inner;
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &va.data()[o * src_stride + start * inner..o * src_stride + (start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let value = Tensor::new(out_shape, data)?;
        let ng = self.needs(&[a.0]);
        Ok(self.push(value, ng, Op::Slice { a: a.0, axis, start }))
    }

    /// Axis permutation (generalized transpose).
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape,
                detail: format!("invalid axis permutation {perm:?}"),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(va.data(), &shape, perm);
        let value = Tensor::new(out_shape, data)?;
        let ng = self.needs(&[a.0]);
        Ok(self.push(value, ng, Op::Permute { a: a.0, perm: perm.to_vec() }))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.permute(a, &[1, 0])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != va.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                detail: format!("element count differs from {}", va.numel()),
            });
        }
        let value = Tensor::new(shape.to_vec(), va.data().to_vec())?;
        let ng = self.needs(&[a.0]);
        Ok(self.push(value, ng, Op::Reshape { a: a.0 }))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.data().iter().sum();
        let ng = self.needs(&[a.0]);
        self.push(Tensor::scalar(s), ng, Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let ng = self.needs(&[a.0]);
        self.push(Tensor::scalar(s), ng, Op::MeanAll { a: a.0 })
    }

    /// Sum along one axis, keeping it as size 1.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidShape {
                op: "sum_axis",
                shape,
                detail: format!("axis {axis} out of range"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &va.data()[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let value = Tensor::new(out_shape, data)?;
        let ng = self.needs(&[a.0]);
        Ok(self.push(value, ng, Op::SumAxis { a: a.0, axis }))
    }

    // ---- gathers -------------------------------------------------------------

    /// Column gather shared across leading axes: for input [..., R, L] and an
    /// index table [R, C], out[..., r, c] = in[..., r, idx[r][c]]. Used to map
    /// per-distance position scores onto per-key columns.
    pub fn rel_gather(
        &mut self,
        a: NodeId,
        idx: &[u32],
        out_cols: usize,
    ) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        let shape = va.shape().to_vec();
        if shape.len() < 2 {
            return Err(TensorError::InvalidShape {
                op: "rel_gather",
                shape,
                detail: "input must have rank >= 2".into(),
            });
        }
        let l = shape[shape.len() - 1];
        let r = shape[shape.len() - 2];
        if idx.len() != r * out_cols {
            return Err(TensorError::InvalidShape {
                op: "rel_gather",
                shape,
                detail: format!("index table length {} != {r}x{out_cols}", idx.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= l) {
            return Err(TensorError::IndexOutOfRange {
                op: "rel_gather",
                index: bad as usize,
                bound: l,
            });
        }
        let lead: usize = shape[..shape.len() - 2].iter().product();
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = out_cols;
        let mut data = vec![0.0; lead * r * out_cols];
        for b in 0..lead {
            for row in 0..r {
                let src = &va.data()[(b * r + row) * l..(b * r + row + 1) * l];
                let dst = &mut data[(b * r + row) * out_cols..(b * r + row + 1) * out_cols];
                let irow = &idx[row * out_cols..(row + 1) * out_cols];
                for (d, &i) in dst.iter_mut().zip(irow) {
                    *d = src[i as usize];
                }
            }
        }
        let value = Tensor::new(out_shape, data)?;
        let ng = self.needs(&[a.0]);
        Ok(self.push(value, ng, Op::RelGather { a: a.0, idx: idx.to_vec(), out_cols }))
    }

    /// One element per row of a matrix: out[r] = a[r, idx[r]].
    pub fn pick(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 || va.shape()[0] != idx.len() {
            return Err(TensorError::InvalidShape {
                op: "pick",
                shape: va.shape().to_vec(),
                detail: format!("expected [rows={}, cols] input", idx.len()),
            });
        }
        let cols = va.shape()[1];
        let mut data = Vec::with_capacity(idx.len());
        for (r, &c) in idx.iter().enumerate() {
            if c >= cols {
                return Err(TensorError::IndexOutOfRange { op: "pick", index: c, bound: cols });
            }
            data.push(va.data()[r * cols + c]);
        }
        let value = Tensor::new(vec![idx.len()], data)?;
        let ng = self.needs(&[a.0]);
        Ok(self.push(value, ng, Op::Pick { a: a.0, idx: idx.to_vec() }))
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Each node is visited exactly once in
    /// reverse topological (= reverse creation) order.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::InvalidShape {
                op: "backward",
                shape: self.nodes[loss.0].value.shape().to_vec(),
                detail: "loss must be a scalar".into(),
            });
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            let contribs = self.backward_node(id);
            for (input, delta) in contribs {
                if !self.nodes[input].needs_grad {
                    continue;
                }
                match &mut self.nodes[input].grad {
                    Some(g) => {
                        for (gi, di) in g.iter_mut().zip(&delta) {
                            *gi += di;
                        }
                    }
                    None => self.nodes[input].grad = Some(delta),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of one node w.r.t. its inputs.
    fn backward_node(&self, id: usize) -> Vec<(usize, Vec<f64>)> {
        let node = &self.nodes[id];
        let gout = node.grad.as_ref().expect("grad present");
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Matmul { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let da = mm_bt(gout, val(*b).data(), m, k, n);
                let db = mm_at(val(*a).data(), gout, m, k, n);
                vec![(*a, da), (*b, db)]
            }
            Op::Bmm { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let mut da = Vec::with_capacity(bsz * m * k);
                let mut db = Vec::with_capacity(bsz * k * n);
                for i in 0..bsz {
                    let g = &gout[i * m * n..(i + 1) * m * n];
                    let av = &val(*a).data()[i * m * k..(i + 1) * m * k];
                    let bv = &val(*b).data()[i * k * n..(i + 1) * k * n];
                    da.extend(mm_bt(g, bv, m, k, n));
                    db.extend(mm_at(av, g, m, k, n));
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Add { a, b } => {
                let out_shape = node.value.shape();
                let da = reduce_to_shape(gout, out_shape, val(*a).shape());
                let db = reduce_to_shape(gout, out_shape, val(*b).shape());
                vec![(*a, da), (*b, db)]
            }
            Op::Mul { a, b } => {
                let out_shape = node.value.shape();
                let ga = broadcast_binary("mul_bwd", &tensor_of(gout, out_shape), val(*b), |g, y| g * y)
                    .expect("mul backward broadcast");
                let gb = broadcast_binary("mul_bwd", &tensor_of(gout, out_shape), val(*a), |g, x| g * x)
                    .expect("mul backward broadcast");
                let da = reduce_to_shape(ga.data(), out_shape, val(*a).shape());
                let db = reduce_to_shape(gb.data(), out_shape, val(*b).shape());
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { a, factor } => {
                vec![(*a, gout.iter().map(|&g| g * factor).collect())]
            }
            Op::MaskedSoftmax { a } => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                let rows = y.len() / cols;
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![(*a, dx)]
            }
            Op::LogSoftmax { a } => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                let rows = y.len() / cols;
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..cols {
                        dx[r * cols + c] = gr[c] - yr[c].exp() * gsum;
                    }
                }
                vec![(*a, dx)]
            }
            Op::LayerNorm { x, gain, bias, inv_std, normalized } => {
                let d = *node.value.shape().last().unwrap();
                let rows = node.value.numel() / d;
                let gv = val(*gain).data();
                let mut dx = vec![0.0; node.value.numel()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let nh = &normalized[r * d..(r + 1) * d];
                    let g = &gout[r * d..(r + 1) * d];
                    let istd = inv_std[r];
                    let mut sum_dn = 0.0;
                    let mut sum_dn_nh = 0.0;
                    for c in 0..d {
                        dgain[c] += g[c] * nh[c];
                        dbias[c] += g[c];
                        let dn = g[c] * gv[c];
                        sum_dn += dn;
                        sum_dn_nh += dn * nh[c];
                    }
                    let inv_d = 1.0 / d as f64;
                    for c in 0..d {
                        let dn = g[c] * gv[c];
                        dx[r * d + c] = istd * (dn - inv_d * sum_dn - nh[c] * inv_d * sum_dn_nh);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::Gelu { a } => {
                let xv = val(*a).data();
                let dx = xv.iter().zip(gout).map(|(&x, &g)| g * gelu_bwd(x)).collect();
                vec![(*a, dx)]
            }
            Op::Embedding { table, ids } => {
                let vt = val(*table);
                let d = vt.shape()[1];
                let mut dt = vec![0.0; vt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let src = &gout[r * d..(r + 1) * d];
                    let dst = &mut dt[id * d..(id + 1) * d];
                    for (di, &si) in dst.iter_mut().zip(src) {
                        *di += si;
                    }
                }
                vec![(*table, dt)]
            }
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_stride = out_shape[*axis] * inner;
                let mut result = Vec::with_capacity(inputs.len());
                let mut offset = 0;
                for &inp in inputs {
                    let s = val(inp).shape();
                    let block = s[*axis] * inner;
                    let mut d = vec![0.0; val(inp).numel()];
                    for o in 0..outer {
                        let src = &gout[o * out_stride + offset..o * out_stride + offset + block];
                        d[o * block..(o + 1) * block].copy_from_slice(src);
                    }
                    offset += block;
                    result.push((inp, d));
                }
                result
            }
            Op::Slice { a, axis, start } => {
                let in_shape = val(*a).shape();
                let out_shape = node.value.shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let src_stride = out_shape[*axis] * inner;
                let dst_stride = in_shape[*axis] * inner;
                let mut d = vec![0.0; val(*a).numel()];
                for o in 0..outer {
                    let src = &gout[o * src_stride..(o + 1) * src_stride];
                    let dst =
                        &mut d[o * dst_stride + start * inner..o * dst_stride + start * inner + src_stride];
                    dst.copy_from_slice(src);
                }
                vec![(*a, d)]
            }
            Op::Permute { a, perm } => {
                // inverse permutation routes the gradient back
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let d = permute_data(gout, node.value.shape(), &inv);
                vec![(*a, d)]
            }
            Op::Reshape { a } => vec![(*a, gout.clone())],
            Op::SumAll { a } => {
                vec![(*a, vec![gout[0]; val(*a).numel()])]
            }
            Op::MeanAll { a } => {
                let n = val(*a).numel();
                vec![(*a, vec![gout[0] / n as f64; n])]
            }
            Op::SumAxis { a, axis } => {
                let in_shape = val(*a).shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let mid = in_shape[*axis];
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let mut d = vec![0.0; val(*a).numel()];
                for o in 0..outer {
                    let src = &gout[o * inner..(o + 1) * inner];
                    for m in 0..mid {
                        let dst = &mut d[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                        dst.copy_from_slice(src);
                    }
                }
                vec![(*a, d)]
            }
            Op::RelGather { a, idx, out_cols } => {
                let in_shape = val(*a).shape();
                let l = in_shape[in_shape.len() - 1];
                let r = in_shape[in_shape.len() - 2];
                let lead: usize = in_shape[..in_shape.len() - 2].iter().product();
                let mut d = vec![0.0; val(*a).numel()];
                for b in 0..lead {
                    for row in 0..r {
                        let g = &gout[(b * r + row) * out_cols..(b * r + row + 1) * out_cols];
                        let dst = &mut d[(b * r + row) * l..(b * r + row + 1) * l];
                        let irow = &idx[row * out_cols..(row + 1) * out_cols];
                        for (&gv, &i) in g.iter().zip(irow) {
                            dst[i as usize] += gv;
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::Pick { a, idx } => {
                let cols = val(*a).shape()[1];
                let mut d = vec![0.0; val(*a).numel()];
                for (r, &c) in idx.iter().enumerate() {
                    d[r * cols + c] = gout[r];
                }
                vec![(*a, d)]
            }
        }
    }
}

fn tensor_of(data: &[f64], shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).expect("internal shape")
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mapped_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; data.len()];
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        for axis in (0..rank).rev() {
            coords[axis] += 1;
            src += mapped_strides[axis];
            if coords[axis] < out_shape[axis] {
                break;
            }
            coords[axis] = 0;
            src -= mapped_strides[axis] * out_shape[axis];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_uniform_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_masked_entries_are_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap());
        let mut mask = BoolMat::new(2, 3, true);
        mask.set(0, 1, false);
        mask.set(1, 0, false);
        mask.set(1, 2, false);
        let y = g.softmax_masked(x, Some(&mask), false).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[1], 0.0);
        assert_eq!(v[3], 0.0);
        assert_eq!(v[5], 0.0);
        assert!(((v[0] + v[2]) - 1.0).abs() < 1e-12);
        assert!((v[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_errors_unless_allowed() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut mask = BoolMat::new(2, 2, true);
        mask.set(1, 0, false);
        mask.set(1, 1, false);
        let err = g.softmax_masked(x, Some(&mask), false).unwrap_err();
        assert!(matches!(err, TensorError::FullyMaskedRow { row: 1, .. }));
        let y = g.softmax_masked(x, Some(&mask), true).unwrap();
        assert_eq!(&g.value(y).data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut g = Graph::new();
        let eye = g.constant(
            Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let x = g.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn grad_of_sum_of_squares() {
        // d/dx sum(x*x) at x=[3] is [6]
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1], vec![3.0]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn reused_node_accumulates_gradient() {
        // f = sum(x + x): df/dx = 2
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), true);
        let s = g.add(x, x).unwrap();
        let loss = g.sum_all(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn concat_backward_splits_without_loss() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let b = g.leaf(Tensor::new(vec![1, 2], vec![5.0, 6.0]).unwrap(), true);
        let c = g.concat(&[a, b], 0).unwrap();
        // weight the upstream gradient so it is distinguishable per entry
        let w = g.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let prod = g.mul(c, w).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        let ga = g.grad(a).unwrap();
        let gb = g.grad(b).unwrap();
        let upstream_sq: f64 = g.value(w).data().iter().map(|v| v * v).sum();
        let split_sq: f64 =
            ga.iter().map(|v| v * v).sum::<f64>() + gb.iter().map(|v| v * v).sum::<f64>();
        assert!((upstream_sq.sqrt() - split_sq.sqrt()).abs() < 1e-12);
        assert_eq!(ga, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(gb, &[5.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        match g.matmul(a, b).unwrap_err() {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 5]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut g = Graph::new();
        let table = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.embedding(table, &[0, 4]).unwrap_err();
        assert!(matches!(err, TensorError::IndexOutOfRange { op: "embedding", index: 4, bound: 4 }));
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(|i| i as f64).collect()).unwrap();
        let a = g.constant(t.clone());
        let p = g.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(g.value(p).shape(), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), t.data());
    }

    #[test]
    fn graphs_move_between_workers() {
        // a graph is confined to one worker at a time, but distinct graphs
        // may run on distinct workers
        fn assert_send<T: Send>() {}
        assert_send::<Graph>();
    }

    #[test]
    fn rel_gather_forward_and_backward() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), true);
        // row 0 picks cols [2, 0]; row 1 picks cols [1, 1]
        let idx = vec![2u32, 0, 1, 1];
        let out = g.rel_gather(a, &idx, 2).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 1.0, 5.0, 5.0]);
        let loss = g.sum_all(out);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 0.0, 1.0, 0.0, 2.0, 0.0]);
    }
}
