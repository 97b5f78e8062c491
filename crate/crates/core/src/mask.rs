//! Factorization orders, prediction-target selection, and attention mask
//! construction for both streams.
//!
//! The token sequence itself is never reordered: a factorization order is a
//! bijection over original positions, and visibility masks realize it. The
//! content mask lets a position see everything at or before its own rank;
//! the query mask sees strictly before (never its own content). Memory
//! columns from the previous segment are visible to both streams.

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::BoolMat;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("sequence length must be at least 1")]
    EmptySequence,
    #[error("invalid factorization order: {0}")]
    InvalidOrder(String),
    #[error("partial-prediction constant K must be >= 1 (got {0})")]
    InvalidK(f64),
    #[error("target selection inconsistent with order: {0}")]
    TargetMismatch(String),
    #[error("batch size must be even and >= 2 (got {0})")]
    OddBatchSize(usize),
}

/// A factorization order over original positions 1..=T.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
    rank: Vec<usize>,
}

impl Permutation {
    /// Build from a 1-based order, validating that it is a bijection.
    pub fn from_order(order: Vec<usize>) -> Result<Self, MaskError> {
        let t = order.len();
        if t == 0 {
            return Err(MaskError::EmptySequence);
        }
        let mut rank = vec![usize::MAX; t];
        for (idx, &pos) in order.iter().enumerate() {
            if pos == 0 || pos > t {
                return Err(MaskError::InvalidOrder(format!(
                    "position {pos} out of range 1..={t}"
                )));
            }
            if rank[pos - 1] != usize::MAX {
                return Err(MaskError::InvalidOrder(format!("position {pos} repeated")));
            }
            rank[pos - 1] = idx;
        }
        Ok(Permutation { order, rank })
    }

    pub fn identity(t: usize) -> Result<Self, MaskError> {
        Self::from_order((1..=t).collect())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// The order as 1-based original positions.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Rank (0-based index in the order) of a 0-based position.
    pub fn rank0(&self, pos0: usize) -> usize {
        self.rank[pos0]
    }
}

/// Uniform factorization order via Fisher-Yates.
pub fn sample_factorization_order(t: usize, rng: &mut Rng) -> Result<Permutation, MaskError> {
    if t == 0 {
        return Err(MaskError::EmptySequence);
    }
    let mut order: Vec<usize> = (1..=t).collect();
    rng.shuffle(&mut order);
    Permutation::from_order(order)
}

/// Cut point and target set: the targets are the final elements of the order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetSelection {
    pub cut: usize,
    /// 1-based original positions, in order-of-prediction.
    pub targets: Vec<usize>,
}

impl TargetSelection {
    /// 0-based target positions sorted ascending (layout order).
    pub fn target_positions0(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.targets.iter().map(|&p| p - 1).collect();
        v.sort_unstable();
        v
    }
}

/// Keep the last ~1/K of the order as targets: n = max(1, round(T/K)).
pub fn select_prediction_targets(
    perm: &Permutation,
    k: f64,
) -> Result<TargetSelection, MaskError> {
    if k < 1.0 || k.is_nan() {
        return Err(MaskError::InvalidK(k));
    }
    let t = perm.len();
    let n = ((t as f64 / k).round() as usize).max(1);
    let cut = t - n;
    Ok(TargetSelection { cut, targets: perm.order()[cut..].to_vec() })
}

/// Like `select_prediction_targets`, but positions for which `excluded`
/// returns true (special symbols) are moved to the front of the order so
/// they can never land in the target zone. Returns the adjusted order along
/// with the selection.
pub fn select_prediction_targets_excluding(
    perm: &Permutation,
    k: f64,
    excluded: impl Fn(usize) -> bool,
) -> Result<(Permutation, TargetSelection), MaskError> {
    if k < 1.0 || k.is_nan() {
        return Err(MaskError::InvalidK(k));
    }
    let t = perm.len();
    let mut front: Vec<usize> = Vec::new();
    let mut rest: Vec<usize> = Vec::new();
    for &pos in perm.order() {
        if excluded(pos - 1) {
            front.push(pos);
        } else {
            rest.push(pos);
        }
    }
    if rest.is_empty() {
        return Err(MaskError::TargetMismatch("all positions are excluded".into()));
    }
    let n = ((t as f64 / k).round() as usize).max(1).min(rest.len());
    front.extend(rest);
    let adjusted = Permutation::from_order(front)?;
    let cut = t - n;
    let targets = adjusted.order()[cut..].to_vec();
    Ok((adjusted, TargetSelection { cut, targets }))
}

/// Span-based target selection: a consecutive span of length L in 1..=5,
/// placed inside a uniformly positioned context window of about K*L tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanSelection {
    /// 0-based start of the predicted span.
    pub span_start: usize,
    pub span_len: usize,
    /// 0-based start of the context window the span was drawn from.
    pub window_start: usize,
    pub window_len: usize,
}

pub fn sample_target_span(t: usize, k: f64, rng: &mut Rng) -> Result<SpanSelection, MaskError> {
    if t == 0 {
        return Err(MaskError::EmptySequence);
    }
    if k < 1.0 || k.is_nan() {
        return Err(MaskError::InvalidK(k));
    }
    let span_len = (1 + rng.below(5)).min(t);
    let window_len = ((k * span_len as f64).round() as usize).clamp(span_len, t);
    let window_start = rng.below(t - window_len + 1);
    let span_start = window_start + rng.below(window_len - span_len + 1);
    Ok(SpanSelection { span_start, span_len, window_start, window_len })
}

/// Factorization order realizing a span selection: non-span positions come
/// first in random order, span positions last in left-to-right span order
/// (preserving the within-span product-rule dependency).
pub fn span_factorization_order(
    span: &SpanSelection,
    t: usize,
    rng: &mut Rng,
) -> Result<(Permutation, TargetSelection), MaskError> {
    let span_range = span.span_start..span.span_start + span.span_len;
    let mut head: Vec<usize> = (1..=t).filter(|p| !span_range.contains(&(p - 1))).collect();
    rng.shuffle(&mut head);
    let targets: Vec<usize> = span_range.clone().map(|p0| p0 + 1).collect();
    head.extend(targets.iter().copied());
    let perm = Permutation::from_order(head)?;
    let cut = t - span.span_len;
    Ok((perm, TargetSelection { cut, targets }))
}

/// Visibility masks for both streams, including memory columns.
///
/// Shapes are T x (M + T); row i is the query at original position i+1,
/// column M+j is the key at original position j+1, columns below M are
/// memory keys (always visible: memory is reused without knowing the
/// factorization order of the previous segment).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMaskPair {
    pub mem_len: usize,
    pub content: BoolMat,
    pub query: BoolMat,
}

impl AttentionMaskPair {
    pub fn seq_len(&self) -> usize {
        self.content.rows()
    }

    /// Debug validation of the structural mask invariants.
    pub fn check_invariants(&self) -> Result<(), MaskError> {
        let t = self.seq_len();
        let m = self.mem_len;
        for i in 0..t {
            for j in 0..m {
                if !self.content.get(i, j) || !self.query.get(i, j) {
                    return Err(MaskError::TargetMismatch(format!(
                        "memory column {j} not visible from row {i}"
                    )));
                }
            }
            if !self.content.get(i, m + i) {
                return Err(MaskError::TargetMismatch(format!("content diagonal false at {i}")));
            }
            if self.query.get(i, m + i) {
                return Err(MaskError::TargetMismatch(format!("query diagonal true at {i}")));
            }
            for j in 0..t {
                if self.query.get(i, m + j) && !self.content.get(i, m + j) {
                    return Err(MaskError::TargetMismatch(format!(
                        "query sees ({i},{j}) but content does not"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Hand-built causal pair: content is the lower triangle including the
    /// diagonal, query the strict lower triangle. Built directly rather than
    /// through a `Permutation` so it can serve as an independent reference.
    pub fn causal(t: usize, mem_len: usize) -> Result<Self, MaskError> {
        if t == 0 {
            return Err(MaskError::EmptySequence);
        }
        let mut content = BoolMat::new(t, mem_len + t, false);
        let mut query = BoolMat::new(t, mem_len + t, false);
        for i in 0..t {
            for j in 0..mem_len {
                content.set(i, j, true);
                query.set(i, j, true);
            }
            for j in 0..t {
                content.set(i, mem_len + j, j <= i);
                query.set(i, mem_len + j, j < i);
            }
        }
        Ok(AttentionMaskPair { mem_len, content, query })
    }

    /// Serialize in the mask dump text format.
    pub fn dump(&self, perm: &Permutation) -> String {
        let order: Vec<String> = perm.order().iter().map(|p| p.to_string()).collect();
        let mut out = format!("perm={} mem={}\n", order.join(","), self.mem_len);
        for (name, mat) in [("content", &self.content), ("query", &self.query)] {
            out.push_str(name);
            out.push('\n');
            for r in 0..mat.rows() {
                let row: Vec<&str> = mat.row(r).iter().map(|&b| if b { "1" } else { "0" }).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }
}

/// Build the mask pair for a factorization order.
pub fn build_attention_masks(
    perm: &Permutation,
    targets: &TargetSelection,
    mem_len: usize,
) -> Result<AttentionMaskPair, MaskError> {
    let t = perm.len();
    if targets.cut > t || targets.targets.len() != t - targets.cut {
        return Err(MaskError::TargetMismatch(format!(
            "cut {} with {} targets on length {t}",
            targets.cut,
            targets.targets.len()
        )));
    }
    if targets.targets.as_slice() != &perm.order()[targets.cut..] {
        return Err(MaskError::TargetMismatch(
            "targets are not the tail of the factorization order".into(),
        ));
    }
    let mut content = BoolMat::new(t, mem_len + t, false);
    let mut query = BoolMat::new(t, mem_len + t, false);
    for i in 0..t {
        for j in 0..mem_len {
            content.set(i, j, true);
            query.set(i, j, true);
        }
        let ri = perm.rank0(i);
        for j in 0..t {
            let rj = perm.rank0(j);
            content.set(i, mem_len + j, rj <= ri);
            query.set(i, mem_len + j, rj < ri);
        }
    }
    Ok(AttentionMaskPair { mem_len, content, query })
}

/// Content-only full-visibility mask (denoising and finetuning forward).
pub fn full_content_mask(t: usize, mem_len: usize) -> BoolMat {
    BoolMat::new(t, mem_len + t, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// One lane of the bidirectional input pipeline: a stretch of the corpus
/// stream (token-reversed for backward lanes) that the trainer windows into
/// consecutive segments with its own memory lineage.
#[derive(Clone, Debug)]
pub struct PipelineRow {
    pub direction: Direction,
    pub tokens: Vec<usize>,
}

/// Split the stream into batch lanes: half walk the stream left-to-right,
/// half walk a token-reversed copy. With more than two lanes, each direction
/// chunks its stream so lanes cover distinct stretches.
pub fn build_bidirectional_batches(
    stream: &[usize],
    batch_size: usize,
    _seq_len: usize,
) -> Result<Vec<PipelineRow>, MaskError> {
    if batch_size < 2 || !batch_size.is_multiple_of(2) {
        return Err(MaskError::OddBatchSize(batch_size));
    }
    if stream.is_empty() {
        return Err(MaskError::EmptySequence);
    }
    let lanes = batch_size / 2;
    let reversed: Vec<usize> = stream.iter().rev().copied().collect();
    let mut rows = Vec::with_capacity(batch_size);
    for (direction, src) in [(Direction::Forward, stream), (Direction::Backward, &reversed[..])] {
        for lane in 0..lanes {
            let start = lane * src.len() / lanes;
            let end = if lane + 1 == lanes { src.len() } else { (lane + 1) * src.len() / lanes };
            rows.push(PipelineRow { direction, tokens: src[start..end].to_vec() });
        }
    }
    // interleave forward/backward so row order is fwd lanes then bwd lanes
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_one_has_single_order() {
        let mut rng = Rng::new(0);
        let p = sample_factorization_order(1, &mut rng).unwrap();
        assert_eq!(p.order(), &[1]);
    }

    #[test]
    fn zero_length_is_an_error() {
        let mut rng = Rng::new(0);
        assert!(matches!(sample_factorization_order(0, &mut rng), Err(MaskError::EmptySequence)));
    }

    #[test]
    fn sampled_orders_are_chi_square_uniform() {
        // T=3: each of the 6 orders should appear 1000 +- 3*sqrt(1000*5/6)
        // times over 6000 draws.
        let mut rng = Rng::new(42);
        let mut counts = std::collections::HashMap::new();
        for _ in 0..6000 {
            let p = sample_factorization_order(3, &mut rng).unwrap();
            *counts.entry(p.order().to_vec()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        let bound = 3.0 * (1000.0f64 * 5.0 / 6.0).sqrt();
        for (order, c) in counts {
            assert!(
                (c as f64 - 1000.0).abs() <= bound,
                "order {order:?} count {c} outside 1000 +- {bound:.1}"
            );
        }
    }

    #[test]
    fn identity_order_gives_causal_masks() {
        let perm = Permutation::identity(4).unwrap();
        let sel = select_prediction_targets(&perm, 1.0).unwrap();
        let masks = build_attention_masks(&perm, &sel, 0).unwrap();
        let reference = AttentionMaskPair::causal(4, 0).unwrap();
        assert_eq!(masks, reference);
    }

    #[test]
    fn target_counts_follow_rounding_rule() {
        let perm = Permutation::identity(12).unwrap();
        let sel = select_prediction_targets(&perm, 6.0).unwrap();
        assert_eq!(sel.targets.len(), 2);
        assert_eq!(sel.cut, 10);

        let perm = Permutation::identity(7).unwrap();
        let sel = select_prediction_targets(&perm, 6.0).unwrap();
        assert_eq!(sel.targets.len(), 1);

        // K=1 predicts everything
        let perm = Permutation::identity(5).unwrap();
        let sel = select_prediction_targets(&perm, 1.0).unwrap();
        assert_eq!(sel.cut, 0);
        assert_eq!(sel.targets.len(), 5);
    }

    #[test]
    fn derived_masks_for_order_3_2_4_1() {
        let perm = Permutation::from_order(vec![3, 2, 4, 1]).unwrap();
        let sel = select_prediction_targets(&perm, 1.0).unwrap();
        let masks = build_attention_masks(&perm, &sel, 0).unwrap();
        let content: Vec<Vec<bool>> = (0..4).map(|i| masks.content.row(i).to_vec()).collect();
        let query: Vec<Vec<bool>> = (0..4).map(|i| masks.query.row(i).to_vec()).collect();
        let t = true;
        let f = false;
        assert_eq!(content[0], vec![t, t, t, t]); // pos1 sees 1,2,3,4
        assert_eq!(content[1], vec![f, t, t, f]); // pos2 sees 2,3
        assert_eq!(content[2], vec![f, f, t, f]); // pos3 sees 3
        assert_eq!(content[3], vec![f, t, t, t]); // pos4 sees 2,3,4
        assert_eq!(query[0], vec![f, t, t, t]); // pos1 sees 2,3,4
        assert_eq!(query[1], vec![f, f, t, f]); // pos2 sees 3
        assert_eq!(query[2], vec![f, f, f, f]); // pos3 sees nothing
        assert_eq!(query[3], vec![f, t, t, f]); // pos4 sees 2,3
        masks.check_invariants().unwrap();
    }

    #[test]
    fn memory_columns_always_visible() {
        let perm = Permutation::from_order(vec![2, 1]).unwrap();
        let sel = select_prediction_targets(&perm, 1.0).unwrap();
        let masks = build_attention_masks(&perm, &sel, 2).unwrap();
        assert_eq!(masks.content.rows(), 2);
        assert_eq!(masks.content.cols(), 4);
        for i in 0..2 {
            for j in 0..2 {
                assert!(masks.content.get(i, j));
                assert!(masks.query.get(i, j));
            }
        }
    }

    #[test]
    fn inconsistent_targets_rejected() {
        let perm = Permutation::from_order(vec![3, 2, 4, 1]).unwrap();
        let bogus = TargetSelection { cut: 2, targets: vec![2, 3] };
        assert!(matches!(
            build_attention_masks(&perm, &bogus, 0),
            Err(MaskError::TargetMismatch(_))
        ));
    }

    #[test]
    fn span_selection_respects_window_arithmetic() {
        let mut rng = Rng::new(9);
        for _ in 0..500 {
            let span = sample_target_span(64, 6.0, &mut rng).unwrap();
            assert!((1..=5).contains(&span.span_len));
            assert_eq!(span.window_len, (6 * span.span_len).min(64));
            assert!(span.window_start + span.window_len <= 64);
            assert!(span.span_start >= span.window_start);
            assert!(span.span_start + span.span_len <= span.window_start + span.window_len);
        }
    }

    #[test]
    fn span_selection_clips_to_short_sequences() {
        let mut rng = Rng::new(9);
        for _ in 0..100 {
            let span = sample_target_span(3, 6.0, &mut rng).unwrap();
            assert!(span.span_len <= 3);
            assert_eq!(span.window_len.min(3), span.window_len);
        }
    }

    #[test]
    fn span_order_places_span_last_left_to_right() {
        let mut rng = Rng::new(4);
        let span = SpanSelection { span_start: 2, span_len: 3, window_start: 0, window_len: 18 };
        let (perm, sel) = span_factorization_order(&span, 8, &mut rng).unwrap();
        assert_eq!(&perm.order()[5..], &[3, 4, 5]);
        assert_eq!(sel.targets, vec![3, 4, 5]);
        assert_eq!(sel.cut, 5);
        build_attention_masks(&perm, &sel, 0).unwrap().check_invariants().unwrap();
    }

    #[test]
    fn exclusion_keeps_specials_out_of_targets() {
        let perm = Permutation::from_order(vec![1, 4, 2, 5, 3]).unwrap();
        // positions 1 and 3 (0-based 0 and 2) are special
        let (adj, sel) =
            select_prediction_targets_excluding(&perm, 1.0, |p0| p0 == 0 || p0 == 2).unwrap();
        assert_eq!(&adj.order()[..2], &[1, 3]);
        assert!(!sel.targets.contains(&1));
        assert!(!sel.targets.contains(&3));
        assert_eq!(sel.targets.len(), 3);
    }

    #[test]
    fn bidirectional_rows_walk_forward_and_reversed() {
        let stream: Vec<usize> = vec![10, 11, 12, 13, 14, 15]; // "abcdef"
        let rows = build_bidirectional_batches(&stream, 2, 3).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].direction, Direction::Forward);
        assert_eq!(rows[0].tokens, vec![10, 11, 12, 13, 14, 15]);
        assert_eq!(rows[1].direction, Direction::Backward);
        assert_eq!(rows[1].tokens, vec![15, 14, 13, 12, 11, 10]);
    }

    #[test]
    fn palindromic_stream_gives_equal_rows() {
        let stream: Vec<usize> = vec![1, 2, 3, 2, 1];
        let rows = build_bidirectional_batches(&stream, 2, 2).unwrap();
        assert_eq!(rows[0].tokens, rows[1].tokens);
    }

    #[test]
    fn odd_batch_size_rejected() {
        assert!(matches!(
            build_bidirectional_batches(&[1, 2, 3], 3, 2),
            Err(MaskError::OddBatchSize(3))
        ));
    }

    #[test]
    fn dump_format_round_trips_expected_layout() {
        let perm = Permutation::from_order(vec![2, 1]).unwrap();
        let sel = select_prediction_targets(&perm, 1.0).unwrap();
        let masks = build_attention_masks(&perm, &sel, 1).unwrap();
        let dump = masks.dump(&perm);
        let lines: Vec<&str> = dump.lines().collect();
        // order [2,1]: pos1 ranks after pos2, memory column always visible
        assert_eq!(lines[0], "perm=2,1 mem=1");
        assert_eq!(lines[1], "content");
        assert_eq!(lines[2], "1 1 1");
        assert_eq!(lines[3], "1 0 1");
        assert_eq!(lines[4], "query");
        assert_eq!(lines[5], "1 0 1");
        assert_eq!(lines[6], "1 0 0");
    }
}
