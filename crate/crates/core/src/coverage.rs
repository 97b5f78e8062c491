//! Dependency-coverage analysis: which target-context pairs receive a
//! training signal under each objective. Pure combinatorics over position
//! sets, no network involved.
//!
//! A loss term log p(x | V_x) covers the pair (x, U) when U is a subset of
//! V_x. The masked-reconstruction objective conditions every target on the
//! non-targets only; the permutation objective additionally conditions on
//! targets earlier in the factorization order, so its covered set always
//! contains the former's.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::mask::Permutation;
use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoverageError {
    #[error("exhaustive enumeration capped at T <= {max} (got {got})")]
    TooLong { got: usize, max: usize },
    #[error("the permutation objective needs a factorization order")]
    MissingOrder,
    #[error("instance is inconsistent: {0}")]
    BadInstance(String),
}

pub const MAX_EXHAUSTIVE_T: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Bert,
    Xlnet,
    Ar,
}

/// Target/non-target split of positions 1..=T with an optional order.
#[derive(Clone, Debug)]
pub struct CoverageInstance {
    pub t: usize,
    /// 1-based target positions.
    pub targets: Vec<usize>,
    pub order: Option<Permutation>,
}

impl CoverageInstance {
    pub fn new(t: usize, targets: Vec<usize>, order: Option<Permutation>) -> Result<Self, CoverageError> {
        let mut seen = vec![false; t];
        for &p in &targets {
            if p == 0 || p > t {
                return Err(CoverageError::BadInstance(format!("target {p} outside 1..={t}")));
            }
            if std::mem::replace(&mut seen[p - 1], true) {
                return Err(CoverageError::BadInstance(format!("target {p} repeated")));
            }
        }
        if let Some(ref o) = order {
            if o.len() != t {
                return Err(CoverageError::BadInstance("order length differs from T".into()));
            }
        }
        Ok(CoverageInstance { t, targets, order })
    }

    fn target_mask(&self) -> u32 {
        self.targets.iter().fold(0u32, |m, &p| m | (1 << (p - 1)))
    }
}

/// A target position with a context set of interest (bitmask over positions).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DependencyPair {
    /// 1-based target position.
    pub target: usize,
    /// Bitmask of 1-based positions (bit p-1), nonempty, excluding target.
    pub context: u32,
}

/// Visible context V_x per target under an objective.
pub fn visible_context(
    objective: Objective,
    instance: &CoverageInstance,
) -> Result<BTreeMap<usize, u32>, CoverageError> {
    let all = if instance.t == 32 { u32::MAX } else { (1u32 << instance.t) - 1 };
    let target_mask = instance.target_mask();
    let non_targets = all & !target_mask;
    let mut out = BTreeMap::new();
    match objective {
        Objective::Bert => {
            for &x in &instance.targets {
                out.insert(x, non_targets);
            }
        }
        Objective::Xlnet => {
            let order = instance.order.as_ref().ok_or(CoverageError::MissingOrder)?;
            for &x in &instance.targets {
                let rx = order.rank0(x - 1);
                let earlier_targets = instance
                    .targets
                    .iter()
                    .filter(|&&y| y != x && order.rank0(y - 1) < rx)
                    .fold(0u32, |m, &y| m | (1 << (y - 1)));
                out.insert(x, non_targets | earlier_targets);
            }
        }
        Objective::Ar => {
            for &x in &instance.targets {
                let left = if x == 1 { 0 } else { (1u32 << (x - 1)) - 1 };
                out.insert(x, left);
            }
        }
    }
    Ok(out)
}

/// Subset test: the pair is covered when its context lies inside V_x.
pub fn is_covered(pair: &DependencyPair, visible: u32) -> bool {
    pair.context != 0 && pair.context & !visible == 0
}

/// Number of covered pairs with the pairs-of-interest defaulting to every
/// (target, nonempty subset of other positions). Each target contributes
/// 2^|V_x| - 1 subsets, all of them inside V_x by construction.
pub fn count_covered_pairs(visible: &BTreeMap<usize, u32>) -> usize {
    visible.values().map(|v| (1usize << v.count_ones()) - 1).sum()
}

#[derive(Clone, Debug)]
pub struct CoverageLine {
    pub sample: usize,
    pub bert: usize,
    pub xlnet: usize,
    pub ar: usize,
    /// Whether covered(bert) is a subset of covered(xlnet) for this sample.
    pub nested: bool,
}

#[derive(Clone, Debug, Default)]
pub struct CoverageReport {
    pub lines: Vec<CoverageLine>,
}

impl CoverageReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("sample\tbert\txlnet\tar\tnested\n");
        for l in &self.lines {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                l.sample, l.bert, l.xlnet, l.ar, l.nested as u8
            ));
        }
        out
    }

    pub fn all_nested(&self) -> bool {
        self.lines.iter().all(|l| l.nested)
    }
}

/// Sample random instances and orders, counting covered pairs per objective.
pub fn coverage_report(
    t: usize,
    target_fraction: f64,
    n_orders: usize,
    rng: &mut Rng,
) -> Result<CoverageReport, CoverageError> {
    if t == 0 || t > MAX_EXHAUSTIVE_T {
        return Err(CoverageError::TooLong { got: t, max: MAX_EXHAUSTIVE_T });
    }
    let n_targets = ((t as f64 * target_fraction).round() as usize).clamp(1, t);
    let mut report = CoverageReport::default();
    for sample in 0..n_orders {
        let mut positions: Vec<usize> = (1..=t).collect();
        rng.shuffle(&mut positions);
        let targets: Vec<usize> = positions[..n_targets].to_vec();
        let order = crate::mask::sample_factorization_order(t, rng)
            .map_err(|e| CoverageError::BadInstance(e.to_string()))?;
        let instance = CoverageInstance::new(t, targets, Some(order))?;
        let vb = visible_context(Objective::Bert, &instance)?;
        let vx = visible_context(Objective::Xlnet, &instance)?;
        let va = visible_context(Objective::Ar, &instance)?;
        let nested = vb.iter().all(|(x, v)| v & !vx[x] == 0);
        report.lines.push(CoverageLine {
            sample,
            bert: count_covered_pairs(&vb),
            xlnet: count_covered_pairs(&vx),
            ar: count_covered_pairs(&va),
            nested,
        });
    }
    Ok(report)
}
