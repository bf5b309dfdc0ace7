// SPDX-License-Identifier: Apache-2.0

//! Candidate relations between classes of the two sides.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::egraph::{ClassId, EGraph};
use crate::graph::Side;
use crate::tensor::{value_signature, values_match, Tensor, Tolerance, Value};
use crate::transform::{synthesize_transform, GrammarBudget, TransformExpr};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Via {
    Direct,
    /// `apply(expr, value(source)) ≈ value(target)`.
    Transformed {
        source: ClassId,
        expr: TransformExpr,
    },
}

/// `left` holds side A nodes, `right` side B nodes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct CandidateRelation {
    pub left: ClassId,
    pub right: ClassId,
    pub via: Via,
}

impl CandidateRelation {
    /// Class the transform output must be merged with.
    pub fn target(&self) -> ClassId {
        match &self.via {
            Via::Direct => self.right,
            Via::Transformed { source, .. } => {
                if *source == self.left {
                    self.right
                } else {
                    self.left
                }
            }
        }
    }
}

impl fmt::Display for CandidateRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.via {
            Via::Direct => write!(f, "{} ~ {}", self.left, self.right),
            Via::Transformed { source, expr } => {
                write!(
                    f,
                    "{} ~ {} via {}",
                    self.left,
                    self.right,
                    expr.to_string().replace("$0", &source.to_string())
                )
            }
        }
    }
}

/// Classes holding nodes of `side` but none of the other side.
fn one_sided(g: &EGraph, side: Side) -> Vec<ClassId> {
    g.classes()
        .into_iter()
        .filter(|&c| g.has_side(c, side) && !g.has_side(c, side.other()))
        .collect()
}

fn tensor_of(g: &EGraph, c: ClassId) -> Option<&Tensor> {
    match g.value(c)? {
        Value::Tensor(t) => Some(t),
        Value::Tuple(_) => None,
    }
}

fn worth_transform(target: &Tensor, source: &Tensor) -> bool {
    target.dtype() == source.dtype()
        && !target.is_empty()
        && !source.is_empty()
        && (source.len().is_multiple_of(target.len()) || target.len().is_multiple_of(source.len()))
}

/// Leaf pairing heuristics: exact value match, match modulo a layout
/// transform, and sub-tensor match of a fused leaf against separate leaves.
pub fn match_inputs(g: &EGraph, tol: Tolerance, budget: GrammarBudget) -> Vec<CandidateRelation> {
    let leaves = |side| -> Vec<ClassId> { one_sided(g, side).into_iter().filter(|&c| g.is_leaf_class(c)).collect() };
    let (la, lb) = (leaves(Side::A), leaves(Side::B));
    let mut out = Vec::new();
    let mut used_a = BTreeSet::new();
    let mut used_b = BTreeSet::new();
    for &a in &la {
        let Some(va) = g.value(a) else { continue };
        if let Some(&b) = lb
            .iter()
            .find(|b| !used_b.contains(*b) && g.value(**b).is_some_and(|vb| values_match(va, vb, tol)))
        {
            used_a.insert(a);
            used_b.insert(b);
            out.push(CandidateRelation {
                left: a,
                right: b,
                via: Via::Direct,
            });
        }
    }
    for &a in &la {
        if used_a.contains(&a) {
            continue;
        }
        let Some(ta) = tensor_of(g, a) else { continue };
        for &b in &lb {
            if used_b.contains(&b) {
                continue;
            }
            let Some(tb) = tensor_of(g, b) else { continue };
            if !worth_transform(tb, ta) {
                continue;
            }
            if let Some(expr) = synthesize_transform(tb, ta, budget, tol) {
                used_a.insert(a);
                used_b.insert(b);
                out.push(CandidateRelation {
                    left: a,
                    right: b,
                    via: Via::Transformed { source: a, expr },
                });
                break;
            }
        }
    }
    // One fused leaf may cover several separate leaves.
    for &b in &lb {
        if used_b.contains(&b) {
            continue;
        }
        let Some(tb) = tensor_of(g, b) else { continue };
        for &a in &la {
            if used_a.contains(&a) {
                continue;
            }
            let Some(ta) = tensor_of(g, a) else { continue };
            if ta.len() >= tb.len() || !worth_transform(ta, tb) {
                continue;
            }
            if let Some(expr) = synthesize_transform(ta, tb, budget, tol) {
                used_a.insert(a);
                out.push(CandidateRelation {
                    left: a,
                    right: b,
                    via: Via::Transformed { source: b, expr },
                });
            }
        }
    }
    out.sort();
    out
}

/// Cross-side pairs with equal dependency signatures whose values agree,
/// ordered by depth then class id. Transformed candidates for non-leaf pairs
/// are tried only when no direct candidate exists, at most `transform_cap`.
pub fn find_candidate_relations(
    g: &EGraph,
    tol: Tolerance,
    budget: GrammarBudget,
    transform_cap: usize,
) -> Vec<CandidateRelation> {
    let depths = g.depths();
    let depth = |c: ClassId| depths.get(&c).copied().unwrap_or(usize::MAX);
    let (ca, cb) = (one_sided(g, Side::A), one_sided(g, Side::B));
    let sigs: BTreeMap<ClassId, BTreeSet<ClassId>> =
        ca.iter().chain(&cb).map(|&c| (c, g.dependency_signature(c))).collect();
    let vsig: BTreeMap<ClassId, _> = ca
        .iter()
        .chain(&cb)
        .filter_map(|&c| g.value(c).map(|v| (c, value_signature(v, tol))))
        .collect();
    let mut direct = Vec::new();
    let mut blocked_pairs = Vec::new();
    for &a in &ca {
        let Some(sa) = vsig.get(&a) else { continue };
        for &b in &cb {
            if sigs[&a] != sigs[&b] {
                continue;
            }
            let Some(sb) = vsig.get(&b) else { continue };
            if sa.may_match(sb) && values_match(g.value(a).unwrap(), g.value(b).unwrap(), tol) {
                direct.push(CandidateRelation {
                    left: a,
                    right: b,
                    via: Via::Direct,
                });
            } else {
                blocked_pairs.push((a, b));
            }
        }
    }
    let key = |r: &CandidateRelation| (depth(r.left).max(depth(r.right)), r.left, r.right);
    if !direct.is_empty() {
        direct.sort_by_key(key);
        return direct;
    }
    let mut transformed = Vec::new();
    for (a, b) in blocked_pairs.into_iter().take(transform_cap) {
        let (Some(ta), Some(tb)) = (tensor_of(g, a), tensor_of(g, b)) else {
            continue;
        };
        if !worth_transform(tb, ta) {
            continue;
        }
        if let Some(expr) = synthesize_transform(tb, ta, budget, tol) {
            if !expr.is_identity() {
                transformed.push(CandidateRelation {
                    left: a,
                    right: b,
                    via: Via::Transformed { source: a, expr },
                });
            }
        }
    }
    transformed.sort_by_key(key);
    transformed
}
