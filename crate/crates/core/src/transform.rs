// SPDX-License-Identifier: Apache-2.0

//! Layout transformations between tensor values.

use std::fmt;

use crate::egraph::{ClassId, EGraph};
use crate::error::{EngineError, ExecError};
use crate::ops::{attr, OpKind};
use crate::tensor::{numel, tensors_match, Tensor, Tolerance};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransformExpr {
    /// Index into the source list.
    Src(usize),
    Transpose(Box<TransformExpr>, usize, usize),
    Concat(Vec<TransformExpr>, usize),
    Reshape(Box<TransformExpr>, Vec<usize>),
    /// `get_item(split(e, size, axis), index)`.
    Split(Box<TransformExpr>, usize, usize, usize),
}

#[derive(Debug, Clone, Copy)]
pub struct GrammarBudget {
    pub max_depth: usize,
    pub max_concat: usize,
}

impl Default for GrammarBudget {
    fn default() -> Self {
        GrammarBudget {
            max_depth: 2,
            max_concat: 4,
        }
    }
}

impl TransformExpr {
    pub fn src() -> TransformExpr {
        TransformExpr::Src(0)
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, TransformExpr::Src(_))
    }

    pub fn depth(&self) -> usize {
        match self {
            TransformExpr::Src(_) => 0,
            TransformExpr::Transpose(e, ..) | TransformExpr::Reshape(e, _) | TransformExpr::Split(e, ..) => {
                1 + e.depth()
            }
            TransformExpr::Concat(es, _) => 1 + es.iter().map(TransformExpr::depth).max().unwrap_or(0),
        }
    }

    pub fn size(&self) -> usize {
        match self {
            TransformExpr::Src(_) => 1,
            TransformExpr::Transpose(e, ..) | TransformExpr::Reshape(e, _) | TransformExpr::Split(e, ..) => {
                1 + e.size()
            }
            TransformExpr::Concat(es, _) => 1 + es.iter().map(TransformExpr::size).sum::<usize>(),
        }
    }

    pub fn within(&self, budget: GrammarBudget) -> bool {
        fn arity_ok(e: &TransformExpr, k: usize) -> bool {
            match e {
                TransformExpr::Src(_) => true,
                TransformExpr::Transpose(e, ..) | TransformExpr::Reshape(e, _) | TransformExpr::Split(e, ..) => {
                    arity_ok(e, k)
                }
                TransformExpr::Concat(es, _) => es.len() <= k && es.iter().all(|e| arity_ok(e, k)),
            }
        }
        self.depth() <= budget.max_depth && arity_ok(self, budget.max_concat)
    }

    pub fn apply(&self, srcs: &[&Tensor]) -> Result<Tensor, ExecError> {
        match self {
            TransformExpr::Src(i) => srcs
                .get(*i)
                .map(|t| (*t).clone())
                .ok_or_else(|| ExecError::Attr(format!("transform source {i} missing"))),
            TransformExpr::Transpose(e, a, b) => e.apply(srcs)?.swap_axes(*a, *b),
            TransformExpr::Reshape(e, s) => e.apply(srcs)?.reshape(s.clone()),
            TransformExpr::Concat(es, axis) => {
                let parts = es.iter().map(|e| e.apply(srcs)).collect::<Result<Vec<_>, _>>()?;
                Tensor::concat(&parts.iter().collect::<Vec<_>>(), *axis)
            }
            TransformExpr::Split(e, size, axis, index) => {
                let mut pieces = e.apply(srcs)?.split(*size, *axis)?;
                if *index >= pieces.len() {
                    return Err(ExecError::Attr(format!("split piece {index} out of range")));
                }
                Ok(pieces.swap_remove(*index))
            }
        }
    }

    pub fn output_shape(&self, src_shapes: &[Vec<usize>]) -> Option<Vec<usize>> {
        match self {
            TransformExpr::Src(i) => src_shapes.get(*i).cloned(),
            TransformExpr::Transpose(e, a, b) => {
                let mut s = e.output_shape(src_shapes)?;
                if *a >= s.len() || *b >= s.len() {
                    return None;
                }
                s.swap(*a, *b);
                Some(s)
            }
            TransformExpr::Reshape(e, t) => {
                let s = e.output_shape(src_shapes)?;
                (numel(&s) == numel(t)).then(|| t.clone())
            }
            TransformExpr::Concat(es, axis) => {
                let shapes = es
                    .iter()
                    .map(|e| e.output_shape(src_shapes))
                    .collect::<Option<Vec<_>>>()?;
                let mut out = shapes.first()?.clone();
                if *axis >= out.len() {
                    return None;
                }
                out[*axis] = 0;
                for s in &shapes {
                    if s.len() != out.len() || (0..s.len()).any(|d| d != *axis && s[d] != out[d]) {
                        return None;
                    }
                    out[*axis] += s[*axis];
                }
                Some(out)
            }
            TransformExpr::Split(e, size, axis, index) => {
                let mut s = e.output_shape(src_shapes)?;
                if *axis >= s.len() || *size == 0 || index * size >= s[*axis] {
                    return None;
                }
                s[*axis] = (*size).min(s[*axis] - index * size);
                Some(s)
            }
        }
    }

    /// One expression per source recovering that source from this
    /// transform's output (`Src(0)` in the returned expressions). `None` for
    /// lossy transforms such as taking one split piece.
    pub fn inverse(&self, src_shapes: &[Vec<usize>]) -> Option<Vec<TransformExpr>> {
        let mut out: Vec<Option<TransformExpr>> = vec![None; src_shapes.len()];
        invert_into(self, TransformExpr::src(), src_shapes, &mut out)?;
        out.into_iter().collect()
    }
}

fn invert_into(
    e: &TransformExpr,
    acc: TransformExpr,
    src_shapes: &[Vec<usize>],
    out: &mut [Option<TransformExpr>],
) -> Option<()> {
    match e {
        TransformExpr::Src(i) => {
            let slot = out.get_mut(*i)?;
            if slot.is_none() {
                *slot = Some(acc);
            }
            Some(())
        }
        TransformExpr::Transpose(inner, a, b) => {
            invert_into(inner, TransformExpr::Transpose(Box::new(acc), *a, *b), src_shapes, out)
        }
        TransformExpr::Reshape(inner, _) => {
            let s = inner.output_shape(src_shapes)?;
            invert_into(inner, TransformExpr::Reshape(Box::new(acc), s), src_shapes, out)
        }
        TransformExpr::Concat(parts, axis) => {
            let shapes = parts
                .iter()
                .map(|p| p.output_shape(src_shapes))
                .collect::<Option<Vec<_>>>()?;
            let size = shapes.first()?.get(*axis).copied()?;
            if shapes.iter().any(|s| s[*axis] != size) {
                return None;
            }
            for (k, p) in parts.iter().enumerate() {
                invert_into(
                    p,
                    TransformExpr::Split(Box::new(acc.clone()), size, *axis, k),
                    src_shapes,
                    out,
                )?;
            }
            Some(())
        }
        TransformExpr::Split(..) => None,
    }
}

impl fmt::Display for TransformExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformExpr::Src(i) => write!(f, "${i}"),
            TransformExpr::Transpose(e, a, b) => write!(f, "transpose({e}, {a}, {b})"),
            TransformExpr::Reshape(e, s) => write!(f, "reshape({e}, {s:?})"),
            TransformExpr::Concat(es, axis) => {
                f.write_str("concat(")?;
                for e in es {
                    write!(f, "{e}, ")?;
                }
                write!(f, "{axis})")
            }
            TransformExpr::Split(e, size, axis, index) => write!(f, "split({e}, {size}, {axis})[{index}]"),
        }
    }
}

fn divisors(n: usize) -> Vec<usize> {
    (1..n).filter(|d| n.is_multiple_of(*d)).collect()
}

/// Single-step transforms of `e` (shape `s`) that could lead to `target`.
fn steps(e: &TransformExpr, s: &[usize], target: &[usize], budget: GrammarBudget) -> Vec<TransformExpr> {
    let mut out = Vec::new();
    for a in 0..s.len() {
        for b in a + 1..s.len() {
            out.push(TransformExpr::Transpose(Box::new(e.clone()), a, b));
        }
    }
    for axis in 0..s.len() {
        for k in 2..=budget.max_concat {
            if s[axis] * k == target.get(axis).copied().unwrap_or(0) {
                out.push(TransformExpr::Concat(vec![e.clone(); k], axis));
            }
        }
    }
    if numel(s) == numel(target) && s != target {
        out.push(TransformExpr::Reshape(Box::new(e.clone()), target.to_vec()));
    }
    for axis in 0..s.len() {
        for size in divisors(s[axis]) {
            for index in 0..s[axis] / size {
                out.push(TransformExpr::Split(Box::new(e.clone()), size, axis, index));
            }
        }
    }
    out
}

const MAX_TRANSFORM_EVALS: usize = 4096;

/// Smallest transform `t` with `apply(t, [source]) ≈ target`, searched
/// breadth-first over the grammar in constructor order. The identity counts.
pub fn synthesize_transform(
    target: &Tensor,
    source: &Tensor,
    budget: GrammarBudget,
    tol: Tolerance,
) -> Option<TransformExpr> {
    if target.dtype() != source.dtype() {
        return None;
    }
    // Every grammar operator only moves or copies elements, so each target
    // element must occur in the source.
    let mut pool = source.data().to_vec();
    pool.sort_by(f64::total_cmp);
    let present = |x: f64| {
        let i = pool.partition_point(|&p| p < x);
        [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter_map(|j| pool.get(j))
            .any(|&p| (p - x).abs() <= tol.atol + tol.rtol * x.abs())
    };
    if !target.data().iter().all(|&x| present(x)) {
        return None;
    }
    let mut evaluated = 0usize;
    let mut frontier = vec![(TransformExpr::src(), source.clone())];
    for depth in 0..=budget.max_depth {
        let mut next = Vec::new();
        for (e, v) in &frontier {
            if v.shape() == target.shape() && tensors_match(v, target, tol) {
                return Some(e.clone());
            }
            if depth == budget.max_depth {
                continue;
            }
            for cand in steps(e, v.shape(), target.shape(), budget) {
                let last = depth + 1 == budget.max_depth;
                if last && cand.output_shape(&[source.shape().to_vec()]).as_deref() != Some(target.shape()) {
                    continue;
                }
                evaluated += 1;
                if evaluated > MAX_TRANSFORM_EVALS {
                    return None;
                }
                if let Ok(w) = cand.apply(&[source]) {
                    next.push((cand, w));
                }
            }
        }
        frontier = next;
    }
    None
}

/// Adds the aux e-nodes computing `t` over `bases` and returns the top class.
pub fn insert_auxiliary(g: &mut EGraph, bases: &[ClassId], t: &TransformExpr) -> Result<ClassId, EngineError> {
    let c = match t {
        TransformExpr::Src(i) => {
            return bases
                .get(*i)
                .map(|c| g.find(*c))
                .ok_or_else(|| EngineError::Structure(format!("transform source {i} missing")))
        }
        TransformExpr::Transpose(e, a, b) => {
            let inner = insert_auxiliary(g, bases, e)?;
            g.add_node(OpKind::Transpose, attr::axes(*a as i64, *b as i64), &[inner])
        }
        TransformExpr::Reshape(e, s) => {
            let inner = insert_auxiliary(g, bases, e)?;
            let s: Vec<i64> = s.iter().map(|&d| d as i64).collect();
            g.add_node(OpKind::Reshape, attr::shape(&s), &[inner])
        }
        TransformExpr::Concat(es, axis) => {
            let parts = es
                .iter()
                .map(|e| insert_auxiliary(g, bases, e))
                .collect::<Result<Vec<_>, _>>()?;
            g.add_node(OpKind::Concat, attr::axis(*axis as i64), &parts)
        }
        TransformExpr::Split(e, size, axis, index) => {
            let inner = insert_auxiliary(g, bases, e)?;
            let tuple = g.add_node(OpKind::Split, attr::split(*size as i64, *axis as i64), &[inner]);
            g.add_node(OpKind::GetItem, attr::index(*index as i64), &[tuple])
        }
    };
    if g.value(c).is_none() {
        let msg = g
            .eval_errors
            .iter()
            .rev()
            .find(|(k, _)| g.find(*k) == g.find(c))
            .map(|(_, e)| e.to_string())
            .unwrap_or_else(|| "no value".into());
        return Err(EngineError::Structure(format!(
            "auxiliary node {c} failed to evaluate: {msg}"
        )));
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(shape: Vec<usize>) -> Tensor {
        Tensor::from_fn(shape, |i| i as f64)
    }

    #[test]
    fn finds_transpose() {
        let b = iota(vec![2, 3]);
        let a = b.swap_axes(0, 1).unwrap();
        let t = synthesize_transform(&a, &b, GrammarBudget::default(), Tolerance::default()).unwrap();
        assert_eq!(t, TransformExpr::Transpose(Box::new(TransformExpr::src()), 0, 1));
    }

    #[test]
    fn identity_and_reshape() {
        let b = iota(vec![2, 3]);
        let t = synthesize_transform(&b, &b, GrammarBudget::default(), Tolerance::default()).unwrap();
        assert!(t.is_identity());
        let a = iota(vec![6]);
        let t = synthesize_transform(&a, &b, GrammarBudget::default(), Tolerance::default()).unwrap();
        assert_eq!(t, TransformExpr::Reshape(Box::new(TransformExpr::src()), vec![6]));
    }

    #[test]
    fn finds_split_piece() {
        let fused = iota(vec![6, 2]);
        let piece = fused.narrow(0, 4, 2);
        let t = synthesize_transform(&piece, &fused, GrammarBudget::default(), Tolerance::default()).unwrap();
        assert_eq!(t, TransformExpr::Split(Box::new(TransformExpr::src()), 2, 0, 2));
    }

    #[test]
    fn unrelated_values_have_no_transform() {
        let a = iota(vec![2, 3]);
        let b = a.map(|x| x + 5.0);
        assert!(synthesize_transform(&a, &b, GrammarBudget::default(), Tolerance::default()).is_none());
    }

    #[test]
    fn concat_inverse_round_trips() {
        let xs = [iota(vec![2, 3]), iota(vec![2, 3]).map(|x| -x)];
        let uneven = TransformExpr::Concat(vec![TransformExpr::Src(0), TransformExpr::Src(1)], 0);
        // parts differ in size along the axis, so no inverse
        assert!(uneven.inverse(&[vec![2, 3], vec![1, 3]]).is_none());
        let t = TransformExpr::Concat(vec![TransformExpr::Src(0), TransformExpr::Src(1)], 1);
        let shapes = vec![vec![2, 3], vec![2, 3]];
        let out = t.apply(&[&xs[0], &xs[1]]).unwrap();
        let inv = t.inverse(&shapes).unwrap();
        assert_eq!(inv[0].apply(&[&out]).unwrap(), xs[0]);
        assert_eq!(inv[1].apply(&[&out]).unwrap(), xs[1]);
    }
}
