// SPDX-License-Identifier: Apache-2.0

//! Rearrangement rules checked on symbolic arrays: every input element is a
//! distinct symbol, so two sides agree exactly when they move the same
//! symbols to the same positions. Index arithmetic here is written
//! separately from the numeric tensor code.

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::{shapes_of, RejectReason, Symbolic, ValidationConfig, Verdict};
use crate::ops::{Attrs, OpKind};
use crate::pattern::{Pattern, Rule};
use crate::shape::{solve_shapes, Solved};

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct SymTensor {
    pub shape: Vec<usize>,
    pub data: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum SymValue {
    Tensor(SymTensor),
    Tuple(Vec<SymTensor>),
}

enum Fail {
    Unsupported,
    Shape,
}

fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        idx[d] = i % shape[d];
        i /= shape[d];
    }
    idx
}

fn ravel(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter().zip(shape).fold(0, |acc, (&i, &n)| acc * n + i)
}

fn count(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn gather(shape: Vec<usize>, src: &SymTensor, f: impl Fn(&[usize]) -> Vec<usize>) -> SymTensor {
    let data = (0..count(&shape))
        .map(|i| src.data[ravel(&f(&unravel(i, &shape)), &src.shape)])
        .collect();
    SymTensor { shape, data }
}

fn axis(a: i64, rank: usize) -> Result<usize, Fail> {
    let r = rank as i64;
    let x = if a < 0 { a + r } else { a };
    if x < 0 || x >= r {
        return Err(Fail::Shape);
    }
    Ok(x as usize)
}

fn int(attrs: &Attrs, k: &str) -> Result<i64, Fail> {
    attrs.int(k).ok_or(Fail::Shape)
}

/// Pieces along `ax` of length `size` (last may be shorter).
fn pieces(t: &SymTensor, size: usize, ax: usize) -> Result<Vec<SymTensor>, Fail> {
    if size == 0 {
        return Err(Fail::Shape);
    }
    let n = t.shape[ax];
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let len = size.min(n - start);
        let mut shape = t.shape.clone();
        shape[ax] = len;
        out.push(gather(shape, t, |idx| {
            let mut j = idx.to_vec();
            j[ax] += start;
            j
        }));
        start += len;
    }
    Ok(out)
}

fn sym_eval(p: &Pattern, env: &BTreeMap<String, SymTensor>) -> Result<SymValue, Fail> {
    let (op, attrs, children) = match p {
        Pattern::Var(v) => return env.get(v).cloned().map(SymValue::Tensor).ok_or(Fail::Unsupported),
        Pattern::Op { op, attrs, children } => (*op, attrs, children),
    };
    let args = children
        .iter()
        .map(|c| sym_eval(c, env))
        .collect::<Result<Vec<_>, _>>()?;
    let tensor = |i: usize| match &args[i] {
        SymValue::Tensor(t) => Ok(t),
        SymValue::Tuple(_) => Err(Fail::Shape),
    };
    let out = match op {
        OpKind::Transpose => {
            let t = tensor(0)?;
            let ax = attrs.ints("axes").ok_or(Fail::Shape)?;
            let (a, b) = (axis(ax[0], t.shape.len())?, axis(ax[1], t.shape.len())?);
            let mut shape = t.shape.clone();
            shape.swap(a, b);
            gather(shape, t, |idx| {
                let mut j = idx.to_vec();
                j.swap(a, b);
                j
            })
        }
        OpKind::Reshape => {
            let t = tensor(0)?;
            let target = attrs.ints("shape").ok_or(Fail::Shape)?;
            let known: i64 = target.iter().filter(|&&d| d >= 0).product();
            let shape: Vec<usize> = target
                .iter()
                .map(|&d| {
                    if d < 0 {
                        count(&t.shape) / known.max(1) as usize
                    } else {
                        d as usize
                    }
                })
                .collect();
            if count(&shape) != count(&t.shape) {
                return Err(Fail::Shape);
            }
            SymTensor {
                shape,
                data: t.data.clone(),
            }
        }
        OpKind::Concat => {
            let parts: Vec<&SymTensor> = (0..args.len()).map(tensor).collect::<Result<_, _>>()?;
            let ax = axis(int(attrs, "axis")?, parts[0].shape.len())?;
            let mut shape = parts[0].shape.clone();
            shape[ax] = parts.iter().map(|p| p.shape[ax]).sum();
            let mut offsets = Vec::new();
            let mut acc = 0;
            for p in &parts {
                if p.shape.len() != shape.len() || (0..shape.len()).any(|d| d != ax && p.shape[d] != shape[d]) {
                    return Err(Fail::Shape);
                }
                offsets.push(acc);
                acc += p.shape[ax];
            }
            let data = (0..count(&shape))
                .map(|i| {
                    let mut idx = unravel(i, &shape);
                    let k = offsets.iter().rposition(|&o| o <= idx[ax]).unwrap();
                    idx[ax] -= offsets[k];
                    parts[k].data[ravel(&idx, &parts[k].shape)]
                })
                .collect();
            SymTensor { shape, data }
        }
        OpKind::Split => {
            let t = tensor(0)?;
            let ax = axis(int(attrs, "axis")?, t.shape.len())?;
            return Ok(SymValue::Tuple(pieces(t, int(attrs, "size")?.max(0) as usize, ax)?));
        }
        OpKind::Chunk => {
            let t = tensor(0)?;
            let ax = axis(int(attrs, "dim")?, t.shape.len())?;
            let k = int(attrs, "chunks")?.max(1) as usize;
            return Ok(SymValue::Tuple(pieces(t, t.shape[ax].div_ceil(k), ax)?));
        }
        OpKind::GetItem => match &args[0] {
            SymValue::Tuple(ts) => ts.get(int(attrs, "index")? as usize).cloned().ok_or(Fail::Shape)?,
            SymValue::Tensor(_) => return Err(Fail::Shape),
        },
        _ => return Err(Fail::Unsupported),
    };
    Ok(SymValue::Tensor(out))
}

fn fresh_env(shapes: &BTreeMap<String, Vec<usize>>) -> BTreeMap<String, SymTensor> {
    let mut next = 0u64;
    shapes
        .iter()
        .map(|(v, s)| {
            let n = count(s) as u64;
            let t = SymTensor {
                shape: s.clone(),
                data: (next..next + n).collect(),
            };
            next += n;
            (v.clone(), t)
        })
        .collect()
}

/// Checks the rule on several solved shape instantiations.
pub fn verify_rearrangement<R: Rng>(rule: &Rule, cfg: &ValidationConfig, rng: &mut R) -> Symbolic {
    for _ in 0..cfg.instantiations {
        let asg = match solve_shapes(&rule.preconditions, cfg.max_free, rng) {
            Solved::Sat(a) => a,
            Solved::Unsat => {
                return Symbolic::Decided(Verdict::Rejected {
                    reason: RejectReason::Vacuous,
                    detail: "preconditions are unsatisfiable".into(),
                    counterexample: None,
                })
            }
        };
        let shapes = shapes_of(rule, &asg);
        let env = fresh_env(&shapes);
        match (sym_eval(&rule.lhs, &env), sym_eval(&rule.rhs, &env)) {
            (Ok(l), Ok(r)) => {
                if l != r {
                    let text: Vec<String> = shapes.iter().map(|(v, s)| format!("?{v}:{s:?}")).collect();
                    return Symbolic::Decided(Verdict::Rejected {
                        reason: RejectReason::Counterexample,
                        detail: format!("element placement differs at {}", text.join(" ")),
                        counterexample: Some(hex::encode(&Sha256::digest(text.join(" ").as_bytes())[..8])),
                    });
                }
            }
            _ => return Symbolic::Unknown,
        }
    }
    Symbolic::Decided(Verdict::FormallyVerified)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shape::{ShapeConstraint, SymDim};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn check(l: &str, r: &str, pre: Vec<ShapeConstraint>) -> Symbolic {
        let rule = Rule::new(Pattern::parse(l).unwrap(), Pattern::parse(r).unwrap(), pre);
        verify_rearrangement(&rule, &ValidationConfig::default(), &mut ChaCha8Rng::seed_from_u64(7))
    }

    fn decided(s: Symbolic) -> Verdict {
        match s {
            Symbolic::Decided(v) => v,
            Symbolic::Unknown => panic!("undecided"),
        }
    }

    #[test]
    fn split_equals_chunk_when_sizes_agree() {
        let pre = vec![
            ShapeConstraint::Rank("a".into(), 3),
            ShapeConstraint::Eq(SymDim::dim("a", 2), SymDim::Const(1536)),
        ];
        let v = decided(check(
            "(get_item :index 2 (split :axis 2 :size 512 ?a))",
            "(get_item :index 2 (chunk :chunks 3 :dim 2 ?a))",
            pre.clone(),
        ));
        assert_eq!(v, Verdict::FormallyVerified);
        let v = decided(check(
            "(get_item :index 2 (split :axis 2 :size 500 ?a))",
            "(get_item :index 2 (chunk :chunks 3 :dim 2 ?a))",
            pre,
        ));
        assert!(v.is_counterexample());
    }

    #[test]
    fn double_transpose_is_identity() {
        let pre = vec![ShapeConstraint::Rank("a".into(), 3)];
        let v = decided(check("(transpose :axes [1 2] (transpose :axes [1 2] ?a))", "?a", pre));
        assert_eq!(v, Verdict::FormallyVerified);
    }

    #[test]
    fn transpose_is_not_reshape() {
        let pre = vec![
            ShapeConstraint::Rank("a".into(), 2),
            ShapeConstraint::Eq(SymDim::dim("a", 0), SymDim::Const(2)),
            ShapeConstraint::Eq(SymDim::dim("a", 1), SymDim::Const(3)),
        ];
        let v = decided(check("(transpose :axes [0 1] ?a)", "(reshape :shape [3 2] ?a)", pre));
        assert!(v.is_counterexample());
    }
}
