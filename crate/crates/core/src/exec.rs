// SPDX-License-Identifier: Apache-2.0

//! Reference interpreter for the operator vocabulary.
//!
//! Every operator is evaluated in `f64` with a fixed, sequential summation
//! order, so repeated evaluation of the same inputs is bit-stable. The
//! interpreter doubles as the ground-truth oracle for rule validation and for
//! the soundness audits.

use std::collections::BTreeMap;

use crate::error::ExecError;
use crate::graph::ComputationGraph;
use crate::ops::{AttrValue, Attrs, OpKind};
use crate::tensor::{numel, strides, DType, Tensor, Value};

/// Static shape of a value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValueShape {
    Tensor { shape: Vec<usize>, dtype: DType },
    Tuple(Vec<Vec<usize>>),
}

impl ValueShape {
    pub fn of(v: &Value) -> ValueShape {
        match v {
            Value::Tensor(t) => ValueShape::Tensor {
                shape: t.shape().to_vec(),
                dtype: t.dtype(),
            },
            Value::Tuple(ts) => ValueShape::Tuple(ts.iter().map(|t| t.shape().to_vec()).collect()),
        }
    }

    pub fn tensor(&self) -> Result<&[usize], ExecError> {
        match self {
            ValueShape::Tensor { shape, .. } => Ok(shape),
            ValueShape::Tuple(_) => Err(ExecError::Shape("expected a tensor, found a tuple".into())),
        }
    }

    fn f64(shape: Vec<usize>) -> ValueShape {
        ValueShape::Tensor {
            shape,
            dtype: DType::F64,
        }
    }
}

fn resolve_axis(axis: i64, rank: usize) -> Result<usize, ExecError> {
    let r = rank as i64;
    let a = if axis < 0 { axis + r } else { axis };
    if a < 0 || a >= r {
        return Err(ExecError::Attr(format!("axis {axis} out of range for rank {rank}")));
    }
    Ok(a as usize)
}

fn int_attr(attrs: &Attrs, key: &str) -> Result<i64, ExecError> {
    attrs
        .int(key)
        .ok_or_else(|| ExecError::Attr(format!("missing integer attribute `{key}`")))
}

/// Resolves negative axes (and a `-1` reshape entry) against the input shapes.
pub fn normalize_attrs(op: OpKind, attrs: &mut Attrs, inputs: &[ValueShape]) -> Result<(), ExecError> {
    let rank0 = || inputs.first().map(|s| s.tensor().map(|t| t.len())).unwrap_or(Ok(0));
    match op {
        OpKind::Transpose => {
            let r = rank0()?;
            let axes = attrs.ints("axes").unwrap_or(&[]).to_vec();
            let resolved: Result<Vec<i64>, _> = axes.iter().map(|&a| resolve_axis(a, r).map(|x| x as i64)).collect();
            attrs.set("axes", AttrValue::Ints(resolved?));
        }
        OpKind::Concat | OpKind::Split => {
            let r = rank0()?;
            let a = resolve_axis(int_attr(attrs, "axis")?, r)?;
            attrs.set("axis", AttrValue::Int(a as i64));
        }
        OpKind::Chunk | OpKind::Softmax => {
            let r = rank0()?;
            let a = resolve_axis(int_attr(attrs, "dim")?, r)?;
            attrs.set("dim", AttrValue::Int(a as i64));
        }
        OpKind::Reshape => {
            let total = numel(inputs.first().map(|s| s.tensor()).unwrap_or(Ok(&[]))?);
            let target = attrs.ints("shape").unwrap_or(&[]).to_vec();
            let holes = target.iter().filter(|&&d| d == -1).count();
            if holes > 1 || target.iter().any(|&d| d < -1) {
                return Err(ExecError::Attr(format!("bad reshape target {target:?}")));
            }
            if holes == 1 {
                let known: i64 = target.iter().filter(|&&d| d != -1).product();
                if known == 0 || total as i64 % known != 0 {
                    return Err(ExecError::Shape(format!(
                        "cannot infer reshape {target:?} from {total} elements"
                    )));
                }
                let filled = target
                    .iter()
                    .map(|&d| if d == -1 { total as i64 / known } else { d })
                    .collect();
                attrs.set("shape", AttrValue::Ints(filled));
            }
        }
        _ => {}
    }
    Ok(())
}

pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>, ExecError> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(ExecError::Shape(format!("cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

fn matmul_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>, ExecError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(ExecError::Shape(format!("matmul needs rank >= 2, got {a:?} @ {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(ExecError::Shape(format!("matmul inner dims differ: {a:?} @ {b:?}")));
    }
    let mut out = broadcast_shapes(&a[..a.len() - 2], &b[..b.len() - 2])?;
    out.push(m);
    out.push(n);
    Ok(out)
}

fn attention_shape(q: &[usize], k: &[usize], v: &[usize]) -> Result<Vec<usize>, ExecError> {
    let r = q.len();
    if r < 2 || k.len() != r || v.len() != r {
        return Err(ExecError::Shape(format!("attention ranks differ: {q:?} {k:?} {v:?}")));
    }
    if q[..r - 2] != k[..r - 2] || q[..r - 2] != v[..r - 2] || q[r - 1] != k[r - 1] || k[r - 2] != v[r - 2] {
        return Err(ExecError::Shape(format!(
            "attention shapes incompatible: {q:?} {k:?} {v:?}"
        )));
    }
    let mut out = q.to_vec();
    out[r - 1] = v[r - 1];
    Ok(out)
}

fn fused_layout(q: &[usize], attrs: &Attrs) -> Result<(usize, usize, usize, usize), ExecError> {
    match q.len() {
        4 => Ok((q[0], q[1], q[2], q[3])),
        3 => {
            let h = attrs
                .int("heads")
                .ok_or_else(|| ExecError::Attr("rank-3 fused_attention needs `heads`".into()))?;
            let h = h as usize;
            if h == 0 || !q[2].is_multiple_of(h) {
                return Err(ExecError::Shape(format!("hidden {} not divisible by heads {h}", q[2])));
            }
            Ok((q[0], q[1], h, q[2] / h))
        }
        _ => Err(ExecError::Shape(format!(
            "fused_attention expects rank 3 or 4, got {q:?}"
        ))),
    }
}

/// Static shape of `op` applied to inputs of the given shapes.
pub fn infer_shape(op: OpKind, attrs: &Attrs, inputs: &[ValueShape]) -> Result<ValueShape, ExecError> {
    let (lo, hi) = op.arity();
    if inputs.len() < lo || hi.is_some_and(|h| inputs.len() > h) {
        return Err(ExecError::Shape(format!("{op} got {} inputs", inputs.len())));
    }
    let t = |i: usize| inputs[i].tensor();
    Ok(match op {
        OpKind::Input => return Err(ExecError::Attr("input shapes come from bound values".into())),
        OpKind::Constant => {
            let s = attrs
                .ints("shape")
                .ok_or_else(|| ExecError::Attr("constant needs `shape`".into()))?;
            ValueShape::f64(s.iter().map(|&d| d as usize).collect())
        }
        OpKind::Add | OpKind::Mul => ValueShape::f64(broadcast_shapes(t(0)?, t(1)?)?),
        OpKind::Matmul => ValueShape::f64(matmul_shape(t(0)?, t(1)?)?),
        OpKind::Mm => {
            if t(0)?.len() != 2 || t(1)?.len() != 2 {
                return Err(ExecError::Shape("mm expects rank-2 operands".into()));
            }
            ValueShape::f64(matmul_shape(t(0)?, t(1)?)?)
        }
        OpKind::Addmm => {
            if t(1)?.len() != 2 || t(2)?.len() != 2 {
                return Err(ExecError::Shape("addmm expects rank-2 matrices".into()));
            }
            let m = matmul_shape(t(1)?, t(2)?)?;
            let out = broadcast_shapes(&m, t(0)?)?;
            if out != m {
                return Err(ExecError::Shape("addmm bias must broadcast to the product".into()));
            }
            ValueShape::f64(out)
        }
        OpKind::Linear => {
            let (x, w) = (t(0)?, t(1)?);
            if x.is_empty() || w.len() != 2 || x[x.len() - 1] != w[1] {
                return Err(ExecError::Shape(format!(
                    "linear shapes incompatible: {x:?}, weight {w:?}"
                )));
            }
            let mut out = x.to_vec();
            *out.last_mut().unwrap() = w[0];
            if inputs.len() == 3 {
                let b = broadcast_shapes(&out, t(2)?)?;
                if b != out {
                    return Err(ExecError::Shape("linear bias must broadcast to the output".into()));
                }
            }
            ValueShape::f64(out)
        }
        OpKind::Transpose => {
            let s = t(0)?;
            let axes = attrs.ints("axes").unwrap_or(&[]);
            if axes.len() != 2 || axes.iter().any(|&a| a < 0 || a as usize >= s.len()) {
                return Err(ExecError::Shape(format!("transpose axes {axes:?} invalid for {s:?}")));
            }
            let mut out = s.to_vec();
            out.swap(axes[0] as usize, axes[1] as usize);
            ValueShape::Tensor {
                shape: out,
                dtype: dtype_of(&inputs[0]),
            }
        }
        OpKind::Reshape => {
            let s = t(0)?;
            let target = attrs.ints("shape").unwrap_or(&[]);
            if target.iter().any(|&d| d < 0) {
                return Err(ExecError::Attr(format!("unresolved reshape target {target:?}")));
            }
            let out: Vec<usize> = target.iter().map(|&d| d as usize).collect();
            if numel(&out) != numel(s) {
                return Err(ExecError::Shape(format!("cannot reshape {s:?} into {out:?}")));
            }
            ValueShape::Tensor {
                shape: out,
                dtype: dtype_of(&inputs[0]),
            }
        }
        OpKind::Concat => {
            let axis = int_attr(attrs, "axis")?;
            let first = t(0)?;
            if axis < 0 || axis as usize >= first.len() {
                return Err(ExecError::Shape(format!("concat axis {axis} out of range")));
            }
            let axis = axis as usize;
            let mut out = first.to_vec();
            out[axis] = 0;
            for i in 0..inputs.len() {
                let s = t(i)?;
                if s.len() != first.len() || (0..s.len()).any(|d| d != axis && s[d] != first[d]) {
                    return Err(ExecError::Shape(format!("concat shape mismatch {first:?} vs {s:?}")));
                }
                out[axis] += s[axis];
            }
            ValueShape::f64(out)
        }
        OpKind::Split | OpKind::Chunk => {
            let s = t(0)?;
            let (axis, size) = split_params(op, attrs, s)?;
            let mut parts = Vec::new();
            let mut start = 0;
            while start < s[axis] {
                let len = size.min(s[axis] - start);
                let mut p = s.to_vec();
                p[axis] = len;
                parts.push(p);
                start += len;
            }
            ValueShape::Tuple(parts)
        }
        OpKind::GetItem => {
            let idx = int_attr(attrs, "index")? as usize;
            match &inputs[0] {
                ValueShape::Tuple(parts) => ValueShape::f64(
                    parts
                        .get(idx)
                        .cloned()
                        .ok_or_else(|| ExecError::Shape(format!("get_item index {idx} of {} parts", parts.len())))?,
                ),
                ValueShape::Tensor { .. } => return Err(ExecError::Shape("get_item expects a tuple".into())),
            }
        }
        OpKind::Embedding => {
            let (idx, w) = (t(0)?, t(1)?);
            if w.len() != 2 {
                return Err(ExecError::Shape("embedding table must be rank 2".into()));
            }
            let mut out = idx.to_vec();
            out.push(w[1]);
            ValueShape::f64(out)
        }
        OpKind::LayerNorm => {
            let x = t(0)?;
            let last = *x
                .last()
                .ok_or_else(|| ExecError::Shape("layernorm of a scalar".into()))?;
            for i in 1..inputs.len() {
                if t(i)? != [last] {
                    return Err(ExecError::Shape(
                        "layernorm affine params must match the last dim".into(),
                    ));
                }
            }
            ValueShape::f64(x.to_vec())
        }
        OpKind::Gelu => ValueShape::f64(t(0)?.to_vec()),
        OpKind::Softmax => {
            let s = t(0)?;
            let d = int_attr(attrs, "dim")?;
            if d < 0 || d as usize >= s.len() {
                return Err(ExecError::Shape(format!("softmax dim {d} out of range")));
            }
            ValueShape::f64(s.to_vec())
        }
        OpKind::ScaledDotProductAttention => ValueShape::f64(attention_shape(t(0)?, t(1)?, t(2)?)?),
        OpKind::FusedAttention => {
            let (q, k, v) = (t(0)?, t(1)?, t(2)?);
            if q.len() != k.len() || q.len() != v.len() {
                return Err(ExecError::Shape("fused_attention ranks differ".into()));
            }
            let (b, sq, h, d) = fused_layout(q, attrs)?;
            let (bk, sk, hk, dk) = fused_layout(k, attrs)?;
            let (bv, sv, hv, _) = fused_layout(v, attrs)?;
            if b != bk || b != bv || h != hk || h != hv || d != dk || sk != sv {
                return Err(ExecError::Shape(format!(
                    "fused_attention shapes incompatible: {q:?} {k:?} {v:?}"
                )));
            }
            let mut out = q.to_vec();
            *out.last_mut().unwrap() = v[v.len() - 1];
            let _ = sq;
            ValueShape::f64(out)
        }
        OpKind::ReduceAdd => {
            let first = t(0)?;
            for i in 1..inputs.len() {
                if t(i)? != first {
                    return Err(ExecError::Shape("reduce_add operands must share a shape".into()));
                }
            }
            ValueShape::f64(first.to_vec())
        }
    })
}

fn dtype_of(s: &ValueShape) -> DType {
    match s {
        ValueShape::Tensor { dtype, .. } => *dtype,
        ValueShape::Tuple(_) => DType::F64,
    }
}

fn split_params(op: OpKind, attrs: &Attrs, s: &[usize]) -> Result<(usize, usize), ExecError> {
    let (axis_key, axis) = if op == OpKind::Split {
        ("axis", int_attr(attrs, "axis")?)
    } else {
        ("dim", int_attr(attrs, "dim")?)
    };
    if axis < 0 || axis as usize >= s.len() {
        return Err(ExecError::Shape(format!(
            "{op}.{axis_key} {axis} out of range for {s:?}"
        )));
    }
    let axis = axis as usize;
    let size = if op == OpKind::Split {
        int_attr(attrs, "size")?
    } else {
        let chunks = int_attr(attrs, "chunks")?;
        if chunks <= 0 {
            return Err(ExecError::Attr("chunks must be positive".into()));
        }
        // last chunk smaller when the dim is not divisible
        (s[axis] as i64 + chunks - 1) / chunks
    };
    if size <= 0 {
        return Err(ExecError::Attr(format!("{op} piece size must be positive")));
    }
    Ok((axis, size as usize))
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, ExecError> {
    let out = broadcast_shapes(a.shape(), b.shape())?;
    let r = out.len();
    let pad = |s: &[usize]| {
        let mut p = vec![1; r - s.len()];
        p.extend_from_slice(s);
        p
    };
    let (sa, sb) = (pad(a.shape()), pad(b.shape()));
    let (st_a, st_b) = (strides(&sa), strides(&sb));
    let mut idx = vec![0usize; r];
    let n = numel(&out);
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..r {
            if sa[d] != 1 {
                oa += idx[d] * st_a[d];
            }
            if sb[d] != 1 {
                ob += idx[d] * st_b[d];
            }
        }
        data.push(f(a.data()[oa], b.data()[ob]));
        for d in (0..r).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out, data)
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, ExecError> {
    let out = matmul_shape(a.shape(), b.shape())?;
    let (ra, rb) = (a.rank(), b.rank());
    let (m, k, n) = (a.shape()[ra - 2], a.shape()[ra - 1], b.shape()[rb - 1]);
    let batch = &out[..out.len() - 2];
    let nb = numel(batch);
    let pad = |s: &[usize]| {
        let mut p = vec![1; batch.len() - s.len()];
        p.extend_from_slice(s);
        p
    };
    let (ba, bb) = (pad(&a.shape()[..ra - 2]), pad(&b.shape()[..rb - 2]));
    let (sta, stb) = (strides(&ba), strides(&bb));
    let bst = strides(batch);
    let mut data = vec![0.0; nb * m * n];
    for bi in 0..nb {
        let (mut oa, mut ob) = (0, 0);
        for d in 0..batch.len() {
            let i = (bi / bst[d]) % batch[d];
            if ba[d] != 1 {
                oa += i * sta[d];
            }
            if bb[d] != 1 {
                ob += i * stb[d];
            }
        }
        let (pa, pb) = (&a.data()[oa * m * k..], &b.data()[ob * k * n..]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += pa[i * k + l] * pb[l * n + j];
                }
                data[bi * m * n + i * n + j] = acc;
            }
        }
    }
    Tensor::new(out, data)
}

/// `x @ w^T (+ b)` with `w` stored as `[out, in]`.
fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor, ExecError> {
    let (inn, out) = (w.shape()[1], w.shape()[0]);
    let rows = x.len() / inn.max(1);
    let mut data = vec![0.0; rows * out];
    for r in 0..rows {
        for o in 0..out {
            let mut acc = 0.0;
            for i in 0..inn {
                acc += x.data()[r * inn + i] * w.data()[o * inn + i];
            }
            data[r * out + o] = acc;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out;
    let y = Tensor::new(shape, data)?;
    match b {
        Some(b) => broadcast_binary(&y, b, |p, q| p + q),
        None => Ok(y),
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn softmax(x: &Tensor, dim: usize) -> Result<Tensor, ExecError> {
    let s = x.shape();
    let outer: usize = s[..dim].iter().product();
    let len = s[dim];
    let inner: usize = s[dim + 1..].iter().product();
    let mut data = x.data().to_vec();
    let mut row = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, r) in row.iter_mut().enumerate() {
                *r = data[(o * len + j) * inner + i];
            }
            softmax_in_place(&mut row);
            for (j, r) in row.iter().enumerate() {
                data[(o * len + j) * inner + i] = *r;
            }
        }
    }
    Tensor::new(s.to_vec(), data)
}

fn layernorm(x: &Tensor, gamma: Option<&Tensor>, beta: Option<&Tensor>, eps: f64) -> Result<Tensor, ExecError> {
    let n = *x.shape().last().unwrap();
    let mut data = Vec::with_capacity(x.len());
    for row in x.data().chunks(n.max(1)) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, v) in row.iter().enumerate() {
            let mut y = (v - mean) * inv;
            if let Some(g) = gamma {
                y *= g.data()[j];
            }
            if let Some(b) = beta {
                y += b.data()[j];
            }
            data.push(y);
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

pub fn gelu_exact(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Attention over layout `[..., seq, dim]`.
fn sdpa(q: &Tensor, k: &Tensor, v: &Tensor, scale: Option<f64>) -> Result<Tensor, ExecError> {
    let out = attention_shape(q.shape(), k.shape(), v.shape())?;
    let r = q.rank();
    let (sq, d) = (q.shape()[r - 2], q.shape()[r - 1]);
    let (sk, dv) = (k.shape()[r - 2], v.shape()[r - 1]);
    let scale = scale.unwrap_or(1.0 / (d as f64).sqrt());
    let groups = numel(&q.shape()[..r - 2]);
    let mut data = vec![0.0; groups * sq * dv];
    let mut scores = vec![0.0; sk];
    for g in 0..groups {
        let (qb, kb, vb) = (g * sq * d, g * sk * d, g * sk * dv);
        for i in 0..sq {
            for (j, s) in scores.iter_mut().enumerate() {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += q.data()[qb + i * d + l] * k.data()[kb + j * d + l];
                }
                *s = acc * scale;
            }
            softmax_in_place(&mut scores);
            for c in 0..dv {
                let mut acc = 0.0;
                for (j, p) in scores.iter().enumerate() {
                    acc += p * v.data()[vb + j * dv + c];
                }
                data[(g * sq + i) * dv + c] = acc;
            }
        }
    }
    Tensor::new(out, data)
}

/// Attention over layout `[batch, seq, heads, dim]` (or `[batch, seq, heads*dim]`
/// with a `heads` attribute), indexing heads in place.
fn fused_attention(q: &Tensor, k: &Tensor, v: &Tensor, attrs: &Attrs) -> Result<Tensor, ExecError> {
    let (b, sq, h, d) = fused_layout(q.shape(), attrs)?;
    let (_, sk, _, _) = fused_layout(k.shape(), attrs)?;
    let dv = *v.shape().last().unwrap() / if v.rank() == 3 { h } else { 1 };
    let scale = attrs.float("scale").unwrap_or(1.0 / (d as f64).sqrt());
    let qi = |bi: usize, s: usize, hi: usize, l: usize| q.data()[((bi * sq + s) * h + hi) * d + l];
    let ki = |bi: usize, s: usize, hi: usize, l: usize| k.data()[((bi * sk + s) * h + hi) * d + l];
    let vi = |bi: usize, s: usize, hi: usize, l: usize| v.data()[((bi * sk + s) * h + hi) * dv + l];
    let mut data = vec![0.0; b * sq * h * dv];
    let mut scores = vec![0.0; sk];
    for bi in 0..b {
        for hi in 0..h {
            for i in 0..sq {
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for l in 0..d {
                        acc += qi(bi, i, hi, l) * ki(bi, j, hi, l);
                    }
                    *s = acc * scale;
                }
                softmax_in_place(&mut scores);
                for c in 0..dv {
                    let mut acc = 0.0;
                    for (j, p) in scores.iter().enumerate() {
                        acc += p * vi(bi, j, hi, c);
                    }
                    data[((bi * sq + i) * h + hi) * dv + c] = acc;
                }
            }
        }
    }
    let mut shape = q.shape().to_vec();
    *shape.last_mut().unwrap() = *v.shape().last().unwrap();
    Tensor::new(shape, data)
}

fn embedding(idx: &Tensor, w: &Tensor) -> Result<Tensor, ExecError> {
    let (rows, width) = (w.shape()[0], w.shape()[1]);
    let mut data = Vec::with_capacity(idx.len() * width);
    for &i in idx.data() {
        if i.fract() != 0.0 || i < 0.0 || i as usize >= rows {
            return Err(ExecError::Domain(format!("embedding index {i} outside [0, {rows})")));
        }
        let r = i as usize;
        data.extend_from_slice(&w.data()[r * width..(r + 1) * width]);
    }
    let mut shape = idx.shape().to_vec();
    shape.push(width);
    Tensor::new(shape, data)
}

/// Evaluates one operator on concrete inputs.
pub fn eval_op(op: OpKind, attrs: &Attrs, inputs: &[&Value]) -> Result<Value, ExecError> {
    let shapes: Vec<ValueShape> = inputs.iter().map(|v| ValueShape::of(v)).collect();
    infer_shape(op, attrs, &shapes)?;
    let t = |i: usize| inputs[i].as_tensor();
    let v = match op {
        OpKind::Input => unreachable!("rejected by infer_shape"),
        OpKind::Constant => {
            let value = attrs
                .float("value")
                .ok_or_else(|| ExecError::Attr("constant needs `value`".into()))?;
            let shape = attrs.ints("shape").unwrap_or(&[]).iter().map(|&d| d as usize).collect();
            Tensor::full(shape, value)
        }
        OpKind::Add => broadcast_binary(t(0)?, t(1)?, |a, b| a + b)?,
        OpKind::Mul => broadcast_binary(t(0)?, t(1)?, |a, b| a * b)?,
        OpKind::Matmul | OpKind::Mm => matmul(t(0)?, t(1)?)?,
        // addmm(b, a, c) is exactly add(mm(a, c), b)
        OpKind::Addmm => broadcast_binary(&matmul(t(1)?, t(2)?)?, t(0)?, |p, q| p + q)?,
        OpKind::Linear => linear(t(0)?, t(1)?, if inputs.len() == 3 { Some(t(2)?) } else { None })?,
        OpKind::Transpose => {
            let axes = attrs.ints("axes").unwrap();
            t(0)?.swap_axes(axes[0] as usize, axes[1] as usize)?
        }
        OpKind::Reshape => t(0)?.reshape(attrs.ints("shape").unwrap().iter().map(|&d| d as usize).collect())?,
        OpKind::Concat => {
            let parts: Result<Vec<&Tensor>, _> = (0..inputs.len()).map(t).collect();
            Tensor::concat(&parts?, int_attr(attrs, "axis")? as usize)?
        }
        OpKind::Split | OpKind::Chunk => {
            let x = t(0)?;
            let (axis, size) = split_params(op, attrs, x.shape())?;
            return Ok(Value::Tuple(x.split(size, axis)?));
        }
        OpKind::GetItem => match inputs[0] {
            Value::Tuple(ts) => ts[int_attr(attrs, "index")? as usize].clone(),
            Value::Tensor(_) => return Err(ExecError::Shape("get_item expects a tuple".into())),
        },
        OpKind::Embedding => embedding(t(0)?, t(1)?)?,
        OpKind::LayerNorm => layernorm(
            t(0)?,
            if inputs.len() > 1 { Some(t(1)?) } else { None },
            if inputs.len() > 2 { Some(t(2)?) } else { None },
            attrs.float("eps").unwrap_or(crate::ops::DEFAULT_LAYERNORM_EPS),
        )?,
        OpKind::Gelu => match attrs.str("approximate").unwrap_or("exact") {
            "tanh" => t(0)?.map(gelu_tanh),
            _ => t(0)?.map(gelu_exact),
        },
        OpKind::Softmax => softmax(t(0)?, int_attr(attrs, "dim")? as usize)?,
        OpKind::ScaledDotProductAttention => sdpa(t(0)?, t(1)?, t(2)?, attrs.float("scale"))?,
        OpKind::FusedAttention => fused_attention(t(0)?, t(1)?, t(2)?, attrs)?,
        OpKind::ReduceAdd => {
            let mut acc = t(0)?.clone();
            for i in 1..inputs.len() {
                acc = broadcast_binary(&acc, t(i)?, |a, b| a + b)?;
            }
            acc
        }
    };
    Ok(Value::Tensor(v))
}

/// Runs a graph in topological order. Input values come from the graph file
/// unless overridden in `bindings`.
pub fn run_graph(g: &ComputationGraph, bindings: &BTreeMap<u64, Value>) -> Result<BTreeMap<u64, Value>, ExecError> {
    let order = g.topo_order().map_err(|e| ExecError::Shape(e.to_string()))?;
    let mut values: BTreeMap<u64, Value> = BTreeMap::new();
    for id in order {
        let node = &g.nodes[&id];
        let v = if node.op == OpKind::Input {
            bindings
                .get(&id)
                .cloned()
                .or_else(|| g.inputs.get(&id).cloned().map(Value::Tensor))
                .ok_or(ExecError::Unbound(id))?
        } else {
            let args: Vec<&Value> = node.children.iter().map(|c| &values[c]).collect();
            eval_op(node.op, &node.attrs, &args).map_err(|e| e.at(id))?
        };
        values.insert(id, v);
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::attr;

    fn tv(shape: Vec<usize>, data: Vec<f64>) -> Value {
        Value::Tensor(Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn transpose_permutes() {
        let x = Value::Tensor(Tensor::from_fn(vec![2, 3, 4], |i| i as f64));
        let y = eval_op(OpKind::Transpose, &attr::axes(1, 2), &[&x]).unwrap();
        let y = y.as_tensor().unwrap();
        assert_eq!(y.shape(), &[2, 4, 3]);
        // y[1, 2, 0] = x[1, 0, 2]
        assert_eq!(y.data()[12 + 2 * 3], 12.0 + 2.0);
    }

    #[test]
    fn addmm_is_add_of_mm() {
        let a = tv(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 1.5, -1.0]);
        let c = tv(vec![3, 2], vec![0.3, 1.0, -0.7, 2.0, 1.1, 0.0]);
        let b = tv(vec![2], vec![0.25, -4.0]);
        let fused = eval_op(OpKind::Addmm, &attr::none(), &[&b, &a, &c]).unwrap();
        let mm = eval_op(OpKind::Mm, &attr::none(), &[&a, &c]).unwrap();
        let dec = eval_op(OpKind::Add, &attr::none(), &[&mm, &b]).unwrap();
        assert_eq!(fused, dec);
    }

    #[test]
    fn mm_by_hand() {
        let x = tv(vec![1, 2], vec![1.0, 2.0]);
        let w = tv(vec![2, 1], vec![1.0, 1.0]);
        let y = eval_op(OpKind::Mm, &attr::none(), &[&x, &w]).unwrap();
        assert_eq!(y, tv(vec![1, 1], vec![3.0]));
    }

    #[test]
    fn chunk_uneven_last_smaller() {
        let x = Value::Tensor(Tensor::from_fn(vec![1, 10], |i| i as f64));
        let y = eval_op(OpKind::Chunk, &attr::chunk(3, 1), &[&x]).unwrap();
        match y {
            Value::Tuple(ts) => assert_eq!(ts.iter().map(|t| t.shape()[1]).collect::<Vec<_>>(), vec![4, 4, 2]),
            _ => panic!(),
        }
    }

    #[test]
    fn embedding_out_of_range_is_domain_error() {
        let idx = Value::Tensor(Tensor::index(vec![2], vec![0, 5]).unwrap());
        let w = Value::Tensor(Tensor::full(vec![3, 2], 1.0));
        assert!(matches!(
            eval_op(OpKind::Embedding, &attr::none(), &[&idx, &w]),
            Err(ExecError::Domain(_))
        ));
    }

    #[test]
    fn shape_errors_surface() {
        let a = tv(vec![2, 3], vec![0.0; 6]);
        let b = tv(vec![2, 3], vec![0.0; 6]);
        assert!(matches!(
            eval_op(OpKind::Mm, &attr::none(), &[&a, &b]),
            Err(ExecError::Shape(_))
        ));
    }

    #[test]
    fn gelu_variants_differ_slightly() {
        let gap = (gelu_exact(2.7) - gelu_tanh(2.7)).abs();
        assert!(gap > 1e-4 && gap < 1e-3, "gap {gap}");
        assert_eq!(gelu_exact(0.0), 0.0);
    }

    #[test]
    fn normalize_negative_dims() {
        let mut a = attr::chunk(3, -1);
        normalize_attrs(OpKind::Chunk, &mut a, &[ValueShape::f64(vec![1, 4, 12])]).unwrap();
        assert_eq!(a.int("dim"), Some(2));
        let mut r = attr::shape(&[-1, 4]);
        normalize_attrs(OpKind::Reshape, &mut r, &[ValueShape::f64(vec![2, 6])]).unwrap();
        assert_eq!(r.ints("shape"), Some(&[3i64, 4][..]));
    }
}
