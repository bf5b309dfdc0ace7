// SPDX-License-Identifier: Apache-2.0

//! Dense row-major tensors, tuple values and tolerance-based comparison.

use std::fmt;

use crate::error::ExecError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F64,
    I64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F64 => "f64",
            DType::I64 => "i64",
        }
    }

    pub fn from_name(s: &str) -> Option<DType> {
        match s {
            "f64" => Some(DType::F64),
            "i64" => Some(DType::I64),
            _ => None,
        }
    }
}

/// A dense tensor. Integer tensors keep their elements in the same `f64`
/// buffer; every element is integral and within the exactly-representable range.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor, ExecError> {
        Tensor::with_dtype(shape, DType::F64, data)
    }

    pub fn with_dtype(shape: Vec<usize>, dtype: DType, data: Vec<f64>) -> Result<Tensor, ExecError> {
        if numel(&shape) != data.len() {
            return Err(ExecError::Shape(format!(
                "shape {:?} holds {} elements, buffer has {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        if dtype == DType::I64 && data.iter().any(|v| v.fract() != 0.0 || !v.is_finite()) {
            return Err(ExecError::Domain("i64 tensor with non-integral element".into()));
        }
        Ok(Tensor { shape, dtype, data })
    }

    pub fn index(shape: Vec<usize>, data: Vec<i64>) -> Result<Tensor, ExecError> {
        Tensor::with_dtype(shape, DType::I64, data.into_iter().map(|v| v as f64).collect())
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let n = numel(&shape);
        Tensor {
            shape,
            dtype: DType::F64,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::full(vec![], value)
    }

    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> f64) -> Tensor {
        let data = (0..numel(&shape)).map(f).collect();
        Tensor {
            shape,
            dtype: DType::F64,
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            dtype: DType::F64,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Swaps two axes.
    pub fn swap_axes(&self, a: usize, b: usize) -> Result<Tensor, ExecError> {
        let r = self.rank();
        if a >= r || b >= r {
            return Err(ExecError::Shape(format!(
                "transpose axes ({a},{b}) out of range for rank {r}"
            )));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(a, b);
        Ok(self.permute(&perm))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..self.data.len() {
            let off: usize = idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum();
            data.push(self.data[off]);
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Tensor {
            shape: out_shape,
            dtype: self.dtype,
            data,
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor, ExecError> {
        if numel(&shape) != self.data.len() {
            return Err(ExecError::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            dtype: self.dtype,
            data: self.data.clone(),
        })
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let outer: usize = self.shape[..axis].iter().product();
        let dim = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor {
            shape,
            dtype: self.dtype,
            data,
        }
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor, ExecError> {
        let first = parts
            .first()
            .ok_or_else(|| ExecError::Shape("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(ExecError::Shape(format!("concat axis {axis} out of range")));
        }
        for p in parts {
            if p.rank() != rank || (0..rank).any(|d| d != axis && p.shape[d] != first.shape[d]) {
                return Err(ExecError::Shape(format!(
                    "concat shape mismatch {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::new();
        for o in 0..outer {
            for p in parts {
                let len = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let dtype = if parts.iter().all(|p| p.dtype == DType::I64) {
            DType::I64
        } else {
            DType::F64
        };
        Ok(Tensor { shape, dtype, data })
    }

    /// Splits along `axis` into pieces of `size`, the last piece taking the remainder.
    pub fn split(&self, size: usize, axis: usize) -> Result<Vec<Tensor>, ExecError> {
        if axis >= self.rank() {
            return Err(ExecError::Shape(format!("split axis {axis} out of range")));
        }
        if size == 0 {
            return Err(ExecError::Attr("split size must be positive".into()));
        }
        let dim = self.shape[axis];
        let mut out = Vec::new();
        let mut start = 0;
        while start < dim {
            let len = size.min(dim - start);
            out.push(self.narrow(axis, start, len));
            start += len;
        }
        Ok(out)
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{:?}", self.dtype.name(), self.shape)
    }
}

/// Execution data attached to a node: a tensor, or a tuple for multi-output ops.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Tensor(Tensor),
    Tuple(Vec<Tensor>),
}

impl Value {
    pub fn as_tensor(&self) -> Result<&Tensor, ExecError> {
        match self {
            Value::Tensor(t) => Ok(t),
            Value::Tuple(_) => Err(ExecError::Shape("expected a tensor, found a tuple".into())),
        }
    }

    pub fn shape_summary(&self) -> String {
        match self {
            Value::Tensor(t) => t.to_string(),
            Value::Tuple(ts) => {
                let parts: Vec<String> = ts.iter().map(|t| t.to_string()).collect();
                format!("({})", parts.join(", "))
            }
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Value::Tensor(t) => vec![t],
            Value::Tuple(ts) => ts.iter().collect(),
        }
    }
}

impl From<Tensor> for Value {
    fn from(t: Tensor) -> Self {
        Value::Tensor(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub atol: f64,
    pub rtol: f64,
}

impl Tolerance {
    pub fn new(atol: f64, rtol: f64) -> Tolerance {
        assert!(atol >= 0.0 && rtol >= 0.0, "tolerances must be non-negative");
        Tolerance { atol, rtol }
    }

    pub fn abs(atol: f64) -> Tolerance {
        Tolerance::new(atol, 0.0)
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance::new(1e-2, 1e-2)
    }
}

/// Per-element closeness: `|a_i - b_i| <= atol + rtol * |b_i|`, shapes must agree.
pub fn tensors_match(a: &Tensor, b: &Tensor, tol: Tolerance) -> bool {
    a.shape == b.shape
        && a.data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| (x - y).abs() <= tol.atol + tol.rtol * y.abs())
}

pub fn values_match(a: &Value, b: &Value, tol: Tolerance) -> bool {
    match (a, b) {
        (Value::Tensor(x), Value::Tensor(y)) => tensors_match(x, y, tol),
        (Value::Tuple(xs), Value::Tuple(ys)) => {
            xs.len() == ys.len() && xs.iter().zip(ys).all(|(x, y)| tensors_match(x, y, tol))
        }
        _ => false,
    }
}

/// Largest elementwise absolute difference, `None` when shapes differ.
pub fn max_abs_diff(a: &Value, b: &Value) -> Option<f64> {
    let (xs, ys) = (a.tensors(), b.tensors());
    if xs.len() != ys.len()
        || matches!(
            (a, b),
            (Value::Tensor(_), Value::Tuple(_)) | (Value::Tuple(_), Value::Tensor(_))
        )
    {
        return None;
    }
    let mut m: f64 = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        if x.shape != y.shape {
            return None;
        }
        for (p, q) in x.data.iter().zip(&y.data) {
            m = m.max((p - q).abs());
        }
    }
    Some(m)
}

/// Coarse fingerprint used to prune candidate comparisons. It never accepts
/// a pair on its own: `values_match(a, b) => sig(a).may_match(&sig(b))`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ValueSignature {
    /// Shape of each component (one entry for a plain tensor).
    pub shapes: Vec<Vec<usize>>,
    pub is_tuple: bool,
    /// Per-component mean and mean magnitude, stored as raw bits so the signature is hashable.
    stats: Vec<(u64, u64)>,
    atol_bits: u64,
    rtol_bits: u64,
}

pub fn value_signature(v: &Value, tol: Tolerance) -> ValueSignature {
    let ts = v.tensors();
    let stats = ts
        .iter()
        .map(|t| {
            let n = t.data.len().max(1) as f64;
            let mean = t.data.iter().sum::<f64>() / n;
            let mag = t.data.iter().map(|x| x.abs()).sum::<f64>() / n;
            (mean.to_bits(), mag.to_bits())
        })
        .collect();
    ValueSignature {
        shapes: ts.iter().map(|t| t.shape.clone()).collect(),
        is_tuple: matches!(v, Value::Tuple(_)),
        stats,
        atol_bits: tol.atol.to_bits(),
        rtol_bits: tol.rtol.to_bits(),
    }
}

impl ValueSignature {
    /// Shape-level bucket key.
    pub fn bucket(&self) -> (&[Vec<usize>], bool) {
        (&self.shapes, self.is_tuple)
    }

    /// Necessary condition for `values_match(self, other)` where `other` plays the role of `b`.
    pub fn may_match(&self, other: &ValueSignature) -> bool {
        if self.shapes != other.shapes || self.is_tuple != other.is_tuple {
            return false;
        }
        let atol = f64::from_bits(self.atol_bits);
        let rtol = f64::from_bits(self.rtol_bits);
        self.stats.iter().zip(&other.stats).all(|(&(ma, _), &(mb, magb))| {
            let (ma, mb, magb) = (f64::from_bits(ma), f64::from_bits(mb), f64::from_bits(magb));
            // mean of |a-b| bounds |mean a - mean b|; small slack for summation rounding
            (ma - mb).abs() <= atol + rtol * magb + 1e-9 * (1.0 + magb)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn reflexive_and_offset_within_atol() {
        let a = Value::from(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        assert!(values_match(&a, &a, Tolerance::default()));
        let b = Value::from(t(vec![2, 2], vec![1.009, 2.009, 3.009, 4.009]));
        assert!(values_match(&b, &a, Tolerance::abs(0.01)));
        let c = Value::from(t(vec![2, 2], vec![1.02, 2.0, 3.0, 4.0]));
        assert!(!values_match(&c, &a, Tolerance::abs(0.01)));
    }

    #[test]
    fn shape_gate() {
        let a = Value::from(t(vec![2, 3], vec![0.0; 6]));
        let b = Value::from(t(vec![3, 2], vec![0.0; 6]));
        assert!(!values_match(&a, &b, Tolerance::default()));
        assert!(!value_signature(&a, Tolerance::default()).may_match(&value_signature(&b, Tolerance::default())));
    }

    #[test]
    fn identical_tensors_identical_signatures() {
        let a = Value::from(t(vec![3], vec![1.0, -2.0, 5.0]));
        assert_eq!(
            value_signature(&a, Tolerance::default()),
            value_signature(&a.clone(), Tolerance::default())
        );
    }

    #[test]
    fn signature_prunes_large_offsets() {
        let a = Value::from(t(vec![3], vec![1.0, 2.0, 3.0]));
        let b = Value::from(t(vec![3], vec![1.0, 2.0, 9.0]));
        let tol = Tolerance::abs(0.01);
        assert!(!value_signature(&a, tol).may_match(&value_signature(&b, tol)));
    }

    #[test]
    fn split_last_piece_smaller_and_concat_roundtrip() {
        let x = Tensor::from_fn(vec![2, 10], |i| i as f64);
        let parts = x.split(4, 1).unwrap();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let refs: Vec<&Tensor> = parts.iter().collect();
        assert_eq!(Tensor::concat(&refs, 1).unwrap(), x);
    }

    #[test]
    fn swap_axes_permutes_data() {
        let x = Tensor::from_fn(vec![2, 3], |i| i as f64);
        let y = x.swap_axes(0, 1).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }
}
