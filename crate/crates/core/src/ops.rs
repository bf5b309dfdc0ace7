// SPDX-License-Identifier: Apache-2.0

//! The closed operator vocabulary, attribute maps and per-operator schemas.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};

use crate::error::GraphError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Input,
    Constant,
    Add,
    Mul,
    Matmul,
    Mm,
    Addmm,
    Linear,
    Transpose,
    Reshape,
    Concat,
    Split,
    Chunk,
    GetItem,
    Embedding,
    LayerNorm,
    Gelu,
    Softmax,
    ScaledDotProductAttention,
    FusedAttention,
    ReduceAdd,
}

pub const ALL_OPS: [OpKind; 21] = [
    OpKind::Input,
    OpKind::Constant,
    OpKind::Add,
    OpKind::Mul,
    OpKind::Matmul,
    OpKind::Mm,
    OpKind::Addmm,
    OpKind::Linear,
    OpKind::Transpose,
    OpKind::Reshape,
    OpKind::Concat,
    OpKind::Split,
    OpKind::Chunk,
    OpKind::GetItem,
    OpKind::Embedding,
    OpKind::LayerNorm,
    OpKind::Gelu,
    OpKind::Softmax,
    OpKind::ScaledDotProductAttention,
    OpKind::FusedAttention,
    OpKind::ReduceAdd,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AttrKind {
    Int,
    Ints,
    Float,
    Str,
}

struct AttrSpec {
    key: &'static str,
    kind: AttrKind,
    /// `Some(default)` materializes a missing attribute at parse time; `None`
    /// with `required == false` leaves it absent.
    default: Option<fn() -> AttrValue>,
    required: bool,
}

const fn req(key: &'static str, kind: AttrKind) -> AttrSpec {
    AttrSpec {
        key,
        kind,
        default: None,
        required: true,
    }
}

const fn opt(key: &'static str, kind: AttrKind) -> AttrSpec {
    AttrSpec {
        key,
        kind,
        default: None,
        required: false,
    }
}

pub const DEFAULT_LAYERNORM_EPS: f64 = 1e-5;

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Constant => "constant",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Matmul => "matmul",
            OpKind::Mm => "mm",
            OpKind::Addmm => "addmm",
            OpKind::Linear => "linear",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Split => "split",
            OpKind::Chunk => "chunk",
            OpKind::GetItem => "get_item",
            OpKind::Embedding => "embedding",
            OpKind::LayerNorm => "layernorm",
            OpKind::Gelu => "gelu",
            OpKind::Softmax => "softmax",
            OpKind::ScaledDotProductAttention => "scaled_dot_product_attention",
            OpKind::FusedAttention => "fused_attention",
            OpKind::ReduceAdd => "reduce_add",
        }
    }

    pub fn from_name(s: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|op| op.name() == s)
    }

    /// Inclusive arity range; `None` upper bound means variadic.
    pub fn arity(self) -> (usize, Option<usize>) {
        use OpKind::*;
        match self {
            Input | Constant => (0, Some(0)),
            Add | Mul | Matmul | Mm | Embedding => (2, Some(2)),
            Addmm | ScaledDotProductAttention | FusedAttention => (3, Some(3)),
            Linear => (2, Some(3)),
            LayerNorm => (1, Some(3)),
            Transpose | Reshape | Split | Chunk | GetItem | Gelu | Softmax => (1, Some(1)),
            Concat | ReduceAdd => (1, None),
        }
    }

    pub fn is_leaf(self) -> bool {
        matches!(self, OpKind::Input | OpKind::Constant)
    }

    /// Operators whose semantics are unavailable to symbolic reasoning.
    pub fn is_opaque(self) -> bool {
        self == OpKind::FusedAttention
    }

    pub fn produces_tuple(self) -> bool {
        matches!(self, OpKind::Split | OpKind::Chunk)
    }

    fn schema(self) -> &'static [AttrSpec] {
        use AttrKind::*;
        const TRANSPOSE: &[AttrSpec] = &[req("axes", Ints)];
        const RESHAPE: &[AttrSpec] = &[req("shape", Ints)];
        const CONCAT: &[AttrSpec] = &[req("axis", Int)];
        const SPLIT: &[AttrSpec] = &[req("size", Int), req("axis", Int)];
        const CHUNK: &[AttrSpec] = &[req("chunks", Int), req("dim", Int)];
        const GET_ITEM: &[AttrSpec] = &[req("index", Int)];
        const LAYERNORM: &[AttrSpec] = &[AttrSpec {
            key: "eps",
            kind: Float,
            default: Some(|| AttrValue::Float(DEFAULT_LAYERNORM_EPS)),
            required: false,
        }];
        const GELU: &[AttrSpec] = &[AttrSpec {
            key: "approximate",
            kind: Str,
            default: Some(|| AttrValue::Str("exact".into())),
            required: false,
        }];
        const SOFTMAX: &[AttrSpec] = &[req("dim", Int)];
        const SDPA: &[AttrSpec] = &[opt("scale", Float)];
        const FUSED: &[AttrSpec] = &[opt("scale", Float), opt("heads", Int)];
        const CONSTANT: &[AttrSpec] = &[req("value", Float), req("shape", Ints)];
        match self {
            OpKind::Transpose => TRANSPOSE,
            OpKind::Reshape => RESHAPE,
            OpKind::Concat => CONCAT,
            OpKind::Split => SPLIT,
            OpKind::Chunk => CHUNK,
            OpKind::GetItem => GET_ITEM,
            OpKind::LayerNorm => LAYERNORM,
            OpKind::Gelu => GELU,
            OpKind::Softmax => SOFTMAX,
            OpKind::ScaledDotProductAttention => SDPA,
            OpKind::FusedAttention => FUSED,
            OpKind::Constant => CONSTANT,
            _ => &[],
        }
    }

    /// Whether attribute `key` of this op is a float (used when reading JSON numbers).
    pub fn attr_is_float(self, key: &str) -> bool {
        self.schema().iter().any(|s| s.key == key && s.kind == AttrKind::Float)
    }

    /// Checks attribute presence and types, and fills defaults.
    pub fn check_attrs(self, attrs: &mut Attrs) -> Result<(), GraphError> {
        let schema = self.schema();
        for key in attrs.0.keys() {
            if !schema.iter().any(|s| s.key == key) {
                return Err(GraphError::Schema(format!("{} has no attribute `{key}`", self.name())));
            }
        }
        for spec in schema {
            match attrs.0.get(spec.key) {
                Some(v) => {
                    let ok = matches!(
                        (spec.kind, v),
                        (AttrKind::Int, AttrValue::Int(_))
                            | (AttrKind::Ints, AttrValue::Ints(_))
                            | (AttrKind::Float, AttrValue::Float(_))
                            | (AttrKind::Str, AttrValue::Str(_))
                    );
                    if !ok {
                        return Err(GraphError::Schema(format!(
                            "{}.{} has the wrong type",
                            self.name(),
                            spec.key
                        )));
                    }
                }
                None => {
                    if let Some(d) = spec.default {
                        attrs.0.insert(spec.key.to_string(), d());
                    } else if spec.required {
                        return Err(GraphError::Schema(format!(
                            "{} requires attribute `{}`",
                            self.name(),
                            spec.key
                        )));
                    }
                }
            }
        }
        match self {
            OpKind::Transpose => {
                if attrs.ints("axes").map(|a| a.len()) != Some(2) {
                    return Err(GraphError::Schema("transpose.axes must list two axes".into()));
                }
            }
            OpKind::Gelu => {
                let a = attrs.str("approximate").unwrap_or("exact");
                if a != "exact" && a != "tanh" {
                    return Err(GraphError::Schema(format!("gelu.approximate `{a}`")));
                }
            }
            OpKind::Split if attrs.int("size").unwrap_or(0) <= 0 => {
                return Err(GraphError::Schema("split.size must be positive".into()));
            }
            OpKind::Chunk if attrs.int("chunks").unwrap_or(0) <= 0 => {
                return Err(GraphError::Schema("chunk.chunks must be positive".into()));
            }
            OpKind::GetItem if attrs.int("index").unwrap_or(-1) < 0 => {
                return Err(GraphError::Schema("get_item.index must be non-negative".into()));
            }
            OpKind::Constant if attrs.ints("shape").is_some_and(|s| s.iter().any(|&d| d < 0)) => {
                return Err(GraphError::Schema("constant.shape must be non-negative".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub enum AttrValue {
    Int(i64),
    Ints(Vec<i64>),
    Float(f64),
    Str(String),
}

impl AttrValue {
    fn rank(&self) -> u8 {
        match self {
            AttrValue::Int(_) => 0,
            AttrValue::Ints(_) => 1,
            AttrValue::Float(_) => 2,
            AttrValue::Str(_) => 3,
        }
    }
}

// Floats compare by bit pattern so attributes can key hash-consing tables.
impl PartialEq for AttrValue {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for AttrValue {}

impl Ord for AttrValue {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (AttrValue::Int(a), AttrValue::Int(b)) => a.cmp(b),
            (AttrValue::Ints(a), AttrValue::Ints(b)) => a.cmp(b),
            (AttrValue::Float(a), AttrValue::Float(b)) => a.to_bits().cmp(&b.to_bits()),
            (AttrValue::Str(a), AttrValue::Str(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

impl PartialOrd for AttrValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Hash for AttrValue {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.rank().hash(state);
        match self {
            AttrValue::Int(v) => v.hash(state),
            AttrValue::Ints(v) => v.hash(state),
            AttrValue::Float(v) => v.to_bits().hash(state),
            AttrValue::Str(v) => v.hash(state),
        }
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttrValue::Int(v) => write!(f, "{v}"),
            AttrValue::Ints(v) => {
                let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                write!(f, "[{}]", parts.join(" "))
            }
            // `{:?}` always keeps a decimal point or exponent, so floats stay
            // distinguishable from ints when read back.
            AttrValue::Float(v) => write!(f, "{v:?}"),
            AttrValue::Str(v) => write!(f, "\"{v}\""),
        }
    }
}

/// Attribute map with a deterministic key order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Attrs(pub BTreeMap<String, AttrValue>);

impl Attrs {
    pub fn new() -> Attrs {
        Attrs::default()
    }

    pub fn with(mut self, key: &str, v: AttrValue) -> Attrs {
        self.0.insert(key.to_string(), v);
        self
    }

    pub fn int(&self, key: &str) -> Option<i64> {
        match self.0.get(key) {
            Some(AttrValue::Int(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn ints(&self, key: &str) -> Option<&[i64]> {
        match self.0.get(key) {
            Some(AttrValue::Ints(v)) => Some(v),
            _ => None,
        }
    }

    pub fn float(&self, key: &str) -> Option<f64> {
        match self.0.get(key) {
            Some(AttrValue::Float(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        match self.0.get(key) {
            Some(AttrValue::Str(v)) => Some(v),
            _ => None,
        }
    }

    pub fn set(&mut self, key: &str, v: AttrValue) {
        self.0.insert(key.to_string(), v);
    }

    pub fn remove(&mut self, key: &str) -> Option<AttrValue> {
        self.0.remove(key)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &AttrValue)> {
        self.0.iter()
    }
}

impl fmt::Display for Attrs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (k, v) in &self.0 {
            if !first {
                f.write_str(" ")?;
            }
            first = false;
            write!(f, ":{k} {v}")?;
        }
        Ok(())
    }
}

/// Convenience constructors used by fixtures and tests.
pub mod attr {
    use super::{AttrValue, Attrs};

    pub fn none() -> Attrs {
        Attrs::new()
    }
    pub fn axes(a: i64, b: i64) -> Attrs {
        Attrs::new().with("axes", AttrValue::Ints(vec![a, b]))
    }
    pub fn shape(s: &[i64]) -> Attrs {
        Attrs::new().with("shape", AttrValue::Ints(s.to_vec()))
    }
    pub fn axis(a: i64) -> Attrs {
        Attrs::new().with("axis", AttrValue::Int(a))
    }
    pub fn split(size: i64, axis: i64) -> Attrs {
        Attrs::new()
            .with("size", AttrValue::Int(size))
            .with("axis", AttrValue::Int(axis))
    }
    pub fn chunk(chunks: i64, dim: i64) -> Attrs {
        Attrs::new()
            .with("chunks", AttrValue::Int(chunks))
            .with("dim", AttrValue::Int(dim))
    }
    pub fn index(i: i64) -> Attrs {
        Attrs::new().with("index", AttrValue::Int(i))
    }
    pub fn dim(d: i64) -> Attrs {
        Attrs::new().with("dim", AttrValue::Int(d))
    }
    pub fn eps(e: f64) -> Attrs {
        Attrs::new().with("eps", AttrValue::Float(e))
    }
    pub fn gelu(approximate: &str) -> Attrs {
        Attrs::new().with("approximate", AttrValue::Str(approximate.into()))
    }
    pub fn scale(s: f64) -> Attrs {
        Attrs::new().with("scale", AttrValue::Float(s))
    }
    pub fn constant(value: f64, shape: &[i64]) -> Attrs {
        Attrs::new()
            .with("value", AttrValue::Float(value))
            .with("shape", AttrValue::Ints(shape.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for op in ALL_OPS {
            assert_eq!(OpKind::from_name(op.name()), Some(op));
        }
        assert_eq!(OpKind::from_name("conv2d"), None);
    }

    #[test]
    fn defaults_are_materialized() {
        let mut a = Attrs::new();
        OpKind::Gelu.check_attrs(&mut a).unwrap();
        assert_eq!(a.str("approximate"), Some("exact"));
        let mut a = Attrs::new();
        OpKind::LayerNorm.check_attrs(&mut a).unwrap();
        assert_eq!(a.float("eps"), Some(1e-5));
    }

    #[test]
    fn schema_rejects_unknown_and_missing() {
        let mut a = attr::axis(1);
        assert!(OpKind::Add.check_attrs(&mut a).is_err());
        let mut a = Attrs::new();
        assert!(OpKind::Split.check_attrs(&mut a).is_err());
        let mut a = attr::gelu("sigmoid");
        assert!(OpKind::Gelu.check_attrs(&mut a).is_err());
    }

    #[test]
    fn float_attrs_hash_by_bits() {
        assert_eq!(attr::scale(0.5), attr::scale(0.5));
        assert_ne!(attr::scale(0.5), attr::scale(0.25));
        assert_ne!(AttrValue::Int(1), AttrValue::Float(1.0));
    }
}
