// SPDX-License-Identifier: Apache-2.0

//! Computation graphs, their JSON encoding, and the joint graph of a pair.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde_json::{json, Map, Value as Json};

use crate::error::GraphError;
use crate::exec::{infer_shape, normalize_attrs, ValueShape};
use crate::ops::{AttrValue, Attrs, OpKind};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: u64,
    pub op: OpKind,
    pub attrs: Attrs,
    pub children: Vec<u64>,
}

/// A validated DAG. Input leaves carry their bound tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputationGraph {
    pub nodes: BTreeMap<u64, Node>,
    pub inputs: BTreeMap<u64, Tensor>,
    pub outputs: Vec<u64>,
}

impl ComputationGraph {
    /// Checks structure and attributes, normalizes negative axes and `-1`
    /// reshape entries, and rejects shape-inconsistent graphs.
    pub fn validated(
        nodes: Vec<Node>,
        inputs: Vec<(u64, Tensor)>,
        outputs: Vec<u64>,
    ) -> Result<ComputationGraph, GraphError> {
        let mut map = BTreeMap::new();
        for mut n in nodes {
            n.op.check_attrs(&mut n.attrs)
                .map_err(|e| GraphError::Schema(format!("node {}: {e}", n.id)))?;
            let (lo, hi) = n.op.arity();
            if n.children.len() < lo || hi.is_some_and(|h| n.children.len() > h) {
                return Err(GraphError::Schema(format!(
                    "node {}: {} takes {lo}..{} inputs, got {}",
                    n.id,
                    n.op,
                    hi.map_or("n".to_string(), |h| h.to_string()),
                    n.children.len()
                )));
            }
            let id = n.id;
            if map.insert(id, n).is_some() {
                return Err(GraphError::Schema(format!("duplicate node id {id}")));
            }
        }
        let mut bound = BTreeMap::new();
        for (id, t) in inputs {
            match map.get(&id) {
                Some(n) if n.op == OpKind::Input => {}
                Some(_) => return Err(GraphError::Schema(format!("value bound to non-input node {id}"))),
                None => return Err(GraphError::Schema(format!("value bound to unknown node {id}"))),
            }
            if bound.insert(id, t).is_some() {
                return Err(GraphError::Schema(format!("input {id} bound twice")));
            }
        }
        for n in map.values() {
            if n.op == OpKind::Input && !bound.contains_key(&n.id) {
                return Err(GraphError::Schema(format!("input {} has no value", n.id)));
            }
            if let Some(c) = n.children.iter().find(|c| !map.contains_key(c)) {
                return Err(GraphError::Schema(format!(
                    "node {} references missing child {c}",
                    n.id
                )));
            }
        }
        if outputs.is_empty() {
            return Err(GraphError::Schema("graph has no outputs".into()));
        }
        if let Some(o) = outputs.iter().find(|o| !map.contains_key(o)) {
            return Err(GraphError::Schema(format!("output {o} does not exist")));
        }
        let mut g = ComputationGraph {
            nodes: map,
            inputs: bound,
            outputs,
        };
        let order = g.topo_order()?;
        let mut shapes: BTreeMap<u64, ValueShape> = BTreeMap::new();
        for id in order {
            let node = g.nodes.get_mut(&id).unwrap();
            let shape = if node.op == OpKind::Input {
                ValueShape::of(&g.inputs[&id].clone().into())
            } else {
                let args: Vec<ValueShape> = node.children.iter().map(|c| shapes[c].clone()).collect();
                normalize_attrs(node.op, &mut node.attrs, &args)
                    .and_then(|_| infer_shape(node.op, &node.attrs, &args))
                    .map_err(|e| GraphError::Schema(format!("node {id}: {e}")))?
            };
            shapes.insert(id, shape);
        }
        Ok(g)
    }

    /// Deterministic topological order; ready nodes are released by ascending id.
    pub fn topo_order(&self) -> Result<Vec<u64>, GraphError> {
        let mut pending: BTreeMap<u64, usize> = BTreeMap::new();
        let mut users: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for n in self.nodes.values() {
            let distinct: BTreeSet<u64> = n.children.iter().copied().collect();
            pending.insert(n.id, distinct.len());
            for c in distinct {
                users.entry(c).or_default().push(n.id);
            }
        }
        let mut ready: BTreeSet<u64> = pending.iter().filter(|(_, &k)| k == 0).map(|(&id, _)| id).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(id) = ready.pop_first() {
            order.push(id);
            for &u in users.get(&id).map(Vec::as_slice).unwrap_or(&[]) {
                let k = pending.get_mut(&u).unwrap();
                *k -= 1;
                if *k == 0 {
                    ready.insert(u);
                }
            }
        }
        if order.len() < self.nodes.len() {
            let stuck = pending.iter().find(|(_, &k)| k > 0).map(|(&id, _)| id).unwrap();
            return Err(GraphError::Cycle(stuck));
        }
        Ok(order)
    }

    /// Static shape of every node.
    pub fn shapes(&self) -> BTreeMap<u64, ValueShape> {
        let mut shapes: BTreeMap<u64, ValueShape> = BTreeMap::new();
        for id in self.topo_order().expect("validated graph is acyclic") {
            let node = &self.nodes[&id];
            let s = if node.op == OpKind::Input {
                ValueShape::of(&self.inputs[&id].clone().into())
            } else {
                let args: Vec<ValueShape> = node.children.iter().map(|c| shapes[c].clone()).collect();
                infer_shape(node.op, &node.attrs, &args).expect("validated graph has consistent shapes")
            };
            shapes.insert(id, s);
        }
        shapes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn parse(text: &str) -> Result<ComputationGraph, GraphError> {
        let doc: Json = serde_json::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))?;
        let top = doc
            .as_object()
            .ok_or_else(|| parse_err("top level must be an object"))?;
        let mut nodes = Vec::new();
        for n in field(top, "nodes")?
            .as_array()
            .ok_or_else(|| parse_err("`nodes` must be an array"))?
        {
            nodes.push(parse_node(n)?);
        }
        let mut inputs = Vec::new();
        for i in field(top, "inputs")?
            .as_array()
            .ok_or_else(|| parse_err("`inputs` must be an array"))?
        {
            let obj = i
                .as_object()
                .ok_or_else(|| parse_err("input entry must be an object"))?;
            let id = as_u64(field(obj, "id")?)?;
            inputs.push((id, parse_tensor(field(obj, "value")?)?));
        }
        let outputs = field(top, "outputs")?
            .as_array()
            .ok_or_else(|| parse_err("`outputs` must be an array"))?
            .iter()
            .map(as_u64)
            .collect::<Result<Vec<_>, _>>()?;
        ComputationGraph::validated(nodes, inputs, outputs)
    }

    pub fn to_json(&self) -> Json {
        let nodes: Vec<Json> = self
            .nodes
            .values()
            .map(|n| {
                let attrs: Map<String, Json> = n.attrs.iter().map(|(k, v)| (k.clone(), attr_json(v))).collect();
                json!({"id": n.id, "op": n.op.name(), "attrs": attrs, "children": n.children})
            })
            .collect();
        let inputs: Vec<Json> = self
            .inputs
            .iter()
            .map(|(id, t)| json!({"id": id, "value": tensor_json(t)}))
            .collect();
        json!({"nodes": nodes, "inputs": inputs, "outputs": self.outputs})
    }

    pub fn serialize(&self) -> String {
        self.to_json().to_string()
    }
}

fn parse_err(msg: &str) -> GraphError {
    GraphError::Parse(msg.to_string())
}

fn field<'a>(obj: &'a Map<String, Json>, key: &str) -> Result<&'a Json, GraphError> {
    obj.get(key)
        .ok_or_else(|| GraphError::Parse(format!("missing field `{key}`")))
}

fn as_u64(v: &Json) -> Result<u64, GraphError> {
    v.as_u64()
        .ok_or_else(|| GraphError::Parse(format!("expected a node id, found {v}")))
}

fn parse_node(v: &Json) -> Result<Node, GraphError> {
    let obj = v.as_object().ok_or_else(|| parse_err("node must be an object"))?;
    let id = as_u64(field(obj, "id")?)?;
    let name = field(obj, "op")?
        .as_str()
        .ok_or_else(|| parse_err("`op` must be a string"))?;
    let op = OpKind::from_name(name).ok_or_else(|| GraphError::Schema(format!("node {id}: unknown op `{name}`")))?;
    let mut attrs = Attrs::new();
    if let Some(a) = obj.get("attrs") {
        let a = a.as_object().ok_or_else(|| parse_err("`attrs` must be an object"))?;
        for (k, v) in a {
            attrs.set(k, parse_attr(op, k, v)?);
        }
    }
    let children = match obj.get("children") {
        Some(c) => c
            .as_array()
            .ok_or_else(|| parse_err("`children` must be an array"))?
            .iter()
            .map(as_u64)
            .collect::<Result<Vec<_>, _>>()?,
        None => Vec::new(),
    };
    Ok(Node {
        id,
        op,
        attrs,
        children,
    })
}

fn parse_attr(op: OpKind, key: &str, v: &Json) -> Result<AttrValue, GraphError> {
    let bad = || GraphError::Schema(format!("{op}.{key}: unsupported value {v}"));
    match v {
        Json::Number(n) if op.attr_is_float(key) => n.as_f64().map(AttrValue::Float).ok_or_else(bad),
        Json::Number(n) => n.as_i64().map(AttrValue::Int).ok_or_else(bad),
        Json::String(s) => Ok(AttrValue::Str(s.clone())),
        Json::Array(xs) => xs
            .iter()
            .map(|x| x.as_i64().ok_or_else(bad))
            .collect::<Result<Vec<_>, _>>()
            .map(AttrValue::Ints),
        _ => Err(bad()),
    }
}

fn attr_json(v: &AttrValue) -> Json {
    match v {
        AttrValue::Int(i) => json!(i),
        AttrValue::Ints(xs) => json!(xs),
        AttrValue::Float(f) => json!(f),
        AttrValue::Str(s) => json!(s),
    }
}

pub fn parse_tensor(v: &Json) -> Result<Tensor, GraphError> {
    let obj = v.as_object().ok_or_else(|| parse_err("tensor must be an object"))?;
    let shape = field(obj, "shape")?
        .as_array()
        .ok_or_else(|| parse_err("`shape` must be an array"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize).ok_or_else(|| parse_err("bad dimension")))
        .collect::<Result<Vec<_>, _>>()?;
    let dtype = match obj.get("dtype") {
        Some(d) => {
            let name = d.as_str().ok_or_else(|| parse_err("`dtype` must be a string"))?;
            DType::from_name(name).ok_or_else(|| GraphError::Parse(format!("unknown dtype `{name}`")))?
        }
        None => DType::F64,
    };
    let data = field(obj, "data")?
        .as_array()
        .ok_or_else(|| parse_err("`data` must be an array"))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| parse_err("tensor data must be numeric")))
        .collect::<Result<Vec<_>, _>>()?;
    Tensor::with_dtype(shape, dtype, data).map_err(|e| GraphError::Schema(e.to_string()))
}

pub fn tensor_json(t: &Tensor) -> Json {
    let data: Vec<Json> = match t.dtype() {
        DType::F64 => t.data().iter().map(|&x| json!(x)).collect(),
        DType::I64 => t.data().iter().map(|&x| json!(x as i64)).collect(),
    };
    json!({"shape": t.shape(), "dtype": t.dtype().name(), "data": data})
}

/// Incremental construction with ids assigned in insertion order.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    inputs: Vec<(u64, Tensor)>,
    outputs: Vec<u64>,
}

impl GraphBuilder {
    pub fn new() -> GraphBuilder {
        GraphBuilder::default()
    }

    pub fn input(&mut self, value: Tensor) -> u64 {
        let id = self.op(OpKind::Input, Attrs::new(), &[]);
        self.inputs.push((id, value));
        id
    }

    pub fn op(&mut self, op: OpKind, attrs: Attrs, children: &[u64]) -> u64 {
        let id = self.nodes.len() as u64;
        self.nodes.push(Node {
            id,
            op,
            attrs,
            children: children.to_vec(),
        });
        id
    }

    pub fn output(&mut self, id: u64) {
        self.outputs.push(id);
    }

    pub fn build(self) -> Result<ComputationGraph, GraphError> {
        ComputationGraph::validated(self.nodes, self.inputs, self.outputs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::A => "A",
            Side::B => "B",
        })
    }
}

/// Globally unique reference to a node of the joint graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef {
    pub side: Side,
    pub id: u64,
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.side, self.id)
    }
}

/// Disjoint union of two graphs; node identity is `(side, id)`.
#[derive(Debug, Clone)]
pub struct JointGraph {
    pub a: ComputationGraph,
    pub b: ComputationGraph,
}

impl JointGraph {
    pub fn side(&self, s: Side) -> &ComputationGraph {
        match s {
            Side::A => &self.a,
            Side::B => &self.b,
        }
    }

    pub fn node(&self, r: NodeRef) -> &Node {
        &self.side(r.side).nodes[&r.id]
    }

    pub fn len(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All edges as `(child, parent)` pairs.
    pub fn edges(&self) -> Vec<(NodeRef, NodeRef)> {
        let mut out = Vec::new();
        for s in [Side::A, Side::B] {
            for n in self.side(s).nodes.values() {
                for &c in &n.children {
                    out.push((NodeRef { side: s, id: c }, NodeRef { side: s, id: n.id }));
                }
            }
        }
        out
    }
}

pub fn join_graphs(a: ComputationGraph, b: ComputationGraph) -> JointGraph {
    JointGraph { a, b }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MM: &str = r#"{"nodes":[{"id":0,"op":"input","attrs":{},"children":[]},
        {"id":1,"op":"input","attrs":{},"children":[]},
        {"id":2,"op":"mm","attrs":{},"children":[0,1]}],
        "inputs":[{"id":0,"value":{"shape":[1,2],"dtype":"f64","data":[1,2]}},
                  {"id":1,"value":{"shape":[2,1],"dtype":"f64","data":[1,1]}}],
        "outputs":[2]}"#;

    #[test]
    fn minimal_graph_parses() {
        let g = ComputationGraph::parse(MM).unwrap();
        assert_eq!(g.inputs.len(), 2);
        assert_eq!(g.outputs, vec![2]);
        assert_eq!(g.topo_order().unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn negative_chunk_dim_normalized() {
        let text = r#"{"nodes":[{"id":0,"op":"input","children":[]},
            {"id":1,"op":"chunk","attrs":{"chunks":3,"dim":-1},"children":[0]},
            {"id":2,"op":"get_item","attrs":{"index":0},"children":[1]}],
            "inputs":[{"id":0,"value":{"shape":[1,2,6],"dtype":"f64","data":[0,0,0,0,0,0,0,0,0,0,0,0]}}],
            "outputs":[2]}"#;
        let g = ComputationGraph::parse(text).unwrap();
        assert_eq!(g.nodes[&1].attrs.int("dim"), Some(2));
    }

    #[test]
    fn dangling_child_is_schema_error() {
        let text = MM.replace("[0,1]", "[0,7]");
        assert!(matches!(ComputationGraph::parse(&text), Err(GraphError::Schema(_))));
    }

    #[test]
    fn malformed_and_unknown() {
        assert!(matches!(ComputationGraph::parse("{"), Err(GraphError::Parse(_))));
        let text = MM.replace("\"mm\"", "\"conv2d\"");
        assert!(matches!(ComputationGraph::parse(&text), Err(GraphError::Schema(_))));
    }

    #[test]
    fn cycle_detected() {
        let text = r#"{"nodes":[{"id":0,"op":"input","children":[]},
            {"id":1,"op":"add","children":[0,2]},
            {"id":2,"op":"add","children":[0,1]}],
            "inputs":[{"id":0,"value":{"shape":[1],"dtype":"f64","data":[1]}}],
            "outputs":[2]}"#;
        assert!(matches!(ComputationGraph::parse(text), Err(GraphError::Cycle(_))));
    }

    #[test]
    fn diamond_order() {
        let mut b = GraphBuilder::new();
        let a = b.input(Tensor::full(vec![2], 1.0));
        let l = b.op(OpKind::Gelu, Attrs::new(), &[a]);
        let r = b.op(OpKind::Mul, Attrs::new(), &[a, a]);
        let d = b.op(OpKind::Add, Attrs::new(), &[l, r]);
        b.output(d);
        let g = b.build().unwrap();
        assert_eq!(g.topo_order().unwrap(), vec![a, l, r, d]);
    }

    #[test]
    fn round_trip_is_identity() {
        let g = ComputationGraph::parse(MM).unwrap();
        let again = ComputationGraph::parse(&g.serialize()).unwrap();
        assert_eq!(g, again);
        assert_eq!(g.serialize(), again.serialize());
    }

    #[test]
    fn join_counts() {
        let g = ComputationGraph::parse(MM).unwrap();
        let j = join_graphs(g.clone(), g);
        assert_eq!(j.len(), 6);
        assert!(j.edges().iter().all(|(c, p)| c.side == p.side));
    }
}
