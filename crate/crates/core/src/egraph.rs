// SPDX-License-Identifier: Apache-2.0

//! Joint e-graph: union-find, hash-consed node table, congruence rebuilding
//! and per-class attached values.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};

use crate::error::{EngineError, ExecError};
use crate::exec::eval_op;
use crate::graph::{JointGraph, NodeRef, Side};
use crate::ops::{Attrs, OpKind};
use crate::tensor::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tag {
    A,
    B,
    Aux,
}

impl Tag {
    pub fn of(side: Side) -> Tag {
        match side {
            Side::A => Tag::A,
            Side::B => Tag::B,
        }
    }
}

/// Operator application over e-classes. Leaves carry a unique key so two
/// inputs are never identified by hash-consing alone.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ENode {
    pub op: OpKind,
    pub attrs: Attrs,
    pub children: Vec<ClassId>,
    pub leaf: Option<u32>,
}

#[derive(Debug, Clone)]
struct NodeRecord {
    node: ENode,
    class: ClassId,
    tag: Tag,
}

#[derive(Debug, Clone, Default)]
struct ClassData {
    /// Node indices in insertion order.
    members: Vec<usize>,
    /// Indices of nodes that use this class as a child.
    parents: Vec<usize>,
    tags: BTreeSet<Tag>,
    origins: Vec<NodeRef>,
}

#[derive(Debug, Clone, Default)]
pub struct EGraph {
    uf: Vec<u32>,
    records: Vec<NodeRecord>,
    classes: BTreeMap<ClassId, ClassData>,
    memo: HashMap<ENode, ClassId>,
    values: HashMap<ClassId, Value>,
    worklist: Vec<ClassId>,
    refresh: Vec<usize>,
    origin_class: BTreeMap<NodeRef, ClassId>,
    next_leaf: u32,
    sig_cache: RefCell<HashMap<ClassId, BTreeSet<ClassId>>>,
    pub merge_count: usize,
    pub eval_errors: Vec<(ClassId, ExecError)>,
}

/// Upper bound on value refreshes of one node inside a single rebuild; guards
/// against oscillation through cyclic classes.
const MAX_REFRESH_PER_NODE: usize = 4;

impl EGraph {
    pub fn new() -> EGraph {
        EGraph::default()
    }

    /// Builds the joint e-graph of both sides with the interpreter values attached.
    pub fn init(jg: &JointGraph, values_a: &BTreeMap<u64, Value>, values_b: &BTreeMap<u64, Value>) -> EGraph {
        let mut g = EGraph::new();
        for (side, values) in [(Side::A, values_a), (Side::B, values_b)] {
            let graph = jg.side(side);
            let order = graph.topo_order().expect("validated graph is acyclic");
            for id in order {
                let n = &graph.nodes[&id];
                let r = NodeRef { side, id };
                let children: Vec<ClassId> = n
                    .children
                    .iter()
                    .map(|&c| g.origin_class[&NodeRef { side, id: c }])
                    .collect();
                let c = g.insert(
                    n.op,
                    n.attrs.clone(),
                    children,
                    Tag::of(side),
                    values.get(&id).cloned(),
                    false,
                );
                g.classes.get_mut(&c).unwrap().origins.push(r);
                g.origin_class.insert(r, c);
            }
        }
        g
    }

    pub fn find(&self, c: ClassId) -> ClassId {
        let mut x = c.0;
        while self.uf[x as usize] != x {
            x = self.uf[x as usize];
        }
        ClassId(x)
    }

    pub fn try_find(&self, c: ClassId) -> Result<ClassId, EngineError> {
        if (c.0 as usize) < self.uf.len() {
            Ok(self.find(c))
        } else {
            Err(EngineError::UnknownClass(c.0))
        }
    }

    fn compress(&mut self, c: ClassId) -> ClassId {
        let root = self.find(c);
        let mut x = c.0;
        while self.uf[x as usize] != root.0 {
            let next = self.uf[x as usize];
            self.uf[x as usize] = root.0;
            x = next;
        }
        root
    }

    pub fn canonicalize(&self, n: &ENode) -> ENode {
        ENode {
            op: n.op,
            attrs: n.attrs.clone(),
            children: n.children.iter().map(|&c| self.find(c)).collect(),
            leaf: n.leaf,
        }
    }

    fn insert(
        &mut self,
        op: OpKind,
        attrs: Attrs,
        children: Vec<ClassId>,
        tag: Tag,
        value: Option<Value>,
        eval: bool,
    ) -> ClassId {
        let leaf = if op.is_leaf() {
            self.next_leaf += 1;
            Some(self.next_leaf)
        } else {
            None
        };
        let node = self.canonicalize(&ENode {
            op,
            attrs,
            children,
            leaf,
        });
        if let Some(&c) = self.memo.get(&node) {
            return self.find(c);
        }
        let c = ClassId(self.uf.len() as u32);
        self.uf.push(c.0);
        let idx = self.records.len();
        let value = if eval { self.eval_node(&node, c) } else { value };
        for ch in node.children.iter().collect::<BTreeSet<_>>() {
            self.classes.get_mut(ch).unwrap().parents.push(idx);
        }
        self.records.push(NodeRecord {
            node: node.clone(),
            class: c,
            tag,
        });
        let mut data = ClassData::default();
        data.members.push(idx);
        data.tags.insert(tag);
        self.classes.insert(c, data);
        self.memo.insert(node, c);
        if let Some(v) = value {
            self.values.insert(c, v);
        }
        c
    }

    fn eval_node(&mut self, node: &ENode, c: ClassId) -> Option<Value> {
        let args: Option<Vec<&Value>> = node
            .children
            .iter()
            .map(|ch| self.values.get(&self.find(*ch)))
            .collect();
        let args = args?;
        match eval_op(node.op, &node.attrs, &args) {
            Ok(v) => Some(v),
            Err(e) => {
                self.eval_errors.push((c, e));
                None
            }
        }
    }

    /// Adds an auxiliary node; returns the existing class on a memo hit.
    pub fn add_node(&mut self, op: OpKind, attrs: Attrs, children: &[ClassId]) -> ClassId {
        self.insert(op, attrs, children.to_vec(), Tag::Aux, None, true)
    }

    /// Unions two classes. The class with the smaller canonical id stays the
    /// representative and keeps its value.
    pub fn merge(&mut self, a: ClassId, b: ClassId) -> bool {
        let (ra, rb) = (self.compress(a), self.compress(b));
        if ra == rb {
            return false;
        }
        let (root, child) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.uf[child.0 as usize] = root.0;
        let moved = self.classes.remove(&child).unwrap();
        let rv = self.values.remove(&child);
        if let std::collections::hash_map::Entry::Vacant(e) = self.values.entry(root) {
            if let Some(v) = rv {
                e.insert(v);
            }
        }
        let data = self.classes.get_mut(&root).unwrap();
        let mut dirty_parents = moved.parents.clone();
        dirty_parents.extend(data.parents.iter().copied());
        data.members.extend(moved.members);
        data.members.sort_unstable();
        data.parents.extend(moved.parents);
        data.tags.extend(moved.tags);
        data.origins.extend(moved.origins);
        data.origins.sort();
        self.refresh.extend(dirty_parents);
        self.worklist.push(root);
        self.sig_cache.borrow_mut().clear();
        self.merge_count += 1;
        true
    }

    /// Restores congruence and refreshes values of affected parents.
    /// Returns the number of congruence merges performed.
    pub fn rebuild(&mut self) -> usize {
        let before = self.merge_count;
        while !self.worklist.is_empty() {
            let pending = std::mem::take(&mut self.worklist);
            let todo: BTreeSet<ClassId> = pending.into_iter().map(|c| self.find(c)).collect();
            for c in todo {
                self.repair(c);
            }
        }
        self.refresh_values();
        self.merge_count - before
    }

    fn repair(&mut self, c: ClassId) {
        let c = self.find(c);
        let parents = std::mem::take(&mut self.classes.get_mut(&c).unwrap().parents);
        for &p in &parents {
            let old = self.records[p].node.clone();
            if self
                .memo
                .get(&old)
                .is_some_and(|&m| self.find(m) == self.find(self.records[p].class))
            {
                self.memo.remove(&old);
            }
            let new = self.canonicalize(&old);
            let pc = self.find(self.records[p].class);
            self.records[p].node = new.clone();
            match self.memo.get(&new).copied() {
                Some(other) if self.find(other) != pc => {
                    self.merge(other, pc);
                }
                _ => {}
            }
            let pc = self.find(pc);
            self.memo.insert(new, pc);
        }
        let root = self.find(c);
        let mut ps = parents;
        let data = self.classes.get_mut(&root).unwrap();
        ps.append(&mut data.parents);
        ps.sort_unstable();
        ps.dedup();
        data.parents = ps;
    }

    fn refresh_values(&mut self) {
        let mut counts: HashMap<usize, usize> = HashMap::new();
        let mut queue: BTreeSet<usize> = self.refresh.drain(..).collect();
        while let Some(p) = queue.pop_first() {
            let n = counts.entry(p).or_insert(0);
            if *n >= MAX_REFRESH_PER_NODE {
                continue;
            }
            *n += 1;
            let node = self.canonicalize(&self.records[p].node);
            let c = self.find(self.records[p].class);
            let Some(v) = self.eval_node(&node, c) else { continue };
            let changed = self.values.get(&c).is_none_or(|old| old != &v);
            if changed {
                self.values.insert(c, v);
                queue.extend(self.classes[&c].parents.iter().copied());
            }
        }
    }

    pub fn value(&self, c: ClassId) -> Option<&Value> {
        self.values.get(&self.find(c))
    }

    /// Canonical class ids in ascending order.
    pub fn classes(&self) -> Vec<ClassId> {
        self.classes.keys().copied().collect()
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn node_count(&self) -> usize {
        self.records.len()
    }

    /// Distinct canonical member nodes in insertion order.
    pub fn nodes(&self, c: ClassId) -> Vec<ENode> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for &m in &self.classes[&self.find(c)].members {
            let n = self.canonicalize(&self.records[m].node);
            if seen.insert(n.clone()) {
                out.push(n);
            }
        }
        out
    }

    /// Member nodes with their source tag, in insertion order.
    pub fn tagged_nodes(&self, c: ClassId) -> Vec<(ENode, Tag)> {
        self.classes[&self.find(c)]
            .members
            .iter()
            .map(|&m| (self.canonicalize(&self.records[m].node), self.records[m].tag))
            .collect()
    }

    pub fn tags(&self, c: ClassId) -> &BTreeSet<Tag> {
        &self.classes[&self.find(c)].tags
    }

    pub fn has_side(&self, c: ClassId, side: Side) -> bool {
        self.tags(c).contains(&Tag::of(side))
    }

    /// Captured graph nodes that live in this class.
    pub fn origins(&self, c: ClassId) -> &[NodeRef] {
        &self.classes[&self.find(c)].origins
    }

    pub fn class_of(&self, r: NodeRef) -> Option<ClassId> {
        self.origin_class.get(&r).map(|&c| self.find(c))
    }

    pub fn is_leaf_class(&self, c: ClassId) -> bool {
        self.nodes(c).iter().all(|n| n.op.is_leaf())
    }

    pub fn has_leaf(&self, c: ClassId) -> bool {
        self.nodes(c).iter().any(|n| n.op.is_leaf())
    }

    /// Canonical parent classes of `c`.
    pub fn parent_classes(&self, c: ClassId) -> BTreeSet<ClassId> {
        self.classes[&self.find(c)]
            .parents
            .iter()
            .map(|&p| self.find(self.records[p].class))
            .collect()
    }

    /// Leaf classes a class depends on. A class with an operator member
    /// inherits the leaves of that member's children, so a leaf merged with a
    /// transformed copy of another leaf reports the other leaf.
    pub fn dependency_signature(&self, c: ClassId) -> BTreeSet<ClassId> {
        let c = self.find(c);
        if let Some(s) = self.sig_cache.borrow().get(&c) {
            return s.clone();
        }
        let mut visiting = BTreeSet::new();
        let s = self.sig_rec(c, &mut visiting);
        self.sig_cache.borrow_mut().insert(c, s.clone());
        s
    }

    fn sig_rec(&self, c: ClassId, visiting: &mut BTreeSet<ClassId>) -> BTreeSet<ClassId> {
        if let Some(s) = self.sig_cache.borrow().get(&c) {
            return s.clone();
        }
        if !visiting.insert(c) {
            return BTreeSet::new();
        }
        let ops: Vec<ENode> = self.nodes(c).into_iter().filter(|n| !n.op.is_leaf()).collect();
        let mut out = BTreeSet::new();
        if ops.iter().all(|n| n.op == OpKind::Constant || n.children.is_empty()) {
            out.insert(c);
        }
        for n in &ops {
            for &ch in &n.children {
                out.extend(self.sig_rec(self.find(ch), visiting));
            }
        }
        if out.is_empty() {
            out.insert(c);
        }
        visiting.remove(&c);
        out
    }

    /// Shortest distance from the leaves, over any member.
    pub fn depths(&self) -> BTreeMap<ClassId, usize> {
        let mut depth: BTreeMap<ClassId, usize> = BTreeMap::new();
        loop {
            let mut changed = false;
            for c in self.classes() {
                let mut best: Option<usize> = None;
                for n in self.nodes(c) {
                    let d = if n.children.is_empty() {
                        Some(0)
                    } else {
                        n.children
                            .iter()
                            .map(|ch| depth.get(&self.find(*ch)).copied())
                            .collect::<Option<Vec<_>>>()
                            .map(|ds| 1 + ds.into_iter().max().unwrap_or(0))
                    };
                    if let Some(d) = d {
                        best = Some(best.map_or(d, |b| b.min(d)));
                    }
                }
                if let Some(b) = best {
                    if depth.get(&c) != Some(&b) {
                        depth.insert(c, b);
                        changed = true;
                    }
                }
            }
            if !changed {
                return depth;
            }
        }
    }

    /// Deterministic listing of canonical classes, members and value shapes.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for c in self.classes() {
            let tags: Vec<&str> = self
                .tags(c)
                .iter()
                .map(|t| match t {
                    Tag::A => "A",
                    Tag::B => "B",
                    Tag::Aux => "aux",
                })
                .collect();
            let value = self.value(c).map_or("-".to_string(), |v| v.shape_summary());
            let _ = writeln!(s, "{c} [{}] {value}", tags.join(","));
            for n in self.nodes(c) {
                let _ = writeln!(s, "  {}", fmt_enode(&n));
            }
        }
        s
    }
}

pub fn fmt_enode(n: &ENode) -> String {
    let mut s = n.op.name().to_string();
    if !n.attrs.is_empty() {
        let _ = write!(s, " {}", n.attrs);
    }
    if let Some(l) = n.leaf {
        let _ = write!(s, " #{l}");
    }
    for c in &n.children {
        let _ = write!(s, " {c}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::attr;
    use crate::tensor::Tensor;

    fn leaf(g: &mut EGraph, x: f64) -> ClassId {
        g.insert(
            OpKind::Input,
            Attrs::new(),
            vec![],
            Tag::A,
            Some(Tensor::full(vec![2, 2], x).into()),
            false,
        )
    }

    #[test]
    fn find_and_merge_basics() {
        let mut g = EGraph::new();
        let a = leaf(&mut g, 1.0);
        let b = leaf(&mut g, 1.0);
        let c = leaf(&mut g, 1.0);
        assert_eq!(g.find(a), a);
        assert!(!g.merge(a, a));
        assert!(g.merge(a, b));
        assert!(g.merge(b, c));
        assert_eq!(g.find(a), g.find(c));
        assert!(g.try_find(ClassId(99)).is_err());
    }

    #[test]
    fn hash_consing_and_memo_hit() {
        let mut g = EGraph::new();
        let x = leaf(&mut g, 1.0);
        let w = leaf(&mut g, 2.0);
        let m1 = g.add_node(OpKind::Mm, Attrs::new(), &[x, w]);
        let m2 = g.add_node(OpKind::Mm, Attrs::new(), &[x, w]);
        assert_eq!(m1, m2);
        assert_eq!(g.value(m1).unwrap().as_tensor().unwrap().data(), &[4.0; 4]);
        let t1 = g.add_node(OpKind::Transpose, attr::axes(0, 1), &[x]);
        assert_eq!(g.tags(t1).iter().next(), Some(&Tag::Aux));
    }

    #[test]
    fn congruence_after_child_merge() {
        let mut g = EGraph::new();
        let x = leaf(&mut g, 1.0);
        let y = leaf(&mut g, 1.0);
        let gx = g.add_node(OpKind::Gelu, attr::gelu("exact"), &[x]);
        let gy = g.add_node(OpKind::Gelu, attr::gelu("exact"), &[y]);
        let hx = g.add_node(OpKind::Add, Attrs::new(), &[gx, x]);
        let hy = g.add_node(OpKind::Add, Attrs::new(), &[gy, y]);
        assert_eq!(g.rebuild(), 0);
        g.merge(x, y);
        assert_eq!(g.rebuild(), 2);
        assert_eq!(g.find(gx), g.find(gy));
        assert_eq!(g.find(hx), g.find(hy));
    }

    #[test]
    fn attrs_separate_classes() {
        let mut g = EGraph::new();
        let x = g.insert(
            OpKind::Input,
            Attrs::new(),
            vec![],
            Tag::A,
            Some(Tensor::full(vec![2, 2, 2], 1.0).into()),
            false,
        );
        let t1 = g.add_node(OpKind::Transpose, attr::axes(1, 2), &[x]);
        let t2 = g.add_node(OpKind::Transpose, attr::axes(0, 1), &[x]);
        assert_ne!(t1, t2);
    }

    #[test]
    fn node_without_child_value_has_no_value() {
        let mut g = EGraph::new();
        let x = g.insert(OpKind::Input, Attrs::new(), vec![], Tag::A, None, false);
        let t = g.add_node(OpKind::Gelu, attr::gelu("exact"), &[x]);
        assert!(g.value(t).is_none());
    }

    #[test]
    fn value_refreshed_from_representative() {
        let mut g = EGraph::new();
        let x = leaf(&mut g, 1.0);
        let y = leaf(&mut g, 1.001);
        let gy = g.add_node(OpKind::Mul, Attrs::new(), &[y, y]);
        g.merge(x, y);
        g.rebuild();
        let v = g.value(gy).unwrap().as_tensor().unwrap().data()[0];
        assert_eq!(v, 1.0);
    }
}
