// SPDX-License-Identifier: Apache-2.0

//! Rule synthesis from shared abstraction frontiers.
//!
//! Every class gets a stream of `(frontier, pattern)` items: first the class
//! itself as a variable, then expansions through each operator member with
//! child items combined in diagonal order of their stream indices. A rule is
//! the first pair of items from the two classes that depend on exactly the
//! same frontier.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::rc::Rc;

use crate::egraph::{ClassId, EGraph};
use crate::ops::{Attrs, OpKind};
use crate::pattern::{var_name, Pattern, Rule};
use crate::shape::{assignment_of, harvest};
use crate::tensor::Value;

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub max_frontier: usize,
    pub max_stream: usize,
    pub max_depth: usize,
    /// Child-index tuples examined per class before the stream is cut off.
    pub max_work: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            max_frontier: 8,
            max_stream: 512,
            max_depth: 6,
            max_work: 8192,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontierItem {
    pub frontier: BTreeSet<ClassId>,
    /// Variables are named after frontier classes (`c12`).
    pub pattern: Pattern,
    /// 0 for the singleton, otherwise 1 + sum of child stream indices.
    pub rank: usize,
}

pub fn class_var(c: ClassId) -> String {
    format!("c{}", c.0)
}

fn parse_class_var(v: &str) -> Option<ClassId> {
    v.strip_prefix('c')?.parse().ok().map(ClassId)
}

/// `add(mm(a, c), b)` and `add(b, mm(a, c))` become `addmm(b, a, c)`.
fn fold_addmm(op: OpKind, attrs: &Attrs, children: Vec<Pattern>) -> Pattern {
    if op == OpKind::Add && children.len() == 2 {
        for (m, b) in [(0, 1), (1, 0)] {
            if let Pattern::Op {
                op: OpKind::Mm,
                children: mc,
                ..
            } = &children[m]
            {
                return Pattern::op(
                    OpKind::Addmm,
                    Attrs::new(),
                    vec![children[b].clone(), mc[0].clone(), mc[1].clone()],
                );
            }
        }
    }
    Pattern::op(op, attrs.clone(), children)
}

/// Child-index tuples with the given sum, in lexicographic order.
fn tuples_with_sum(lens: &[usize], s: usize, out: &mut Vec<Vec<usize>>, limit: usize) {
    fn go(lens: &[usize], s: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>, limit: usize) {
        if out.len() >= limit {
            return;
        }
        if lens.is_empty() {
            if s == 0 {
                out.push(cur.clone());
            }
            return;
        }
        let rest_cap: usize = lens[1..].iter().map(|l| l - 1).sum();
        let lo = s.saturating_sub(rest_cap);
        let hi = s.min(lens[0] - 1);
        for i in lo..=hi {
            cur.push(i);
            go(&lens[1..], s - i, cur, out, limit);
            cur.pop();
        }
    }
    if lens.iter().all(|&l| l > 0) {
        go(lens, s, &mut Vec::new(), out, limit);
    }
}

pub struct FrontierStreams<'g> {
    g: &'g EGraph,
    cfg: SynthConfig,
    memo: HashMap<ClassId, Rc<Vec<FrontierItem>>>,
    in_progress: HashSet<ClassId>,
}

impl<'g> FrontierStreams<'g> {
    pub fn new(g: &'g EGraph, cfg: SynthConfig) -> Self {
        FrontierStreams {
            g,
            cfg,
            memo: HashMap::new(),
            in_progress: HashSet::new(),
        }
    }

    pub fn stream(&mut self, c: ClassId) -> Rc<Vec<FrontierItem>> {
        let c = self.g.find(c);
        if let Some(s) = self.memo.get(&c) {
            return s.clone();
        }
        let singleton = FrontierItem {
            frontier: BTreeSet::from([c]),
            pattern: Pattern::Var(class_var(c)),
            rank: 0,
        };
        if !self.in_progress.insert(c) {
            return Rc::new(vec![singleton]);
        }
        let members: Vec<_> = self.g.nodes(c).into_iter().filter(|n| n.op != OpKind::Input).collect();
        let child_streams: Vec<Vec<Rc<Vec<FrontierItem>>>> = members
            .iter()
            .map(|n| n.children.iter().map(|&ch| self.stream(ch)).collect())
            .collect();
        let lens: Vec<Vec<usize>> = child_streams
            .iter()
            .map(|cs| cs.iter().map(|s| s.len()).collect())
            .collect();
        let max_s = lens
            .iter()
            .map(|l| l.iter().map(|x| x - 1).sum::<usize>())
            .max()
            .unwrap_or(0);
        let mut items = vec![singleton];
        let mut work = 0;
        'outer: for s in 0..=max_s {
            for (mi, n) in members.iter().enumerate() {
                let mut tuples = Vec::new();
                tuples_with_sum(&lens[mi], s, &mut tuples, self.cfg.max_work - work);
                for t in tuples {
                    work += 1;
                    let parts: Vec<&FrontierItem> =
                        t.iter().enumerate().map(|(k, &i)| &child_streams[mi][k][i]).collect();
                    let frontier: BTreeSet<ClassId> = parts.iter().flat_map(|p| p.frontier.iter().copied()).collect();
                    if frontier.len() > self.cfg.max_frontier {
                        continue;
                    }
                    let pattern = fold_addmm(n.op, &n.attrs, parts.iter().map(|p| p.pattern.clone()).collect());
                    if pattern.depth() > self.cfg.max_depth {
                        continue;
                    }
                    items.push(FrontierItem {
                        frontier,
                        pattern,
                        rank: 1 + s,
                    });
                    if items.len() >= self.cfg.max_stream {
                        break 'outer;
                    }
                }
                if work >= self.cfg.max_work {
                    break 'outer;
                }
            }
        }
        self.in_progress.remove(&c);
        let items = Rc::new(items);
        self.memo.insert(c, items.clone());
        items
    }
}

/// Entry point matching the enumeration contract on a single class.
pub fn enumerate_frontier_patterns(g: &EGraph, c: ClassId, cfg: SynthConfig) -> Vec<FrontierItem> {
    FrontierStreams::new(g, cfg).stream(c).as_ref().clone()
}

#[derive(Debug, Clone)]
pub struct Synthesized {
    /// Variables renamed `a`, `b`, ... by first occurrence.
    pub rule: Rule,
    pub bindings: BTreeMap<String, ClassId>,
    /// Concrete shapes of the frontier values.
    pub observed: BTreeMap<String, Vec<usize>>,
    pub harvest_error: Option<String>,
    /// Stream positions of the chosen pair.
    pub position: (usize, usize),
}

/// Shared-frontier pairs ordered by `i + j`, then `i`.
fn shared_pairs(lhs: &[FrontierItem], rhs: &[FrontierItem]) -> Vec<(usize, usize)> {
    let mut first: HashMap<&BTreeSet<ClassId>, Vec<usize>> = HashMap::new();
    for (i, it) in lhs.iter().enumerate() {
        if !it.frontier.is_empty() {
            first.entry(&it.frontier).or_default().push(i);
        }
    }
    let mut out = Vec::new();
    for (j, it) in rhs.iter().enumerate() {
        if let Some(is) = first.get(&it.frontier) {
            out.extend(is.iter().map(|&i| (i, j)));
        }
    }
    out.sort_by_key(|&(i, j)| (i + j, i));
    out
}

fn build(g: &EGraph, l: &Pattern, r: &Pattern, position: (usize, usize)) -> Synthesized {
    let mut names = l.vars();
    for v in r.vars() {
        if !names.contains(&v) {
            names.push(v);
        }
    }
    let map: BTreeMap<String, String> = names
        .iter()
        .enumerate()
        .map(|(i, v)| (v.clone(), var_name(i)))
        .collect();
    let bindings: BTreeMap<String, ClassId> = names
        .iter()
        .filter_map(|v| parse_class_var(v).map(|c| (map[v].clone(), c)))
        .collect();
    let (lhs, rhs) = (l.rename(&map), r.rename(&map));
    let mut observed = BTreeMap::new();
    let mut harvest_error = None;
    for (v, &c) in &bindings {
        match g.value(c) {
            Some(Value::Tensor(t)) => {
                observed.insert(v.clone(), t.shape().to_vec());
            }
            _ => harvest_error = Some(format!("frontier class {c} has no tensor value")),
        }
    }
    let mut rule = Rule::new(lhs, rhs, Vec::new());
    if harvest_error.is_none() {
        let ranks = observed.iter().map(|(v, s)| (v.clone(), s.len())).collect();
        let asg = assignment_of(&observed);
        match harvest(&rule.lhs, &rule.rhs, &ranks, Some(&asg)) {
            Ok(cs) => rule.preconditions = cs,
            Err(e) => harvest_error = Some(e),
        }
    }
    Synthesized {
        rule,
        bindings,
        observed,
        harvest_error,
        position,
    }
}

/// First pair of stream items from `u` and `v` with equal frontiers, or `None`
/// if the budgets are exhausted without one.
pub fn synthesize_rule(g: &EGraph, u: ClassId, v: ClassId, cfg: SynthConfig) -> Option<Synthesized> {
    let mut fs = FrontierStreams::new(g, cfg);
    let (su, sv) = (fs.stream(u), fs.stream(v));
    let &(i, j) = shared_pairs(&su, &sv).first()?;
    Some(build(g, &su[i].pattern, &sv[j].pattern, (i, j)))
}

/// Substitution making `general` equal to `specific`, extending `sub`.
fn instance_of(general: &Pattern, specific: &Pattern, sub: &mut BTreeMap<String, Pattern>) -> bool {
    match general {
        Pattern::Var(x) => match sub.get(x) {
            Some(p) => p == specific,
            None => {
                sub.insert(x.clone(), specific.clone());
                true
            }
        },
        Pattern::Op { op, attrs, children } => match specific {
            Pattern::Op {
                op: o2,
                attrs: a2,
                children: c2,
            } => {
                op == o2
                    && attrs == a2
                    && children.len() == c2.len()
                    && children.iter().zip(c2).all(|(x, y)| instance_of(x, y, sub))
            }
            Pattern::Var(_) => false,
        },
    }
}

fn strictly_subsumes(gl: &Pattern, gr: &Pattern, rule: &Rule) -> bool {
    for r in [rule.clone(), rule.flipped()] {
        let mut sub = BTreeMap::new();
        if instance_of(gl, &r.lhs, &mut sub) && instance_of(gr, &r.rhs, &mut sub) {
            let mut back = BTreeMap::new();
            let same = instance_of(&r.lhs, gl, &mut back) && instance_of(&r.rhs, gr, &mut back);
            if !same {
                return true;
            }
        }
    }
    false
}

/// Checks that no shared frontier in the enumeration strictly generalizes
/// `rule`; returns the more general rule as a witness otherwise.
pub fn generality_audit(rule: &Rule, g: &EGraph, u: ClassId, v: ClassId, cfg: SynthConfig) -> Result<(), Rule> {
    let mut fs = FrontierStreams::new(g, cfg);
    let (su, sv) = (fs.stream(u), fs.stream(v));
    for (i, j) in shared_pairs(&su, &sv) {
        let cand = build(g, &su[i].pattern, &sv[j].pattern, (i, j)).rule;
        if strictly_subsumes(&cand.lhs, &cand.rhs, rule) {
            return Err(cand);
        }
    }
    Ok(())
}
