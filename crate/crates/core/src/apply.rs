// SPDX-License-Identifier: Apache-2.0

//! E-class-aware matching and candidate-driven rule application.

use std::collections::BTreeMap;

use crate::egraph::{ClassId, EGraph, ENode};
use crate::ops::OpKind;
use crate::pattern::{Pattern, Rule};
use crate::shape::check_concrete;
use crate::tensor::{values_match, Tolerance, Value};
use crate::validate::eval_pattern;

pub type Substitution = BTreeMap<String, ClassId>;

/// Substitutions enumerated per rule and pair before giving up.
pub const MATCH_BOUND: usize = 256;

fn members(g: &EGraph, c: ClassId, op: OpKind) -> Vec<ENode> {
    g.nodes(c).into_iter().filter(|n| n.op == op).collect()
}

/// Extends each substitution in `acc` by matching `ps[i]` against `cs[i]`.
fn match_seq(g: &EGraph, ps: &[&Pattern], cs: &[ClassId], acc: Vec<Substitution>, out: &mut Vec<Substitution>) {
    let mut cur = acc;
    for (p, &c) in ps.iter().zip(cs) {
        let mut next = Vec::new();
        for s in &cur {
            match_into(g, p, c, s, &mut next);
            if next.len() >= MATCH_BOUND {
                break;
            }
        }
        cur = next;
        if cur.is_empty() {
            return;
        }
    }
    for s in cur {
        if out.len() >= MATCH_BOUND {
            return;
        }
        if !out.contains(&s) {
            out.push(s);
        }
    }
}

fn match_into(g: &EGraph, p: &Pattern, c: ClassId, partial: &Substitution, out: &mut Vec<Substitution>) {
    let c = g.find(c);
    match p {
        Pattern::Var(x) => match partial.get(x) {
            Some(&b) if g.find(b) == c => {
                if !out.contains(partial) {
                    out.push(partial.clone());
                }
            }
            Some(_) => {}
            None => {
                let mut s = partial.clone();
                s.insert(x.clone(), c);
                if !out.contains(&s) {
                    out.push(s);
                }
            }
        },
        Pattern::Op { op, attrs, children } => {
            let ps: Vec<&Pattern> = children.iter().collect();
            for n in members(g, c, *op) {
                if n.attrs == *attrs && n.children.len() == children.len() {
                    match_seq(g, &ps, &n.children, vec![partial.clone()], out);
                }
            }
            // addmm(b, a, c) also matches add(mm(a, c), b) in either operand order.
            if *op == OpKind::Addmm && children.len() == 3 && attrs.is_empty() {
                for n in members(g, c, OpKind::Add) {
                    for (m, b) in [(0, 1), (1, 0)] {
                        for mm in members(g, n.children[m], OpKind::Mm) {
                            let cs = [n.children[b], mm.children[0], mm.children[1]];
                            match_seq(g, &ps, &cs, vec![partial.clone()], out);
                        }
                    }
                }
            }
        }
    }
}

/// All substitutions extending `partial` under which `p` matches a member of `c`.
pub fn match_pattern(g: &EGraph, p: &Pattern, c: ClassId, partial: &Substitution) -> Vec<Substitution> {
    let mut out = Vec::new();
    match_into(g, p, c, partial, &mut out);
    out
}

#[derive(Debug, Clone)]
pub struct Application {
    pub rule: usize,
    pub substitution: Substitution,
}

type ConcreteEnv = (BTreeMap<String, Value>, BTreeMap<String, Vec<usize>>);

fn concrete_env(g: &EGraph, s: &Substitution) -> Option<ConcreteEnv> {
    let mut env = BTreeMap::new();
    let mut shapes = BTreeMap::new();
    for (v, &c) in s {
        let val = g.value(c)?;
        if let Value::Tensor(t) = val {
            shapes.insert(v.clone(), t.shape().to_vec());
        }
        env.insert(v.clone(), val.clone());
    }
    Some((env, shapes))
}

/// First accepted rule and orientation with one substitution matching one
/// side at `u` and the other at `v`, whose preconditions hold on the bound
/// shapes and whose sides evaluate alike.
pub fn apply_rules(rules: &[Rule], g: &EGraph, u: ClassId, v: ClassId, tol: Tolerance) -> Option<Application> {
    for (i, rule) in rules.iter().enumerate() {
        if !rule.level.is_accepted() {
            continue;
        }
        for (l, r) in [(&rule.lhs, &rule.rhs), (&rule.rhs, &rule.lhs)] {
            let mut checked = 0;
            for s in match_pattern(g, l, u, &Substitution::new()) {
                for s in match_pattern(g, r, v, &s) {
                    checked += 1;
                    if checked > MATCH_BOUND {
                        break;
                    }
                    let Some((env, shapes)) = concrete_env(g, &s) else {
                        continue;
                    };
                    if !check_concrete(&rule.preconditions, &shapes) {
                        continue;
                    }
                    let witness = match (eval_pattern(l, &env), eval_pattern(r, &env)) {
                        (Ok(a), Ok(b)) => values_match(&a, &b, tol),
                        _ => false,
                    };
                    if witness {
                        return Some(Application {
                            rule: i,
                            substitution: s,
                        });
                    }
                }
            }
        }
    }
    None
}
