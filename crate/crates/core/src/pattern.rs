// SPDX-License-Identifier: Apache-2.0

//! Operator patterns, rewrite rules and the textual rule catalogue.
//!
//! Patterns print as s-expressions: `(linear ?a (transpose :axes [0 1] ?c) ?b)`.
//! A catalogue is a sequence of blocks:
//!
//! ```text
//! rule 3f2a9c01d4e7 formally-verified
//!   lhs (split :axis 1 :size 4 ?a)
//!   rhs (chunk :chunks 3 :dim 1 ?a)
//!   pre (rank ?a 2)
//!   pre (= (dim ?a 1) 12)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::EngineError;
use crate::ops::{AttrValue, Attrs, OpKind};
use crate::shape::{ShapeConstraint, SymDim};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pattern {
    Var(String),
    /// Literals are nullary operators (constants) matched by attributes.
    Op {
        op: OpKind,
        attrs: Attrs,
        children: Vec<Pattern>,
    },
}

impl Pattern {
    pub fn var(name: &str) -> Pattern {
        Pattern::Var(name.to_string())
    }

    pub fn op(op: OpKind, attrs: Attrs, children: Vec<Pattern>) -> Pattern {
        Pattern::Op { op, attrs, children }
    }

    /// Variables in first-occurrence order.
    pub fn vars(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.vars_into(&mut out);
        out
    }

    fn vars_into(&self, out: &mut Vec<String>) {
        match self {
            Pattern::Var(v) => {
                if !out.contains(v) {
                    out.push(v.clone());
                }
            }
            Pattern::Op { children, .. } => children.iter().for_each(|c| c.vars_into(out)),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Pattern::Var(_) => 0,
            Pattern::Op { children, .. } => 1 + children.iter().map(Pattern::depth).max().unwrap_or(0),
        }
    }

    pub fn ops(&self) -> BTreeSet<OpKind> {
        let mut out = BTreeSet::new();
        self.ops_into(&mut out);
        out
    }

    fn ops_into(&self, out: &mut BTreeSet<OpKind>) {
        if let Pattern::Op { op, children, .. } = self {
            out.insert(*op);
            children.iter().for_each(|c| c.ops_into(out));
        }
    }

    pub fn is_var(&self) -> bool {
        matches!(self, Pattern::Var(_))
    }

    pub fn rename(&self, map: &BTreeMap<String, String>) -> Pattern {
        match self {
            Pattern::Var(v) => Pattern::Var(map.get(v).cloned().unwrap_or_else(|| v.clone())),
            Pattern::Op { op, attrs, children } => Pattern::Op {
                op: *op,
                attrs: attrs.clone(),
                children: children.iter().map(|c| c.rename(map)).collect(),
            },
        }
    }

    /// Sub-patterns in pre-order.
    pub fn subterms(&self) -> Vec<&Pattern> {
        let mut out = vec![self];
        if let Pattern::Op { children, .. } = self {
            for c in children {
                out.extend(c.subterms());
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Pattern, EngineError> {
        let sx = SExpr::parse(text)?;
        pattern_from_sexpr(&sx)
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Var(v) => write!(f, "?{v}"),
            Pattern::Op { op, attrs, children } => {
                write!(f, "({op}")?;
                if !attrs.is_empty() {
                    write!(f, " {attrs}")?;
                }
                for c in children {
                    write!(f, " {c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Unvalidated,
    FormallyVerified,
    EmpiricallyValidated { trials: usize },
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Unvalidated => f.write_str("unvalidated"),
            Level::FormallyVerified => f.write_str("formally-verified"),
            Level::EmpiricallyValidated { trials } => write!(f, "empirically-validated:{trials}"),
        }
    }
}

impl Level {
    fn parse(s: &str) -> Result<Level, EngineError> {
        match s {
            "unvalidated" => Ok(Level::Unvalidated),
            "formally-verified" => Ok(Level::FormallyVerified),
            _ => s
                .strip_prefix("empirically-validated:")
                .and_then(|n| n.parse().ok())
                .map(|trials| Level::EmpiricallyValidated { trials })
                .ok_or_else(|| EngineError::RuleFormat(format!("unknown validation level `{s}`"))),
        }
    }

    pub fn is_accepted(&self) -> bool {
        !matches!(self, Level::Unvalidated)
    }
}

/// Symmetric rewrite rule `lhs <=> rhs` guarded by shape preconditions.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub lhs: Pattern,
    pub rhs: Pattern,
    pub preconditions: Vec<ShapeConstraint>,
    pub level: Level,
}

impl Rule {
    pub fn new(lhs: Pattern, rhs: Pattern, preconditions: Vec<ShapeConstraint>) -> Rule {
        Rule {
            lhs,
            rhs,
            preconditions,
            level: Level::Unvalidated,
        }
    }

    /// Orientation-independent identity: variables renamed by first
    /// occurrence, then the smaller of the two orientations.
    pub fn canonical_key(&self) -> String {
        let key = |l: &Pattern, r: &Pattern| {
            let mut names = l.vars();
            for v in r.vars() {
                if !names.contains(&v) {
                    names.push(v);
                }
            }
            let map: BTreeMap<String, String> = names
                .iter()
                .enumerate()
                .map(|(i, v)| (v.clone(), format!("v{i}")))
                .collect();
            let mut pre: Vec<String> = self
                .preconditions
                .iter()
                .map(|c| rename_constraint(c, &map).to_string())
                .collect();
            pre.sort();
            format!("{} <=> {} | {}", l.rename(&map), r.rename(&map), pre.join(" "))
        };
        let (a, b) = (key(&self.lhs, &self.rhs), key(&self.rhs, &self.lhs));
        a.min(b)
    }

    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.canonical_key().as_bytes());
        hex::encode(&digest[..6])
    }

    pub fn flipped(&self) -> Rule {
        Rule {
            lhs: self.rhs.clone(),
            rhs: self.lhs.clone(),
            preconditions: self.preconditions.clone(),
            level: self.level,
        }
    }

    /// Variables renamed `a`, `b`, ... by first occurrence (lhs then rhs).
    pub fn normalized(&self) -> Rule {
        let mut names = self.lhs.vars();
        for v in self.rhs.vars() {
            if !names.contains(&v) {
                names.push(v);
            }
        }
        let map: BTreeMap<String, String> = names
            .iter()
            .enumerate()
            .map(|(i, v)| (v.clone(), var_name(i)))
            .collect();
        Rule {
            lhs: self.lhs.rename(&map),
            rhs: self.rhs.rename(&map),
            preconditions: self.preconditions.iter().map(|c| rename_constraint(c, &map)).collect(),
            level: self.level,
        }
    }
}

/// `a`..`z`, then `v26`, `v27`, ...
pub fn var_name(i: usize) -> String {
    if i < 26 {
        ((b'a' + i as u8) as char).to_string()
    } else {
        format!("v{i}")
    }
}

fn rename_dim(d: &SymDim, map: &BTreeMap<String, String>) -> SymDim {
    match d {
        SymDim::Dim(v, a) => SymDim::Dim(map.get(v).cloned().unwrap_or_else(|| v.clone()), *a),
        SymDim::Add(xs) => SymDim::Add(xs.iter().map(|x| rename_dim(x, map)).collect()),
        SymDim::Mul(xs) => SymDim::Mul(xs.iter().map(|x| rename_dim(x, map)).collect()),
        SymDim::Const(_) => d.clone(),
    }
}

pub fn rename_constraint(c: &ShapeConstraint, map: &BTreeMap<String, String>) -> ShapeConstraint {
    match c {
        ShapeConstraint::Rank(v, r) => ShapeConstraint::Rank(map.get(v).cloned().unwrap_or_else(|| v.clone()), *r),
        ShapeConstraint::Eq(x, y) => ShapeConstraint::Eq(rename_dim(x, map), rename_dim(y, map)),
        ShapeConstraint::Divisible(x, k) => ShapeConstraint::Divisible(rename_dim(x, map), *k),
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rule {} {}", self.id(), self.level)?;
        writeln!(f, "  lhs {}", self.lhs)?;
        writeln!(f, "  rhs {}", self.rhs)?;
        for c in &self.preconditions {
            writeln!(f, "  pre {c}")?;
        }
        Ok(())
    }
}

pub fn serialize_catalogue(rules: &[Rule]) -> String {
    rules.iter().map(|r| r.to_string()).collect()
}

/// A catalogue entry still being read: level, lhs, rhs, preconditions.
type PendingRule = (Level, Option<Pattern>, Option<Pattern>, Vec<ShapeConstraint>);

pub fn parse_catalogue(text: &str) -> Result<Vec<Rule>, EngineError> {
    let mut rules: Vec<Rule> = Vec::new();
    let mut cur: Option<PendingRule> = None;
    let flush = |cur: &mut Option<PendingRule>, rules: &mut Vec<Rule>| -> Result<(), EngineError> {
        if let Some((level, l, r, pre)) = cur.take() {
            let (l, r) = l
                .zip(r)
                .ok_or_else(|| EngineError::RuleFormat("rule without lhs/rhs".into()))?;
            rules.push(Rule {
                lhs: l,
                rhs: r,
                preconditions: pre,
                level,
            });
        }
        Ok(())
    };
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (head, rest) = line.split_once(' ').unwrap_or((line, ""));
        let err = |m: &str| EngineError::RuleFormat(format!("line {}: {m}", lineno + 1));
        match head {
            "rule" => {
                flush(&mut cur, &mut rules)?;
                let level = rest.split_whitespace().nth(1).unwrap_or("unvalidated");
                cur = Some((Level::parse(level)?, None, None, Vec::new()));
            }
            "lhs" | "rhs" | "pre" => {
                let c = cur.as_mut().ok_or_else(|| err("entry outside a rule block"))?;
                match head {
                    "lhs" => c.1 = Some(Pattern::parse(rest)?),
                    "rhs" => c.2 = Some(Pattern::parse(rest)?),
                    _ => c.3.push(constraint_from_sexpr(&SExpr::parse(rest)?)?),
                }
            }
            _ => return Err(err(&format!("unexpected `{head}`"))),
        }
    }
    flush(&mut cur, &mut rules)?;
    Ok(rules)
}

#[derive(Debug, Clone, PartialEq)]
enum SExpr {
    Atom(String),
    List(Vec<SExpr>),
    Bracket(Vec<SExpr>),
}

impl SExpr {
    fn parse(text: &str) -> Result<SExpr, EngineError> {
        let mut tokens = Vec::new();
        let mut chars = text.chars().peekable();
        while let Some(&ch) = chars.peek() {
            match ch {
                '(' | ')' | '[' | ']' => {
                    tokens.push(ch.to_string());
                    chars.next();
                }
                c if c.is_whitespace() => {
                    chars.next();
                }
                '"' => {
                    chars.next();
                    let mut s = String::from("\"");
                    for c in chars.by_ref() {
                        if c == '"' {
                            break;
                        }
                        s.push(c);
                    }
                    s.push('"');
                    tokens.push(s);
                }
                _ => {
                    let mut s = String::new();
                    while let Some(&c) = chars.peek() {
                        if c.is_whitespace() || "()[]".contains(c) {
                            break;
                        }
                        s.push(c);
                        chars.next();
                    }
                    tokens.push(s);
                }
            }
        }
        let mut pos = 0;
        let sx = parse_tokens(&tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(EngineError::RuleFormat(format!("trailing input in `{text}`")));
        }
        Ok(sx)
    }
}

fn parse_tokens(tokens: &[String], pos: &mut usize) -> Result<SExpr, EngineError> {
    let tok = tokens
        .get(*pos)
        .ok_or_else(|| EngineError::RuleFormat("unexpected end of expression".into()))?;
    *pos += 1;
    match tok.as_str() {
        "(" | "[" => {
            let close = if tok == "(" { ")" } else { "]" };
            let mut items = Vec::new();
            loop {
                match tokens.get(*pos) {
                    Some(t) if t == close => {
                        *pos += 1;
                        break;
                    }
                    Some(_) => items.push(parse_tokens(tokens, pos)?),
                    None => return Err(EngineError::RuleFormat("unbalanced brackets".into())),
                }
            }
            Ok(if close == ")" {
                SExpr::List(items)
            } else {
                SExpr::Bracket(items)
            })
        }
        ")" | "]" => Err(EngineError::RuleFormat("unexpected closing bracket".into())),
        _ => Ok(SExpr::Atom(tok.clone())),
    }
}

fn pattern_from_sexpr(sx: &SExpr) -> Result<Pattern, EngineError> {
    let bad = |m: String| EngineError::RuleFormat(m);
    match sx {
        SExpr::Atom(a) => a
            .strip_prefix('?')
            .map(Pattern::var)
            .ok_or_else(|| bad(format!("expected a variable, found `{a}`"))),
        SExpr::Bracket(_) => Err(bad("unexpected list literal".into())),
        SExpr::List(items) => {
            let Some(SExpr::Atom(name)) = items.first() else {
                return Err(bad("operator name expected".into()));
            };
            let op = OpKind::from_name(name).ok_or_else(|| bad(format!("unknown operator `{name}`")))?;
            let mut attrs = Attrs::new();
            let mut children = Vec::new();
            let mut i = 1;
            while i < items.len() {
                match &items[i] {
                    SExpr::Atom(k) if k.starts_with(':') => {
                        let key = &k[1..];
                        let v = items
                            .get(i + 1)
                            .ok_or_else(|| bad(format!("attribute `{key}` lacks a value")))?;
                        attrs.set(key, attr_from_sexpr(op, key, v)?);
                        i += 2;
                    }
                    other => {
                        children.push(pattern_from_sexpr(other)?);
                        i += 1;
                    }
                }
            }
            Ok(Pattern::Op { op, attrs, children })
        }
    }
}

fn attr_from_sexpr(op: OpKind, key: &str, v: &SExpr) -> Result<AttrValue, EngineError> {
    let bad = || EngineError::RuleFormat(format!("bad value for {op}.{key}"));
    match v {
        SExpr::Bracket(xs) => xs
            .iter()
            .map(|x| match x {
                SExpr::Atom(a) => a.parse::<i64>().map_err(|_| bad()),
                _ => Err(bad()),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(AttrValue::Ints),
        SExpr::Atom(a) if a.starts_with('"') => Ok(AttrValue::Str(a.trim_matches('"').to_string())),
        SExpr::Atom(a) if op.attr_is_float(key) => a.parse::<f64>().map(AttrValue::Float).map_err(|_| bad()),
        SExpr::Atom(a) => a.parse::<i64>().map(AttrValue::Int).map_err(|_| bad()),
        SExpr::List(_) => Err(bad()),
    }
}

fn dim_from_sexpr(sx: &SExpr) -> Result<SymDim, EngineError> {
    let bad = || EngineError::RuleFormat("malformed dimension expression".into());
    match sx {
        SExpr::Atom(a) => a.parse::<i64>().map(SymDim::Const).map_err(|_| bad()),
        SExpr::List(items) => match items.first() {
            Some(SExpr::Atom(h)) if h == "dim" => match (items.get(1), items.get(2)) {
                (Some(SExpr::Atom(v)), Some(SExpr::Atom(a))) => Ok(SymDim::Dim(
                    v.strip_prefix('?').ok_or_else(bad)?.to_string(),
                    a.parse().map_err(|_| bad())?,
                )),
                _ => Err(bad()),
            },
            Some(SExpr::Atom(h)) if h == "+" || h == "*" => {
                let xs = items[1..].iter().map(dim_from_sexpr).collect::<Result<Vec<_>, _>>()?;
                Ok(if h == "+" { SymDim::Add(xs) } else { SymDim::Mul(xs) })
            }
            _ => Err(bad()),
        },
        SExpr::Bracket(_) => Err(bad()),
    }
}

fn constraint_from_sexpr(sx: &SExpr) -> Result<ShapeConstraint, EngineError> {
    let bad = || EngineError::RuleFormat("malformed precondition".into());
    let SExpr::List(items) = sx else { return Err(bad()) };
    let Some(SExpr::Atom(h)) = items.first() else {
        return Err(bad());
    };
    match (h.as_str(), items.len()) {
        ("rank", 3) => match (&items[1], &items[2]) {
            (SExpr::Atom(v), SExpr::Atom(r)) => Ok(ShapeConstraint::Rank(
                v.strip_prefix('?').ok_or_else(bad)?.to_string(),
                r.parse().map_err(|_| bad())?,
            )),
            _ => Err(bad()),
        },
        ("=", 3) => Ok(ShapeConstraint::Eq(
            dim_from_sexpr(&items[1])?,
            dim_from_sexpr(&items[2])?,
        )),
        ("divisible", 3) => match &items[2] {
            SExpr::Atom(k) => Ok(ShapeConstraint::Divisible(
                dim_from_sexpr(&items[1])?,
                k.parse().map_err(|_| bad())?,
            )),
            _ => Err(bad()),
        },
        _ => Err(bad()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pattern_round_trip() {
        for s in [
            "(linear ?a (transpose :axes [0 1] ?c) ?b)",
            "(addmm ?b ?a ?c)",
            "(gelu :approximate \"tanh\" ?x)",
            "(fused_attention :scale 0.125 ?q ?k ?v)",
            "?a",
        ] {
            let p = Pattern::parse(s).unwrap();
            assert_eq!(p.to_string(), s);
        }
    }

    #[test]
    fn catalogue_round_trip() {
        let r = Rule {
            lhs: Pattern::parse("(split :axis 1 :size 4 ?a)").unwrap(),
            rhs: Pattern::parse("(chunk :chunks 3 :dim 1 ?a)").unwrap(),
            preconditions: vec![
                ShapeConstraint::Rank("a".into(), 2),
                ShapeConstraint::Eq(SymDim::dim("a", 1), SymDim::Const(12)),
                ShapeConstraint::Divisible(SymDim::Const(12), 3),
            ],
            level: Level::FormallyVerified,
        };
        let text = serialize_catalogue(std::slice::from_ref(&r));
        let back = parse_catalogue(&text).unwrap();
        assert_eq!(back, vec![r]);
        assert_eq!(serialize_catalogue(&back), text);
    }

    #[test]
    fn key_ignores_names_and_orientation() {
        let r1 = Rule::new(
            Pattern::parse("(linear ?a (transpose :axes [0 1] ?c) ?b)").unwrap(),
            Pattern::parse("(addmm ?b ?a ?c)").unwrap(),
            vec![],
        );
        let r2 = Rule::new(
            Pattern::parse("(addmm ?z ?x ?y)").unwrap(),
            Pattern::parse("(linear ?x (transpose :axes [0 1] ?y) ?z)").unwrap(),
            vec![],
        );
        assert_eq!(r1.canonical_key(), r2.canonical_key());
        assert_eq!(r1.id(), r2.id());
    }

    #[test]
    fn malformed_rejected() {
        assert!(Pattern::parse("(conv ?a)").is_err());
        assert!(Pattern::parse("(add ?a").is_err());
        assert!(parse_catalogue("lhs ?a").is_err());
    }
}
