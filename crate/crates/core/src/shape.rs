// SPDX-License-Identifier: Apache-2.0

//! Symbolic tensor shapes over rule variables, shape constraints, and a
//! small randomized solver that produces concrete shapes satisfying them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;

use crate::ops::OpKind;
use crate::pattern::Pattern;

/// Symbolic dimension: sums and products of constants and variable dims.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SymDim {
    Const(i64),
    Dim(String, usize),
    Add(Vec<SymDim>),
    Mul(Vec<SymDim>),
}

pub type Assignment = BTreeMap<(String, usize), i64>;

impl SymDim {
    pub fn dim(var: &str, axis: usize) -> SymDim {
        SymDim::Dim(var.to_string(), axis)
    }

    pub fn eval(&self, asg: &Assignment) -> Option<i64> {
        match self {
            SymDim::Const(c) => Some(*c),
            SymDim::Dim(v, a) => asg.get(&(v.clone(), *a)).copied(),
            SymDim::Add(xs) => xs.iter().map(|x| x.eval(asg)).sum(),
            SymDim::Mul(xs) => xs.iter().map(|x| x.eval(asg)).product(),
        }
    }

    pub fn as_const(&self) -> Option<i64> {
        match self {
            SymDim::Const(c) => Some(*c),
            _ => None,
        }
    }

    fn dims_into(&self, out: &mut BTreeSet<(String, usize)>) {
        match self {
            SymDim::Const(_) => {}
            SymDim::Dim(v, a) => {
                out.insert((v.clone(), *a));
            }
            SymDim::Add(xs) | SymDim::Mul(xs) => xs.iter().for_each(|x| x.dims_into(out)),
        }
    }

    /// Folds constants and flattens nested sums and products.
    pub fn simplify(self) -> SymDim {
        match self {
            SymDim::Add(xs) => {
                let mut c = 0;
                let mut rest = Vec::new();
                for x in xs.into_iter().map(SymDim::simplify) {
                    match x {
                        SymDim::Const(k) => c += k,
                        SymDim::Add(ys) => {
                            for y in ys {
                                match y {
                                    SymDim::Const(k) => c += k,
                                    other => rest.push(other),
                                }
                            }
                        }
                        other => rest.push(other),
                    }
                }
                if c != 0 || rest.is_empty() {
                    rest.push(SymDim::Const(c));
                }
                if rest.len() == 1 {
                    rest.pop().unwrap()
                } else {
                    SymDim::Add(rest)
                }
            }
            SymDim::Mul(xs) => {
                let mut c = 1;
                let mut rest = Vec::new();
                for x in xs.into_iter().map(SymDim::simplify) {
                    match x {
                        SymDim::Const(k) => c *= k,
                        SymDim::Mul(ys) => {
                            for y in ys {
                                match y {
                                    SymDim::Const(k) => c *= k,
                                    other => rest.push(other),
                                }
                            }
                        }
                        other => rest.push(other),
                    }
                }
                if c == 0 {
                    return SymDim::Const(0);
                }
                if c != 1 || rest.is_empty() {
                    rest.insert(0, SymDim::Const(c));
                }
                if rest.len() == 1 {
                    rest.pop().unwrap()
                } else {
                    SymDim::Mul(rest)
                }
            }
            other => other,
        }
    }

    fn substitute(&self, asg: &Assignment) -> SymDim {
        match self {
            SymDim::Dim(v, a) => match asg.get(&(v.clone(), *a)) {
                Some(&c) => SymDim::Const(c),
                None => self.clone(),
            },
            SymDim::Add(xs) => SymDim::Add(xs.iter().map(|x| x.substitute(asg)).collect()).simplify(),
            SymDim::Mul(xs) => SymDim::Mul(xs.iter().map(|x| x.substitute(asg)).collect()).simplify(),
            SymDim::Const(_) => self.clone(),
        }
    }
}

impl fmt::Display for SymDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SymDim::Const(c) => write!(f, "{c}"),
            SymDim::Dim(v, a) => write!(f, "(dim ?{v} {a})"),
            SymDim::Add(xs) | SymDim::Mul(xs) => {
                f.write_str(if matches!(self, SymDim::Add(_)) { "(+" } else { "(*" })?;
                for x in xs {
                    write!(f, " {x}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShapeConstraint {
    Rank(String, usize),
    Eq(SymDim, SymDim),
    Divisible(SymDim, i64),
}

impl ShapeConstraint {
    /// `None` when some dim is unassigned.
    pub fn holds(&self, asg: &Assignment) -> Option<bool> {
        match self {
            ShapeConstraint::Rank(..) => Some(true),
            ShapeConstraint::Eq(x, y) => Some(x.eval(asg)? == y.eval(asg)?),
            ShapeConstraint::Divisible(x, k) => Some(*k != 0 && x.eval(asg)? % k == 0),
        }
    }

    fn dims(&self) -> BTreeSet<(String, usize)> {
        let mut out = BTreeSet::new();
        match self {
            ShapeConstraint::Rank(..) => {}
            ShapeConstraint::Eq(x, y) => {
                x.dims_into(&mut out);
                y.dims_into(&mut out);
            }
            ShapeConstraint::Divisible(x, _) => x.dims_into(&mut out),
        }
        out
    }

    /// Trivially true constraints are dropped by harvesting.
    pub fn is_trivial(&self) -> bool {
        match self {
            ShapeConstraint::Eq(x, y) => x == y,
            ShapeConstraint::Divisible(x, k) => *k == 1 || x.as_const().is_some_and(|c| c % k == 0),
            ShapeConstraint::Rank(..) => false,
        }
    }
}

impl fmt::Display for ShapeConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShapeConstraint::Rank(v, r) => write!(f, "(rank ?{v} {r})"),
            ShapeConstraint::Eq(x, y) => write!(f, "(= {x} {y})"),
            ShapeConstraint::Divisible(x, k) => write!(f, "(divisible {x} {k})"),
        }
    }
}

/// Ranks of rule variables as declared by `Rank` constraints.
pub fn var_ranks(cs: &[ShapeConstraint]) -> BTreeMap<String, usize> {
    cs.iter()
        .filter_map(|c| match c {
            ShapeConstraint::Rank(v, r) => Some((v.clone(), *r)),
            _ => None,
        })
        .collect()
}

/// Concrete dims of each variable.
pub fn assignment_of(shapes: &BTreeMap<String, Vec<usize>>) -> Assignment {
    let mut asg = Assignment::new();
    for (v, s) in shapes {
        for (a, &d) in s.iter().enumerate() {
            asg.insert((v.clone(), a), d as i64);
        }
    }
    asg
}

/// Checks constraints against concrete variable shapes, ranks included.
pub fn check_concrete(cs: &[ShapeConstraint], shapes: &BTreeMap<String, Vec<usize>>) -> bool {
    let asg = assignment_of(shapes);
    cs.iter().all(|c| match c {
        ShapeConstraint::Rank(v, r) => shapes.get(v).is_some_and(|s| s.len() == *r),
        other => other.holds(&asg) == Some(true),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum SymShape {
    Tensor(Vec<SymDim>),
    Tuple(Vec<Vec<SymDim>>),
}

impl SymShape {
    fn tensor(&self) -> Result<&[SymDim], String> {
        match self {
            SymShape::Tensor(s) => Ok(s),
            SymShape::Tuple(_) => Err("expected a tensor, found a tuple".into()),
        }
    }
}

/// Symbolic shape inference over a pattern, collecting the constraints the
/// variables must satisfy for both sides to be well-typed.
pub struct ShapeInference<'a> {
    ranks: &'a BTreeMap<String, usize>,
    /// Dims pinned to constants.
    fixed: Assignment,
    /// Concrete dims observed at synthesis time, used to pin sizes that an
    /// operator attribute encodes absolutely.
    observed: Option<&'a Assignment>,
    pub constraints: Vec<ShapeConstraint>,
}

impl<'a> ShapeInference<'a> {
    pub fn new(
        ranks: &'a BTreeMap<String, usize>,
        known: &[ShapeConstraint],
        observed: Option<&'a Assignment>,
    ) -> Self {
        let mut fixed = Assignment::new();
        for c in known {
            if let ShapeConstraint::Eq(SymDim::Dim(v, a), SymDim::Const(k)) = c {
                fixed.insert((v.clone(), *a), *k);
            }
        }
        ShapeInference {
            ranks,
            fixed,
            observed,
            constraints: Vec::new(),
        }
    }

    fn eq(&mut self, x: &SymDim, y: &SymDim) -> SymDim {
        if x != y {
            self.constraints.push(ShapeConstraint::Eq(x.clone(), y.clone()));
        }
        x.clone()
    }

    fn broadcast(&mut self, a: &[SymDim], b: &[SymDim]) -> Vec<SymDim> {
        let r = a.len().max(b.len());
        let one = SymDim::Const(1);
        (0..r)
            .map(|i| {
                let x = if i + a.len() >= r { &a[i + a.len() - r] } else { &one };
                let y = if i + b.len() >= r { &b[i + b.len() - r] } else { &one };
                if *x == one {
                    y.clone()
                } else if *y == one {
                    x.clone()
                } else {
                    self.eq(x, y)
                }
            })
            .collect()
    }

    /// Resolves a dim to a constant, pinning it to its observed size if needed.
    fn pin(&mut self, d: &SymDim, what: &str) -> Result<i64, String> {
        let d = d.substitute(&self.fixed);
        if let Some(c) = d.as_const() {
            return Ok(c);
        }
        let obs = self
            .observed
            .and_then(|o| d.eval(o))
            .ok_or_else(|| format!("{what} needs a fixed size for {d}"))?;
        self.constraints
            .push(ShapeConstraint::Eq(d.clone(), SymDim::Const(obs)));
        if let SymDim::Dim(v, a) = &d {
            self.fixed.insert((v.clone(), *a), obs);
        }
        Ok(obs)
    }

    pub fn infer(&mut self, p: &Pattern) -> Result<SymShape, String> {
        let (op, attrs, children) = match p {
            Pattern::Var(v) => {
                let r = *self.ranks.get(v).ok_or_else(|| format!("no rank for ?{v}"))?;
                return Ok(SymShape::Tensor(
                    (0..r).map(|a| SymDim::dim(v, a).substitute(&self.fixed)).collect(),
                ));
            }
            Pattern::Op { op, attrs, children } => (*op, attrs, children),
        };
        let (lo, hi) = op.arity();
        if children.len() < lo || hi.is_some_and(|h| children.len() > h) {
            return Err(format!("{op} with {} arguments", children.len()));
        }
        let mut args = Vec::new();
        for c in children {
            args.push(self.infer(c)?);
        }
        let t = |i: usize| args[i].tensor().map(|s| s.to_vec());
        let int = |k: &str| attrs.int(k).ok_or_else(|| format!("{op} lacks `{k}`"));
        let axis_in = |a: i64, r: usize| -> Result<usize, String> {
            if a < 0 || a as usize >= r {
                Err(format!("{op} axis {a} out of range for rank {r}"))
            } else {
                Ok(a as usize)
            }
        };
        Ok(match op {
            OpKind::Input => return Err("input inside a pattern".into()),
            OpKind::Constant => SymShape::Tensor(
                attrs
                    .ints("shape")
                    .ok_or("constant lacks `shape`")?
                    .iter()
                    .map(|&d| SymDim::Const(d))
                    .collect(),
            ),
            OpKind::Add | OpKind::Mul => SymShape::Tensor(self.broadcast(&t(0)?, &t(1)?)),
            OpKind::Mm | OpKind::Matmul => {
                let (a, b) = (t(0)?, t(1)?);
                if a.len() < 2 || b.len() < 2 || (op == OpKind::Mm && (a.len() != 2 || b.len() != 2)) {
                    return Err(format!("{op} rank mismatch"));
                }
                self.eq(&a[a.len() - 1], &b[b.len() - 2]);
                let mut out = self.broadcast(&a[..a.len() - 2], &b[..b.len() - 2]);
                out.push(a[a.len() - 2].clone());
                out.push(b[b.len() - 1].clone());
                SymShape::Tensor(out)
            }
            OpKind::Addmm => {
                let (bias, a, c) = (t(0)?, t(1)?, t(2)?);
                if a.len() != 2 || c.len() != 2 || bias.len() > 2 {
                    return Err("addmm rank mismatch".into());
                }
                self.eq(&a[1], &c[0]);
                let m = vec![a[0].clone(), c[1].clone()];
                let out = self.broadcast(&m, &bias);
                SymShape::Tensor(out)
            }
            OpKind::Linear => {
                let (x, w) = (t(0)?, t(1)?);
                if x.is_empty() || w.len() != 2 {
                    return Err("linear rank mismatch".into());
                }
                self.eq(&x[x.len() - 1], &w[1]);
                let mut out = x.clone();
                *out.last_mut().unwrap() = w[0].clone();
                if args.len() == 3 {
                    let b = t(2)?;
                    if b.len() > out.len() {
                        return Err("linear bias rank".into());
                    }
                    out = self.broadcast(&out, &b);
                }
                SymShape::Tensor(out)
            }
            OpKind::Transpose => {
                let mut s = t(0)?;
                let axes = attrs.ints("axes").ok_or("transpose lacks `axes`")?;
                if axes.len() != 2 {
                    return Err("transpose needs two axes".into());
                }
                let (i, j) = (axis_in(axes[0], s.len())?, axis_in(axes[1], s.len())?);
                s.swap(i, j);
                SymShape::Tensor(s)
            }
            OpKind::Reshape => {
                let s = t(0)?;
                let target = attrs.ints("shape").ok_or("reshape lacks `shape`")?;
                if target.iter().any(|&d| d < 0) {
                    return Err("reshape target must be explicit".into());
                }
                let prod: i64 = target.iter().product();
                let numel = SymDim::Mul(s).simplify();
                self.eq(&numel, &SymDim::Const(prod));
                SymShape::Tensor(target.iter().map(|&d| SymDim::Const(d)).collect())
            }
            OpKind::Concat => {
                let first = t(0)?;
                let axis = axis_in(int("axis")?, first.len())?;
                let mut parts = vec![first[axis].clone()];
                for i in 1..args.len() {
                    let s = t(i)?;
                    if s.len() != first.len() {
                        return Err("concat rank mismatch".into());
                    }
                    for d in 0..s.len() {
                        if d != axis {
                            self.eq(&first[d], &s[d]);
                        }
                    }
                    parts.push(s[axis].clone());
                }
                let mut out = first.clone();
                out[axis] = SymDim::Add(parts).simplify();
                SymShape::Tensor(out)
            }
            OpKind::Split | OpKind::Chunk => {
                let s = t(0)?;
                let key = if op == OpKind::Split { "axis" } else { "dim" };
                let axis = axis_in(int(key)?, s.len())?;
                let n = self.pin(&s[axis], op.name())?;
                let size = if op == OpKind::Split {
                    int("size")?
                } else {
                    let k = int("chunks")?;
                    if k <= 0 {
                        return Err("chunks must be positive".into());
                    }
                    self.constraints.push(ShapeConstraint::Divisible(SymDim::Const(n), k));
                    (n + k - 1) / k
                };
                if size <= 0 || n <= 0 {
                    return Err(format!("{op} with size {size} over {n}"));
                }
                let mut parts = Vec::new();
                let mut start = 0;
                while start < n {
                    let len = size.min(n - start);
                    let mut p = s.clone();
                    p[axis] = SymDim::Const(len);
                    parts.push(p);
                    start += len;
                }
                SymShape::Tuple(parts)
            }
            OpKind::GetItem => {
                let i = int("index")? as usize;
                match &args[0] {
                    SymShape::Tuple(parts) => SymShape::Tensor(
                        parts
                            .get(i)
                            .cloned()
                            .ok_or_else(|| format!("get_item {i} out of range"))?,
                    ),
                    SymShape::Tensor(_) => return Err("get_item of a tensor".into()),
                }
            }
            OpKind::Embedding => {
                let (idx, w) = (t(0)?, t(1)?);
                if w.len() != 2 {
                    return Err("embedding table rank".into());
                }
                let mut out = idx.clone();
                out.push(w[1].clone());
                SymShape::Tensor(out)
            }
            OpKind::LayerNorm => {
                let x = t(0)?;
                let last = x.last().ok_or("layernorm of a scalar")?.clone();
                for i in 1..args.len() {
                    let p = t(i)?;
                    if p.len() != 1 {
                        return Err("layernorm parameter rank".into());
                    }
                    self.eq(&last, &p[0]);
                }
                SymShape::Tensor(x)
            }
            OpKind::Gelu => SymShape::Tensor(t(0)?),
            OpKind::Softmax => {
                let x = t(0)?;
                axis_in(int("dim")?, x.len())?;
                SymShape::Tensor(x)
            }
            OpKind::ScaledDotProductAttention => {
                let (q, k, v) = (t(0)?, t(1)?, t(2)?);
                let r = q.len();
                if r < 2 || k.len() != r || v.len() != r {
                    return Err("attention rank mismatch".into());
                }
                for d in 0..r - 2 {
                    self.eq(&q[d], &k[d]);
                    self.eq(&q[d], &v[d]);
                }
                self.eq(&q[r - 1], &k[r - 1]);
                self.eq(&k[r - 2], &v[r - 2]);
                let mut out = q.clone();
                out[r - 1] = v[r - 1].clone();
                SymShape::Tensor(out)
            }
            OpKind::FusedAttention => {
                let (q, k, v) = (t(0)?, t(1)?, t(2)?);
                let r = q.len();
                if !(r == 3 || r == 4) || k.len() != r || v.len() != r {
                    return Err("fused_attention rank mismatch".into());
                }
                self.eq(&q[0], &k[0]);
                self.eq(&q[0], &v[0]);
                self.eq(&k[1], &v[1]);
                self.eq(&q[r - 1], &k[r - 1]);
                if r == 4 {
                    self.eq(&q[2], &k[2]);
                    self.eq(&q[2], &v[2]);
                } else {
                    let h = int("heads")?;
                    self.constraints.push(ShapeConstraint::Divisible(q[2].clone(), h));
                    self.constraints.push(ShapeConstraint::Divisible(v[2].clone(), h));
                }
                let mut out = q.clone();
                out[r - 1] = v[r - 1].clone();
                SymShape::Tensor(out)
            }
            OpKind::ReduceAdd => {
                let first = t(0)?;
                for i in 1..args.len() {
                    let s = t(i)?;
                    if s.len() != first.len() {
                        return Err("reduce_add rank mismatch".into());
                    }
                    for d in 0..s.len() {
                        self.eq(&first[d], &s[d]);
                    }
                }
                SymShape::Tensor(first)
            }
        })
    }
}

/// Constraints under which both sides are well-typed and agree in shape.
/// `observed` pins sizes that operator attributes encode absolutely.
pub fn harvest(
    lhs: &Pattern,
    rhs: &Pattern,
    ranks: &BTreeMap<String, usize>,
    observed: Option<&Assignment>,
) -> Result<Vec<ShapeConstraint>, String> {
    let base: Vec<ShapeConstraint> = ranks
        .iter()
        .map(|(v, &r)| ShapeConstraint::Rank(v.clone(), r))
        .collect();
    let mut inf = ShapeInference::new(ranks, &base, observed);
    let l = inf.infer(lhs)?;
    let r = inf.infer(rhs)?;
    match (&l, &r) {
        (SymShape::Tensor(a), SymShape::Tensor(b)) if a.len() == b.len() => {
            for (x, y) in a.iter().zip(b) {
                inf.eq(x, y);
            }
        }
        (SymShape::Tuple(a), SymShape::Tuple(b)) if a.len() == b.len() => {
            for (pa, pb) in a.iter().zip(b) {
                if pa.len() != pb.len() {
                    return Err("sides disagree in rank".into());
                }
                for (x, y) in pa.iter().zip(pb) {
                    inf.eq(x, y);
                }
            }
        }
        _ => return Err("sides disagree in shape structure".into()),
    }
    let mut out = base;
    let mut seen = BTreeSet::new();
    for c in inf.constraints {
        let c = match c {
            ShapeConstraint::Eq(x, y) => {
                let (x, y) = (x.simplify(), y.simplify());
                // keep a stable orientation: variable dims on the left
                let (xc, yc) = (x.as_const().is_some(), y.as_const().is_some());
                if (xc && !yc) || (!xc && !yc && y < x) {
                    ShapeConstraint::Eq(y, x)
                } else {
                    ShapeConstraint::Eq(x, y)
                }
            }
            ShapeConstraint::Divisible(x, k) => ShapeConstraint::Divisible(x.simplify(), k),
            other => other,
        };
        if !c.is_trivial() && seen.insert(c.clone()) {
            out.push(c);
        }
    }
    Ok(out)
}

/// Largest size the solver will assign while propagating a single unknown.
const MAX_DIM: i64 = 256;
const RESTARTS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub enum Solved {
    Sat(Assignment),
    Unsat,
}

/// Finds concrete dims in `[1, max_free]` (larger only when forced) satisfying
/// all constraints, or reports unsatisfiability within the search budget.
pub fn solve_shapes<R: Rng>(cs: &[ShapeConstraint], max_free: i64, rng: &mut R) -> Solved {
    let mut dims: BTreeSet<(String, usize)> = BTreeSet::new();
    for (v, r) in var_ranks(cs) {
        for a in 0..r {
            dims.insert((v.clone(), a));
        }
    }
    for c in cs {
        dims.extend(c.dims());
    }
    'restart: for attempt in 0..RESTARTS {
        let mut asg = Assignment::new();
        loop {
            let mut progress = true;
            while progress {
                progress = false;
                for c in cs {
                    let unknown: Vec<(String, usize)> = c.dims().into_iter().filter(|d| !asg.contains_key(d)).collect();
                    match unknown.len() {
                        0 => {
                            if c.holds(&asg) != Some(true) {
                                if asg.is_empty() || (attempt == 0 && only_forced(&asg, cs)) {
                                    return Solved::Unsat;
                                }
                                continue 'restart;
                            }
                        }
                        1 => {
                            let d = &unknown[0];
                            let mut ok = Vec::new();
                            if let Some(val) = direct_solution(c, &asg) {
                                asg.insert(d.clone(), val);
                                if val >= 1 && c.holds(&asg) == Some(true) {
                                    ok.push(val);
                                }
                            }
                            if ok.is_empty() {
                                for val in 1..=MAX_DIM {
                                    asg.insert(d.clone(), val);
                                    if c.holds(&asg) == Some(true) {
                                        ok.push(val);
                                    }
                                }
                            }
                            asg.remove(d);
                            if ok.is_empty() {
                                continue 'restart;
                            }
                            let small: Vec<i64> = ok.iter().copied().filter(|&v| v <= max_free).collect();
                            let pool = if small.is_empty() { &ok } else { &small };
                            asg.insert(d.clone(), pool[rng.random_range(0..pool.len())]);
                            progress = true;
                        }
                        _ => {}
                    }
                }
            }
            match dims.iter().find(|d| !asg.contains_key(*d)) {
                Some(d) => {
                    asg.insert(d.clone(), rng.random_range(1..=max_free));
                }
                None => {
                    if cs.iter().all(|c| c.holds(&asg) == Some(true)) {
                        return Solved::Sat(asg);
                    }
                    continue 'restart;
                }
            }
        }
    }
    Solved::Unsat
}

/// Value of the single unknown in an equality, when it occurs in a chain of
/// sums and products with known terms.
fn direct_solution(c: &ShapeConstraint, asg: &Assignment) -> Option<i64> {
    fn invert(e: &SymDim, target: i64, asg: &Assignment) -> Option<i64> {
        match e {
            SymDim::Dim(..) => Some(target),
            SymDim::Const(_) => None,
            SymDim::Add(xs) | SymDim::Mul(xs) => {
                let mut open = None;
                let mut acc = if matches!(e, SymDim::Add(_)) { 0 } else { 1 };
                for x in xs {
                    match x.eval(asg) {
                        Some(v) if matches!(e, SymDim::Add(_)) => acc += v,
                        Some(v) => acc *= v,
                        None if open.is_none() => open = Some(x),
                        None => return None,
                    }
                }
                let x = open?;
                if matches!(e, SymDim::Add(_)) {
                    invert(x, target - acc, asg)
                } else if acc != 0 && target % acc == 0 {
                    invert(x, target / acc, asg)
                } else {
                    None
                }
            }
        }
    }
    let ShapeConstraint::Eq(l, r) = c else { return None };
    match (l.eval(asg), r.eval(asg)) {
        (None, Some(v)) => invert(l, v, asg),
        (Some(v), None) => invert(r, v, asg),
        _ => None,
    }
}

/// Whether every assigned dim so far was forced by constant equalities, in
/// which case a violated constraint is a genuine contradiction.
fn only_forced(asg: &Assignment, cs: &[ShapeConstraint]) -> bool {
    asg.iter().all(|(d, &v)| {
        cs.iter().any(|c| {
            matches!(c, ShapeConstraint::Eq(SymDim::Dim(x, a), SymDim::Const(k)) if (x, a) == (&d.0, &d.1) && *k == v)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn d(v: &str, a: usize) -> SymDim {
        SymDim::dim(v, a)
    }

    #[test]
    fn divisible_solution_is_divisible() {
        let cs = vec![
            ShapeConstraint::Rank("a".into(), 3),
            ShapeConstraint::Divisible(d("a", 2), 3),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            match solve_shapes(&cs, 16, &mut rng) {
                Solved::Sat(asg) => {
                    assert_eq!(asg[&("a".to_string(), 2)] % 3, 0);
                    assert!(cs.iter().all(|c| c.holds(&asg) == Some(true)));
                }
                Solved::Unsat => panic!("satisfiable"),
            }
        }
    }

    #[test]
    fn contradiction_is_unsat() {
        let cs = vec![
            ShapeConstraint::Rank("a".into(), 1),
            ShapeConstraint::Eq(d("a", 0), SymDim::Const(3)),
            ShapeConstraint::Divisible(d("a", 0), 2),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(solve_shapes(&cs, 16, &mut rng), Solved::Unsat);
        let cs = vec![ShapeConstraint::Divisible(SymDim::Const(10), 3)];
        assert_eq!(solve_shapes(&cs, 16, &mut rng), Solved::Unsat);
    }

    #[test]
    fn alignment_gives_equal_sizes() {
        let cs = vec![
            ShapeConstraint::Rank("a".into(), 2),
            ShapeConstraint::Rank("b".into(), 2),
            ShapeConstraint::Eq(d("a", 1), d("b", 0)),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let Solved::Sat(asg) = solve_shapes(&cs, 16, &mut rng) else {
            panic!()
        };
        assert_eq!(asg[&("a".to_string(), 1)], asg[&("b".to_string(), 0)]);
        assert!(asg.values().all(|&v| (1..=16).contains(&v)));
    }

    #[test]
    fn numel_product_is_solved() {
        let cs = vec![
            ShapeConstraint::Rank("a".into(), 2),
            ShapeConstraint::Eq(SymDim::Mul(vec![d("a", 0), d("a", 1)]), SymDim::Const(48)),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let Solved::Sat(asg) = solve_shapes(&cs, 16, &mut rng) else {
            panic!()
        };
        assert_eq!(asg[&("a".to_string(), 0)] * asg[&("a".to_string(), 1)], 48);
    }

    #[test]
    fn simplify_folds() {
        let e = SymDim::Mul(vec![SymDim::Const(2), SymDim::Mul(vec![SymDim::Const(3), d("x", 0)])]).simplify();
        assert_eq!(e, SymDim::Mul(vec![SymDim::Const(6), d("x", 0)]));
        assert_eq!(
            SymDim::Add(vec![SymDim::Const(2), SymDim::Const(3)]).simplify(),
            SymDim::Const(5)
        );
    }
}
