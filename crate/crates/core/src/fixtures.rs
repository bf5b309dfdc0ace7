// SPDX-License-Identifier: Apache-2.0

//! Seeded generators of equivalent graph pairs and bug-injected variants.
//!
//! Side B is always derived from side A by a known-correct rewrite (fusion,
//! transposed weight layout, chunk instead of split, ...), and every pair is
//! checked with the interpreter before it is handed out. Graph structure does
//! not depend on the seed, only tensor values do, so node ids are stable
//! across seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::EngineError;
use crate::exec::run_graph;
use crate::graph::{ComputationGraph, GraphBuilder, Node, NodeRef, Side};
use crate::ops::{attr, Attrs, OpKind};
use crate::tensor::{max_abs_diff, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FixtureName {
    Fig2Linear,
    SplitChunk { hidden: usize },
    TransposedWeights,
    FusedQkv,
    AttentionFused,
    Gpt2Fragment,
    TinyTransformer { layers: usize },
}

impl FixtureName {
    /// The seven equivalent specs of the standard suite.
    pub fn suite() -> Vec<FixtureName> {
        vec![
            FixtureName::Fig2Linear,
            FixtureName::SplitChunk { hidden: 12 },
            FixtureName::TransposedWeights,
            FixtureName::FusedQkv,
            FixtureName::AttentionFused,
            FixtureName::Gpt2Fragment,
            FixtureName::TinyTransformer { layers: 2 },
        ]
    }
}

impl fmt::Display for FixtureName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FixtureName::Fig2Linear => f.write_str("fig2-linear"),
            FixtureName::SplitChunk { hidden: 12 } => f.write_str("split-chunk"),
            FixtureName::SplitChunk { hidden } => write!(f, "split-chunk({hidden})"),
            FixtureName::TransposedWeights => f.write_str("transposed-weights"),
            FixtureName::FusedQkv => f.write_str("fused-qkv"),
            FixtureName::AttentionFused => f.write_str("attention-fused"),
            FixtureName::Gpt2Fragment => f.write_str("gpt2-fragment"),
            FixtureName::TinyTransformer { layers } => write!(f, "tiny-transformer({layers})"),
        }
    }
}

impl FromStr for FixtureName {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EngineError::Structure(format!("unknown fixture `{s}`"));
        let arg = |prefix: &str| -> Option<Result<usize, EngineError>> {
            let inner = s.strip_prefix(prefix)?.strip_prefix('(')?.strip_suffix(')')?;
            Some(inner.parse().map_err(|_| bad()))
        };
        Ok(match s {
            "fig2-linear" => FixtureName::Fig2Linear,
            "split-chunk" => FixtureName::SplitChunk { hidden: 12 },
            "transposed-weights" => FixtureName::TransposedWeights,
            "fused-qkv" => FixtureName::FusedQkv,
            "attention-fused" => FixtureName::AttentionFused,
            "gpt2-fragment" => FixtureName::Gpt2Fragment,
            "tiny-transformer" => FixtureName::TinyTransformer { layers: 2 },
            _ => {
                if let Some(h) = arg("split-chunk") {
                    let hidden = h?;
                    if !(3..=64).contains(&hidden) {
                        return Err(bad());
                    }
                    FixtureName::SplitChunk { hidden }
                } else if let Some(n) = arg("tiny-transformer") {
                    let layers = n?;
                    if !(1..=4).contains(&layers) {
                        return Err(bad());
                    }
                    FixtureName::TinyTransformer { layers }
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BugKind {
    GeluApproxSwap,
    MissingAttnScale,
    WrongRotationTranspose,
    MissingClip,
    WrongSplitSemantics,
}

impl BugKind {
    pub const ALL: [BugKind; 5] = [
        BugKind::GeluApproxSwap,
        BugKind::MissingAttnScale,
        BugKind::WrongRotationTranspose,
        BugKind::MissingClip,
        BugKind::WrongSplitSemantics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BugKind::GeluApproxSwap => "gelu-approx-swap",
            BugKind::MissingAttnScale => "missing-attn-scale",
            BugKind::WrongRotationTranspose => "wrong-rotation-transpose",
            BugKind::MissingClip => "missing-clip",
            BugKind::WrongSplitSemantics => "wrong-split-semantics",
        }
    }
}

impl fmt::Display for BugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BugKind {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BugKind::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| EngineError::Structure(format!("unknown bug kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LocalizationLevel {
    L0,
    L1,
    L2,
}

impl fmt::Display for LocalizationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LocalizationLevel::L0 => "L0",
            LocalizationLevel::L1 => "L1",
            LocalizationLevel::L2 => "L2",
        })
    }
}

/// Ground truth attached to a generated pair.
#[derive(Debug, Clone, Default)]
pub struct FixtureMeta {
    /// Named nodes, e.g. `l0.gelu`, per side.
    pub names: BTreeMap<String, (Option<u64>, Option<u64>)>,
    /// Functional block of every node.
    pub blocks: BTreeMap<NodeRef, String>,
    /// Mutated nodes and their counterparts; empty for equivalent pairs.
    pub bug_roots: BTreeSet<NodeRef>,
}

impl FixtureMeta {
    pub fn node(&self, name: &str, side: Side) -> Option<u64> {
        let (a, b) = self.names.get(name)?;
        match side {
            Side::A => *a,
            Side::B => *b,
        }
    }

    /// L0 when both reported nodes are bug roots, L1 when both share a
    /// block with some root, L2 otherwise.
    pub fn level(&self, reported: &[NodeRef]) -> LocalizationLevel {
        if !reported.is_empty() && reported.iter().all(|r| self.bug_roots.contains(r)) {
            return LocalizationLevel::L0;
        }
        let root_blocks: BTreeSet<&String> = self.bug_roots.iter().filter_map(|r| self.blocks.get(r)).collect();
        if !reported.is_empty()
            && reported
                .iter()
                .all(|r| self.blocks.get(r).is_some_and(|b| root_blocks.contains(b)))
        {
            LocalizationLevel::L1
        } else {
            LocalizationLevel::L2
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: FixtureName,
    pub seed: u64,
    pub bug: Option<BugKind>,
    pub a: ComputationGraph,
    pub b: ComputationGraph,
    pub meta: FixtureMeta,
}

#[derive(Default)]
struct SideBuilder {
    g: GraphBuilder,
    blocks: BTreeMap<u64, String>,
    names: BTreeMap<String, u64>,
}

impl SideBuilder {
    fn input(&mut self, block: &str, t: Tensor) -> u64 {
        let id = self.g.input(t);
        self.blocks.insert(id, block.to_string());
        id
    }

    fn op(&mut self, block: &str, op: OpKind, attrs: Attrs, children: &[u64]) -> u64 {
        let id = self.g.op(op, attrs, children);
        self.blocks.insert(id, block.to_string());
        id
    }

    fn name(&mut self, name: &str, id: u64) -> u64 {
        self.names.insert(name.to_string(), id);
        id
    }
}

struct PairBuilder {
    a: SideBuilder,
    b: SideBuilder,
    rng: ChaCha8Rng,
    block: String,
}

impl PairBuilder {
    fn new(seed: u64) -> Self {
        PairBuilder {
            a: SideBuilder::default(),
            b: SideBuilder::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            block: "main".into(),
        }
    }

    fn randn(&mut self, shape: &[usize]) -> Tensor {
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(StandardNormal))
    }

    /// Same value bound on both sides.
    fn shared(&mut self, t: Tensor) -> (u64, u64) {
        let block = self.block.clone();
        (self.a.input(&block, t.clone()), self.b.input(&block, t))
    }

    fn shared_randn(&mut self, shape: &[usize]) -> (u64, u64) {
        let t = self.randn(shape);
        self.shared(t)
    }

    /// A weight `[k, n]` on side A and its transpose `[n, k]` on side B.
    fn weight_pair(&mut self, k: usize, n: usize) -> (u64, u64) {
        let w = self.randn(&[k, n]);
        let wt = w.swap_axes(0, 1).expect("rank 2");
        let block = self.block.clone();
        (self.a.input(&block, w), self.b.input(&block, wt))
    }

    fn a_op(&mut self, op: OpKind, attrs: Attrs, ch: &[u64]) -> u64 {
        let block = self.block.clone();
        self.a.op(&block, op, attrs, ch)
    }

    fn b_op(&mut self, op: OpKind, attrs: Attrs, ch: &[u64]) -> u64 {
        let block = self.block.clone();
        self.b.op(&block, op, attrs, ch)
    }

    /// The same operator on both sides.
    fn both(&mut self, op: OpKind, attrs: Attrs, a_ch: &[u64], b_ch: &[u64]) -> (u64, u64) {
        (self.a_op(op, attrs.clone(), a_ch), self.b_op(op, attrs, b_ch))
    }

    fn name(&mut self, name: &str, ids: (Option<u64>, Option<u64>)) {
        if let Some(a) = ids.0 {
            self.a.name(name, a);
        }
        if let Some(b) = ids.1 {
            self.b.name(name, b);
        }
    }

    fn output(&mut self, ids: (u64, u64)) {
        self.a.g.output(ids.0);
        self.b.g.output(ids.1);
    }

    fn finish(self, name: FixtureName, seed: u64) -> Result<Fixture, EngineError> {
        let mut meta = FixtureMeta::default();
        for (side, sb) in [(Side::A, &self.a), (Side::B, &self.b)] {
            for (&id, block) in &sb.blocks {
                meta.blocks.insert(NodeRef { side, id }, block.clone());
            }
            for (n, &id) in &sb.names {
                let e = meta.names.entry(n.clone()).or_insert((None, None));
                match side {
                    Side::A => e.0 = Some(id),
                    Side::B => e.1 = Some(id),
                }
            }
        }
        let fx = Fixture {
            name,
            seed,
            bug: None,
            a: self.a.g.build()?,
            b: self.b.g.build()?,
            meta,
        };
        let gap = differential_gap(&fx.a, &fx.b)?;
        if gap > DIFFERENTIAL_ATOL {
            return Err(EngineError::Structure(format!(
                "fixture {name} sides differ by {gap:e}"
            )));
        }
        Ok(fx)
    }
}

/// Outputs of equivalent fixtures agree to this precision.
pub const DIFFERENTIAL_ATOL: f64 = 1e-9;
/// Injected bugs must move some output by more than this.
pub const BUG_MIN_GAP: f64 = 1e-4;

/// Largest output difference between the two graphs on their bound inputs.
pub fn differential_gap(a: &ComputationGraph, b: &ComputationGraph) -> Result<f64, EngineError> {
    if a.outputs.len() != b.outputs.len() {
        return Ok(f64::INFINITY);
    }
    let (va, vb) = (run_graph(a, &BTreeMap::new())?, run_graph(b, &BTreeMap::new())?);
    let mut gap: f64 = 0.0;
    for (oa, ob) in a.outputs.iter().zip(&b.outputs) {
        gap = gap.max(max_abs_diff(&va[oa], &vb[ob]).unwrap_or(f64::INFINITY));
    }
    Ok(gap)
}

fn fig2(pb: &mut PairBuilder) {
    let (s, din, dout) = (3, 4, 5);
    let i = pb.shared_randn(&[s, din]);
    let w = pb.weight_pair(din, dout);
    let bias = pb.shared_randn(&[dout]);
    let mm = pb.a_op(OpKind::Mm, attr::none(), &[i.0, w.0]);
    let add = pb.a_op(OpKind::Add, attr::none(), &[mm, bias.0]);
    let lin = pb.b_op(OpKind::Linear, attr::none(), &[i.1, w.1, bias.1]);
    pb.output((add, lin));
}

fn split_chunk(pb: &mut PairBuilder, hidden: usize) {
    let x = pb.shared_randn(&[3, hidden]);
    let size = hidden.div_ceil(3) as i64;
    let sp = pb.a_op(OpKind::Split, attr::split(size, 1), &[x.0]);
    let ch = pb.b_op(OpKind::Chunk, attr::chunk(3, 1), &[x.1]);
    pb.name("split", (Some(sp), Some(ch)));
    for i in 0..3 {
        let pieces = hidden.div_ceil(size as usize);
        if i < pieces {
            let o = pb.both(OpKind::GetItem, attr::index(i as i64), &[sp], &[ch]);
            pb.output(o);
        }
    }
}

fn transposed_weights(pb: &mut PairBuilder) {
    let (s, k, n) = (3, 4, 5);
    let x = pb.shared_randn(&[s, k]);
    let w = pb.weight_pair(k, n);
    let mm = pb.a_op(OpKind::Mm, attr::none(), &[x.0, w.0]);
    let t = pb.b_op(OpKind::Transpose, attr::axes(0, 1), &[w.1]);
    let mat = pb.b_op(OpKind::Matmul, attr::none(), &[x.1, t]);
    pb.output((mm, mat));
}

fn fused_qkv(pb: &mut PairBuilder) {
    let (s, h) = (3, 4);
    let x = pb.shared_randn(&[s, h]);
    let ws: Vec<Tensor> = (0..3).map(|_| pb.randn(&[h, h])).collect();
    let fused = Tensor::concat(&ws.iter().collect::<Vec<_>>(), 0).expect("same shapes");
    let wb = pb.b.input("main", fused);
    let lin = pb.b_op(OpKind::Linear, attr::none(), &[x.1, wb]);
    let ch = pb.b_op(OpKind::Chunk, attr::chunk(3, -1), &[lin]);
    for (i, w) in ws.into_iter().enumerate() {
        let wa = pb.a.input("main", w);
        let la = pb.a_op(OpKind::Linear, attr::none(), &[x.0, wa]);
        let gb = pb.b_op(OpKind::GetItem, attr::index(i as i64), &[ch]);
        pb.output((la, gb));
    }
}

/// `transpose(sdpa(transpose q, transpose k, transpose v))` on side A and a
/// fused kernel on side B, both in `[batch, seq, heads, dim]` layout.
fn attention(pb: &mut PairBuilder, q: (u64, u64), k: (u64, u64), v: (u64, u64), scale: Attrs) -> ((u64, u64), u64) {
    let t: Vec<u64> = [q.0, k.0, v.0]
        .iter()
        .map(|&x| pb.a_op(OpKind::Transpose, attr::axes(1, 2), &[x]))
        .collect();
    let sdpa = pb.a_op(OpKind::ScaledDotProductAttention, scale.clone(), &t);
    let back = pb.a_op(OpKind::Transpose, attr::axes(1, 2), &[sdpa]);
    let fused = pb.b_op(OpKind::FusedAttention, scale, &[q.1, k.1, v.1]);
    ((back, fused), sdpa)
}

fn attention_fused(pb: &mut PairBuilder) {
    let shape = [1, 4, 2, 4];
    let q = pb.shared_randn(&shape);
    let k = pb.shared_randn(&shape);
    let v = pb.shared_randn(&shape);
    let (o, _) = attention(pb, q, k, v, attr::none());
    pb.output(o);
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    seq: usize,
    vocab: usize,
    hidden: usize,
    heads: usize,
    head_dim: usize,
    ffn: usize,
}

const GPT2_DIMS: Dims = Dims {
    seq: 4,
    vocab: 16,
    hidden: 8,
    heads: 2,
    head_dim: 4,
    ffn: 32,
};

fn ints(xs: &[usize]) -> Vec<i64> {
    xs.iter().map(|&x| x as i64).collect()
}

/// `addmm(b, x, w)` on side A, `linear(x, wᵀ, b)` on side B.
fn dense(pb: &mut PairBuilder, x: (u64, u64), k: usize, n: usize) -> (u64, u64) {
    let w = pb.weight_pair(k, n);
    let b = pb.shared_randn(&[n]);
    let a = pb.a_op(OpKind::Addmm, attr::none(), &[b.0, x.0, w.0]);
    let l = pb.b_op(OpKind::Linear, attr::none(), &[x.1, w.1, b.1]);
    (a, l)
}

fn layernorm(pb: &mut PairBuilder, x: (u64, u64), n: usize) -> (u64, u64) {
    let gamma = pb.shared_randn(&[n]);
    let beta = pb.shared_randn(&[n]);
    pb.both(
        OpKind::LayerNorm,
        attr::none(),
        &[x.0, gamma.0, beta.0],
        &[x.1, gamma.1, beta.1],
    )
}

fn embed(pb: &mut PairBuilder, dm: Dims) -> (u64, u64) {
    pb.block = "embed".into();
    let ids: Vec<i64> = (0..dm.seq).map(|_| pb.rng.random_range(0..dm.vocab as i64)).collect();
    let ids = pb.shared(Tensor::index(vec![dm.seq], ids).expect("in range"));
    let pos = pb.shared(Tensor::index(vec![dm.seq], (0..dm.seq as i64).collect()).expect("in range"));
    let wte = pb.shared_randn(&[dm.vocab, dm.hidden]);
    let wpe = pb.shared_randn(&[dm.seq, dm.hidden]);
    let tok = pb.both(OpKind::Embedding, attr::none(), &[ids.0, wte.0], &[ids.1, wte.1]);
    let pe = pb.both(OpKind::Embedding, attr::none(), &[pos.0, wpe.0], &[pos.1, wpe.1]);
    pb.both(OpKind::Add, attr::none(), &[tok.0, pe.0], &[tok.1, pe.1])
}

/// Pairwise interleave of the head dimension, identical on both sides.
fn rotate(pb: &mut PairBuilder, x: (u64, u64), dm: Dims, name: &str) -> (u64, u64) {
    let split = ints(&[1, dm.seq, dm.heads, 2, dm.head_dim / 2]);
    let back = ints(&[1, dm.seq, dm.heads, dm.head_dim]);
    let r = pb.both(OpKind::Reshape, attr::shape(&split), &[x.0], &[x.1]);
    let t = pb.both(OpKind::Transpose, attr::axes(3, 4), &[r.0], &[r.1]);
    pb.name(name, (Some(t.0), Some(t.1)));
    pb.both(OpKind::Reshape, attr::shape(&back), &[t.0], &[t.1])
}

fn block(pb: &mut PairBuilder, x: (u64, u64), dm: Dims, layer: usize) -> (u64, u64) {
    let n = |s: &str| format!("l{layer}.{s}");
    let h = dm.hidden;
    pb.block = "attn".into();
    let ln1 = layernorm(pb, x, h);
    let qkv = dense(pb, ln1, h, 3 * h);
    let c = pb.both(OpKind::Constant, attr::constant(0.5, &[]), &[], &[]);
    let clip = pb.both(OpKind::Mul, attr::none(), &[qkv.0, c.0], &[qkv.1, c.1]);
    pb.name(&n("qkv"), (Some(qkv.0), Some(qkv.1)));
    pb.name(&n("clip"), (Some(clip.0), Some(clip.1)));
    pb.name(&n("clip_const"), (Some(c.0), Some(c.1)));
    let sp = pb.a_op(OpKind::Split, attr::split(h as i64, 1), &[clip.0]);
    let ch = pb.b_op(OpKind::Chunk, attr::chunk(3, 1), &[clip.1]);
    pb.name(&n("split"), (Some(sp), Some(ch)));
    let heads = ints(&[1, dm.seq, dm.heads, dm.head_dim]);
    let mut qkv_heads = Vec::new();
    for (i, part) in ["q", "k", "v"].into_iter().enumerate() {
        let item = pb.both(OpKind::GetItem, attr::index(i as i64), &[sp], &[ch]);
        pb.name(&n(&format!("{part}_item")), (Some(item.0), Some(item.1)));
        let r = pb.both(OpKind::Reshape, attr::shape(&heads), &[item.0], &[item.1]);
        qkv_heads.push(if part == "v" {
            r
        } else {
            rotate(pb, r, dm, &n(&format!("rot_{part}")))
        });
    }
    let (att, sdpa) = attention(pb, qkv_heads[0], qkv_heads[1], qkv_heads[2], attr::scale(1.0));
    pb.name(&n("attn"), (Some(sdpa), Some(att.1)));
    let flat = pb.both(OpKind::Reshape, attr::shape(&ints(&[dm.seq, h])), &[att.0], &[att.1]);
    let proj = dense(pb, flat, h, h);
    let h1 = pb.both(OpKind::Add, attr::none(), &[x.0, proj.0], &[x.1, proj.1]);
    pb.block = "mlp".into();
    let ln2 = layernorm(pb, h1, h);
    let fc = dense(pb, ln2, h, dm.ffn);
    let act = pb.both(OpKind::Gelu, attr::gelu("tanh"), &[fc.0], &[fc.1]);
    pb.name(&n("gelu"), (Some(act.0), Some(act.1)));
    let fc2 = dense(pb, act, dm.ffn, h);
    pb.both(OpKind::Add, attr::none(), &[h1.0, fc2.0], &[h1.1, fc2.1])
}

fn transformer(pb: &mut PairBuilder, layers: usize, final_norm: bool) {
    let dm = GPT2_DIMS;
    let mut x = embed(pb, dm);
    for l in 0..layers {
        x = block(pb, x, dm, l);
    }
    if final_norm {
        pb.block = "final".into();
        x = layernorm(pb, x, dm.hidden);
    }
    pb.output(x);
}

/// Generates the equivalent pair for `name`. Structure is fixed per name and
/// tensor values are drawn from `seed`.
pub fn gen_pair(name: FixtureName, seed: u64) -> Result<Fixture, EngineError> {
    let mut pb = PairBuilder::new(seed);
    match name {
        FixtureName::Fig2Linear => fig2(&mut pb),
        FixtureName::SplitChunk { hidden } => split_chunk(&mut pb, hidden),
        FixtureName::TransposedWeights => transposed_weights(&mut pb),
        FixtureName::FusedQkv => fused_qkv(&mut pb),
        FixtureName::AttentionFused => attention_fused(&mut pb),
        FixtureName::Gpt2Fragment => transformer(&mut pb, 1, false),
        FixtureName::TinyTransformer { layers } => transformer(&mut pb, layers, true),
    }
    pb.finish(name, seed)
}

fn rebuild(g: &ComputationGraph, nodes: Vec<Node>) -> Result<ComputationGraph, EngineError> {
    let live: BTreeSet<u64> = nodes.iter().map(|n| n.id).collect();
    let inputs = g
        .inputs
        .iter()
        .filter(|(id, _)| live.contains(id))
        .map(|(&id, t)| (id, t.clone()))
        .collect();
    Ok(ComputationGraph::validated(nodes, inputs, g.outputs.clone())?)
}

/// Mutates side B of a transformer fixture. The bug is placed in layer 0.
pub fn inject_bug(fx: &Fixture, bug: BugKind) -> Result<Fixture, EngineError> {
    let missing = |n: &str| EngineError::Structure(format!("fixture {} has no node `{n}`", fx.name));
    let both = |n: &str| -> Result<(u64, u64), EngineError> {
        match fx.meta.names.get(n) {
            Some(&(Some(a), Some(b))) => Ok((a, b)),
            _ => Err(missing(n)),
        }
    };
    let mut nodes: BTreeMap<u64, Node> = fx.b.nodes.clone();
    let mut roots = Vec::new();
    let mut meta = fx.meta.clone();
    match bug {
        BugKind::GeluApproxSwap => {
            let (a, b) = both("l0.gelu")?;
            nodes.get_mut(&b).expect("named").attrs = attr::gelu("exact");
            roots.extend([(Side::A, a), (Side::B, b)]);
        }
        BugKind::MissingAttnScale => {
            let (a, b) = both("l0.attn")?;
            nodes.get_mut(&b).expect("named").attrs.remove("scale");
            roots.extend([(Side::A, a), (Side::B, b)]);
        }
        BugKind::WrongRotationTranspose => {
            let (a, b) = both("l0.rot_q")?;
            nodes.get_mut(&b).expect("named").attrs = attr::axes(2, 3);
            roots.extend([(Side::A, a), (Side::B, b)]);
        }
        BugKind::MissingClip => {
            let (clip_a, clip_b) = both("l0.clip")?;
            let (_, qkv_b) = both("l0.qkv")?;
            let (_, c_b) = both("l0.clip_const")?;
            let (_, split_b) = both("l0.split")?;
            nodes.remove(&clip_b);
            nodes.remove(&c_b);
            nodes.get_mut(&split_b).expect("named").children = vec![qkv_b];
            if let Some(e) = meta.names.get_mut("l0.clip") {
                e.1 = None;
            }
            if let Some(e) = meta.names.get_mut("l0.clip_const") {
                e.1 = None;
            }
            meta.blocks.remove(&NodeRef {
                side: Side::B,
                id: clip_b,
            });
            meta.blocks.remove(&NodeRef { side: Side::B, id: c_b });
            roots.extend([(Side::A, clip_a), (Side::B, split_b)]);
        }
        BugKind::WrongSplitSemantics => {
            let (qa, qb) = both("l0.q_item")?;
            let (ka, kb) = both("l0.k_item")?;
            nodes.get_mut(&qb).expect("named").attrs = attr::index(1);
            nodes.get_mut(&kb).expect("named").attrs = attr::index(0);
            roots.extend([(Side::A, qa), (Side::B, qb), (Side::A, ka), (Side::B, kb)]);
        }
    }
    let b = rebuild(&fx.b, nodes.into_values().collect())?;
    meta.bug_roots = roots.into_iter().map(|(side, id)| NodeRef { side, id }).collect();
    let gap = differential_gap(&fx.a, &b)?;
    if gap <= BUG_MIN_GAP {
        return Err(EngineError::Structure(format!(
            "bug {bug} leaves outputs within {gap:e}"
        )));
    }
    Ok(Fixture {
        bug: Some(bug),
        b,
        meta,
        ..fx.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_pairs_agree() {
        for name in FixtureName::suite() {
            for seed in 0..3 {
                let fx = gen_pair(name, seed).unwrap();
                assert!(differential_gap(&fx.a, &fx.b).unwrap() <= DIFFERENTIAL_ATOL, "{name}");
            }
        }
    }

    #[test]
    fn structure_is_seed_independent() {
        let a = gen_pair(FixtureName::Gpt2Fragment, 1).unwrap();
        let b = gen_pair(FixtureName::Gpt2Fragment, 2).unwrap();
        assert_eq!(a.a.nodes, b.a.nodes);
        assert_eq!(a.b.nodes, b.b.nodes);
        assert_ne!(a.a.inputs, b.a.inputs);
    }

    #[test]
    fn bugs_diverge() {
        let fx = gen_pair(FixtureName::Gpt2Fragment, 0).unwrap();
        for bug in BugKind::ALL {
            let m = inject_bug(&fx, bug).unwrap();
            assert!(!m.meta.bug_roots.is_empty());
        }
    }

    #[test]
    fn names_round_trip() {
        for name in FixtureName::suite()
            .into_iter()
            .chain([FixtureName::SplitChunk { hidden: 10 }])
        {
            assert_eq!(name.to_string().parse::<FixtureName>().unwrap(), name);
        }
        for bug in BugKind::ALL {
            assert_eq!(bug.name().parse::<BugKind>().unwrap(), bug);
        }
    }
}
