// SPDX-License-Identifier: Apache-2.0

//! Naive congruence closure shared by the oracle and acceptance targets.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tensor_equiv::egraph::EGraph;
use tensor_equiv::exec::run_graph;
use tensor_equiv::graph::{join_graphs, ComputationGraph, GraphBuilder, NodeRef, Side};
use tensor_equiv::ops::{attr, Attrs, OpKind};
use tensor_equiv::tensor::Tensor;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Random elementwise graph over `[2]` tensors.
pub fn random_graph(rng: &mut ChaCha8Rng, size: usize) -> ComputationGraph {
    let mut b = GraphBuilder::new();
    let mut ids = Vec::new();
    for _ in 0..rng.random_range(2..=3) {
        let t = randn(rng, &[2]);
        ids.push(b.input(t));
    }
    while ids.len() < size {
        let pick = |rng: &mut ChaCha8Rng, ids: &[u64]| ids[rng.random_range(0..ids.len())];
        let id = match rng.random_range(0..4) {
            0 => b.op(OpKind::Add, attr::none(), &[pick(rng, &ids), pick(rng, &ids)]),
            1 => b.op(OpKind::Mul, attr::none(), &[pick(rng, &ids), pick(rng, &ids)]),
            2 => b.op(OpKind::Gelu, attr::gelu("tanh"), &[pick(rng, &ids)]),
            _ => b.op(OpKind::Gelu, attr::gelu("exact"), &[pick(rng, &ids)]),
        };
        ids.push(id);
    }
    b.output(*ids.last().unwrap());
    b.build().unwrap()
}

pub struct Uf(Vec<usize>);

impl Uf {
    pub fn find(&mut self, x: usize) -> usize {
        if self.0[x] != x {
            let r = self.find(self.0[x]);
            self.0[x] = r;
        }
        self.0[x]
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
        ra != rb
    }
}

/// Smallest congruence containing `merges`, by pairwise fixpoint iteration.
pub fn naive_closure(nodes: &[(NodeRef, OpKind, Attrs, Vec<usize>)], merges: &[(usize, usize)]) -> Uf {
    let mut uf = Uf((0..nodes.len()).collect());
    for &(a, b) in merges {
        uf.union(a, b);
    }
    loop {
        let mut changed = false;
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                let (x, y) = (&nodes[i], &nodes[j]);
                if x.1.is_leaf() || x.1 != y.1 || x.2 != y.2 || x.3.len() != y.3.len() {
                    continue;
                }
                let congruent = x.3.iter().zip(&y.3).all(|(&p, &q)| uf.find(p) == uf.find(q));
                if congruent && uf.union(i, j) {
                    changed = true;
                }
            }
        }
        if !changed {
            return uf;
        }
    }
}

/// Runs the engine against the naive closure on `count` random graph pairs.
/// Returns the number of disagreeing node pairs and of operator nodes merged
/// across sides by congruence.
pub fn congruence_trials(count: u64) -> (usize, usize) {
    let mut mismatches = 0;
    let mut cross = 0;
    for seed in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (na, nb) = (rng.random_range(4..=15), rng.random_range(4..=15));
        // Half the pairs share structure so leaf merges cascade across sides.
        let mirror = seed % 2 == 0;
        let a = random_graph(&mut rng.clone(), na);
        let b = if mirror {
            random_graph(&mut rng.clone(), na)
        } else {
            random_graph(&mut rng, nb)
        };
        rng.random_range(0..2u8);
        let (va, vb) = (
            run_graph(&a, &BTreeMap::new()).unwrap(),
            run_graph(&b, &BTreeMap::new()).unwrap(),
        );
        let jg = join_graphs(a, b);
        let mut g = EGraph::init(&jg, &va, &vb);
        let mut nodes = Vec::new();
        let mut index = BTreeMap::new();
        for side in [Side::A, Side::B] {
            for n in jg.side(side).nodes.values() {
                index.insert(NodeRef { side, id: n.id }, nodes.len());
                nodes.push((NodeRef { side, id: n.id }, n.op, n.attrs.clone(), Vec::new()));
            }
        }
        for k in 0..nodes.len() {
            let r = nodes[k].0;
            nodes[k].3 = jg
                .node(r)
                .children
                .iter()
                .map(|&c| index[&NodeRef { side: r.side, id: c }])
                .collect();
        }
        let mut merges = Vec::new();
        for _ in 0..rng.random_range(0..=5) {
            let leaves: Vec<usize> = (0..nodes.len()).filter(|&k| nodes[k].1.is_leaf()).collect();
            let (x, y) = if rng.random_bool(0.6) {
                (
                    leaves[rng.random_range(0..leaves.len())],
                    leaves[rng.random_range(0..leaves.len())],
                )
            } else {
                (rng.random_range(0..nodes.len()), rng.random_range(0..nodes.len()))
            };
            merges.push((x, y));
            g.merge(g.class_of(nodes[x].0).unwrap(), g.class_of(nodes[y].0).unwrap());
        }
        g.rebuild();
        let mut oracle = naive_closure(&nodes, &merges);
        cross += (0..nodes.len())
            .filter(|&k| nodes[k].0.side == Side::A && !nodes[k].1.is_leaf())
            .filter(|&k| {
                (0..nodes.len()).any(|j| nodes[j].0.side == Side::B && g.class_of(nodes[k].0) == g.class_of(nodes[j].0))
            })
            .count();
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                let engine = g.class_of(nodes[i].0) == g.class_of(nodes[j].0);
                if engine != (oracle.find(i) == oracle.find(j)) {
                    mismatches += 1;
                }
            }
        }
    }
    (mismatches, cross)
}
