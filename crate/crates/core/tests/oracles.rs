// SPDX-License-Identifier: Apache-2.0

//! Independent oracles for attention layouts and congruence closure.

mod common;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::randn;
use tensor_equiv::egraph::EGraph;
use tensor_equiv::exec::{eval_op, run_graph};
use tensor_equiv::graph::{join_graphs, GraphBuilder, NodeRef, Side};
use tensor_equiv::ops::{attr, OpKind};
use tensor_equiv::tensor::{Tensor, Value};

/// Attention written straight from the definition on `[b, s, h, d]` arrays.
fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Vec<f64> {
    let [b, s, h, d] = [q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]];
    let at = |t: &Tensor, bi: usize, si: usize, hi: usize, l: usize| t.data()[((bi * s + si) * h + hi) * d + l];
    let mut out = vec![0.0; b * s * h * d];
    for bi in 0..b {
        for hi in 0..h {
            for i in 0..s {
                let logits: Vec<f64> = (0..s)
                    .map(|j| scale * (0..d).map(|l| at(q, bi, i, hi, l) * at(k, bi, j, hi, l)).sum::<f64>())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = w.iter().sum();
                for l in 0..d {
                    out[((bi * s + i) * h + hi) * d + l] = (0..s).map(|j| w[j] / z * at(v, bi, j, hi, l)).sum();
                }
            }
        }
    }
    out
}

fn tensor(v: Value) -> Tensor {
    match v {
        Value::Tensor(t) => t,
        Value::Tuple(_) => panic!("expected a tensor"),
    }
}

#[test]
fn fused_attention_matches_decomposed_form() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [
            1 + seed as usize % 2,
            2 + seed as usize % 4,
            1 + seed as usize % 3,
            2 + seed as usize % 3,
        ];
        let (q, k, v) = (
            randn(&mut rng, &shape),
            randn(&mut rng, &shape),
            randn(&mut rng, &shape),
        );
        let scale: Option<f64> = if seed % 3 == 0 {
            None
        } else {
            Some(rng.random_range(0.1..2.0))
        };
        let attrs = scale.map_or_else(attr::none, attr::scale);
        let fused = tensor(
            eval_op(
                OpKind::FusedAttention,
                &attrs,
                &[
                    &Value::Tensor(q.clone()),
                    &Value::Tensor(k.clone()),
                    &Value::Tensor(v.clone()),
                ],
            )
            .unwrap(),
        );
        let t = |x: &Tensor| eval_op(OpKind::Transpose, &attr::axes(1, 2), &[&Value::Tensor(x.clone())]).unwrap();
        let inner = eval_op(OpKind::ScaledDotProductAttention, &attrs, &[&t(&q), &t(&k), &t(&v)]).unwrap();
        let decomposed = tensor(eval_op(OpKind::Transpose, &attr::axes(1, 2), &[&inner]).unwrap());
        let expect = naive_attention(&q, &k, &v, scale.unwrap_or(1.0 / (shape[3] as f64).sqrt()));
        assert_eq!(fused.shape(), &shape);
        assert_eq!(decomposed.shape(), &shape);
        for ((f, d), e) in fused.data().iter().zip(decomposed.data()).zip(&expect) {
            assert!((f - e).abs() <= 1e-9 && (d - e).abs() <= 1e-9, "seed {seed}");
        }
    }
}

#[test]
fn rebuild_matches_naive_congruence_closure() {
    let start = std::time::Instant::now();
    let (mismatches, cross) = common::congruence_trials(100);
    assert_eq!(mismatches, 0);
    assert!(start.elapsed().as_secs_f64() < 10.0);
    // the sample must exercise cross-side congruence, not just explicit merges
    assert!(cross > 50, "only {cross} congruence-merged operator nodes");
}

#[test]
fn diamond_merges_parent_in_one_rebuild() {
    let side = |x: f64| {
        let mut b = GraphBuilder::new();
        let i = b.input(Tensor::full(vec![2], x));
        let l = b.op(OpKind::Gelu, attr::gelu("tanh"), &[i]);
        let r = b.op(OpKind::Gelu, attr::gelu("exact"), &[i]);
        let top = b.op(OpKind::Add, attr::none(), &[l, r]);
        b.output(top);
        b.build().unwrap()
    };
    let (a, b) = (side(1.0), side(1.0));
    let (va, vb) = (
        run_graph(&a, &BTreeMap::new()).unwrap(),
        run_graph(&b, &BTreeMap::new()).unwrap(),
    );
    let jg = join_graphs(a, b);
    let mut g = EGraph::init(&jg, &va, &vb);
    let c = |side, id| g.class_of(NodeRef { side, id }).unwrap();
    let (ia, ib) = (c(Side::A, 0), c(Side::B, 0));
    g.merge(ia, ib);
    assert!(g.rebuild() >= 3);
    assert_eq!(
        g.class_of(NodeRef { side: Side::A, id: 3 }),
        g.class_of(NodeRef { side: Side::B, id: 3 })
    );
}
