// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use proptest::prelude::*;

use tensor_equiv::exec::eval_op;
use tensor_equiv::graph::{ComputationGraph, GraphBuilder};
use tensor_equiv::ops::{attr, OpKind};
use tensor_equiv::pattern::{parse_catalogue, serialize_catalogue, Level, Pattern, Rule};
use tensor_equiv::shape::{ShapeConstraint, SymDim};
use tensor_equiv::tensor::{Tensor, Value};
use tensor_equiv::transform::TransformExpr;

fn iota(shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |i| i as f64)
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..4)
}

fn pattern_strategy() -> impl Strategy<Value = Pattern> {
    let leaf = prop::sample::select(vec!["a", "b", "c"]).prop_map(Pattern::var);
    leaf.prop_recursive(3, 12, 3, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(x, y)| Pattern::op(OpKind::Add, attr::none(), vec![x, y])),
            (inner.clone(), 0i64..3, 0i64..3).prop_map(|(x, a, b)| Pattern::op(
                OpKind::Transpose,
                attr::axes(a, b),
                vec![x]
            )),
            (inner.clone(), 1i64..4).prop_map(|(x, k)| Pattern::op(OpKind::Chunk, attr::chunk(k, 1), vec![x])),
            (inner.clone(), 0i64..3).prop_map(|(x, i)| Pattern::op(OpKind::GetItem, attr::index(i), vec![x])),
            inner
                .clone()
                .prop_map(|x| Pattern::op(OpKind::Gelu, attr::gelu("tanh"), vec![x])),
            (inner.clone(), prop::collection::vec(1i64..9, 1..4)).prop_map(|(x, s)| Pattern::op(
                OpKind::Reshape,
                attr::shape(&s),
                vec![x]
            )),
            inner.prop_map(|x| Pattern::op(
                OpKind::Mul,
                attr::none(),
                vec![x, Pattern::op(OpKind::Constant, attr::constant(0.5, &[]), vec![])]
            )),
        ]
    })
}

proptest! {
    #[test]
    fn split_then_concat_is_identity(shape in shape_strategy(), axis_seed in 0usize..8, size in 1usize..5) {
        let axis = axis_seed % shape.len();
        let t = iota(shape);
        let parts = t.split(size, axis).unwrap();
        let refs: Vec<&Tensor> = parts.iter().collect();
        prop_assert_eq!(Tensor::concat(&refs, axis).unwrap(), t);
    }

    #[test]
    fn transpose_is_an_involution(shape in shape_strategy(), a in 0usize..3, b in 0usize..3) {
        let (a, b) = (a % shape.len(), b % shape.len());
        let t = iota(shape);
        prop_assert_eq!(t.swap_axes(a, b).unwrap().swap_axes(a, b).unwrap(), t);
    }

    #[test]
    fn chunk_equals_split_by_ceil_size(rows in 1usize..4, n in 1usize..13, k in 1i64..5) {
        let x = Value::Tensor(iota(vec![rows, n]));
        let size = n.div_ceil(k as usize) as i64;
        let c = eval_op(OpKind::Chunk, &attr::chunk(k, 1), &[&x]).unwrap();
        let s = eval_op(OpKind::Split, &attr::split(size, 1), &[&x]).unwrap();
        prop_assert_eq!(c, s);
    }

    #[test]
    fn topo_order_respects_edges(edges in prop::collection::vec((0usize..100, 0usize..100), 1..20)) {
        let mut b = GraphBuilder::new();
        let mut ids = vec![b.input(Tensor::full(vec![2], 1.0))];
        for (x, y) in edges {
            let (p, q) = (ids[x % ids.len()], ids[y % ids.len()]);
            ids.push(b.op(OpKind::Add, attr::none(), &[p, q]));
        }
        b.output(*ids.last().unwrap());
        let g = b.build().unwrap();
        let order = g.topo_order().unwrap();
        let pos: BTreeMap<u64, usize> = order.iter().enumerate().map(|(i, &n)| (n, i)).collect();
        prop_assert_eq!(order.len(), g.len());
        for n in g.nodes.values() {
            for c in &n.children {
                prop_assert!(pos[c] < pos[&n.id]);
            }
        }
        let back = ComputationGraph::parse(&g.serialize()).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn pattern_print_parse_round_trip(p in pattern_strategy()) {
        prop_assert_eq!(Pattern::parse(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn catalogue_round_trip(l in pattern_strategy(), r in pattern_strategy(), k in 1usize..8, fv in any::<bool>()) {
        let pre = vec![
            ShapeConstraint::Rank("a".into(), 2),
            ShapeConstraint::Eq(SymDim::dim("a", 1), SymDim::Const(k as i64)),
        ];
        let mut rule = Rule::new(l, r, pre);
        rule.level = if fv { Level::FormallyVerified } else { Level::EmpiricallyValidated { trials: 32 } };
        let text = serialize_catalogue(std::slice::from_ref(&rule));
        let back = parse_catalogue(&text).unwrap();
        prop_assert_eq!(back.len(), 1);
        prop_assert_eq!(back[0].id(), rule.id());
        prop_assert_eq!(&back[0].level, &rule.level);
        prop_assert_eq!(serialize_catalogue(&back), text);
    }

    #[test]
    fn invertible_transforms_round_trip(rows in 1usize..4, cols in 1usize..4, which in 0usize..4) {
        let shapes = [vec![rows, cols], vec![rows, cols]];
        let xs = [iota(shapes[0].clone()), iota(shapes[1].clone()).map(|v| -v - 1.0)];
        let src = TransformExpr::Src;
        let t = match which {
            0 => TransformExpr::Transpose(Box::new(src(0)), 0, 1),
            1 => TransformExpr::Concat(vec![src(0), src(1)], 0),
            2 => TransformExpr::Reshape(Box::new(src(0)), vec![rows * cols]),
            _ => TransformExpr::Transpose(Box::new(TransformExpr::Concat(vec![src(0), src(1)], 1)), 0, 1),
        };
        let out = t.apply(&[&xs[0], &xs[1]]).unwrap();
        let used = if matches!(which, 0 | 2) { 1 } else { 2 };
        let inv = t.inverse(&shapes[..used]).unwrap();
        prop_assert_eq!(inv.len(), used);
        for (i, e) in inv.iter().enumerate() {
            prop_assert_eq!(&e.apply(&[&out]).unwrap(), &xs[i]);
        }
    }
}
