// SPDX-License-Identifier: Apache-2.0

//! Acceptance gate: one PASS/FAIL line per criterion.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use tensor_equiv::driver::{
    compare, emit_report, init_egraph, merge_inputs, CompareResult, Config, ReportFormat, Verdict,
};
use tensor_equiv::exec::run_graph;
use tensor_equiv::fixtures::{gen_pair, inject_bug, BugKind, Fixture, FixtureName, LocalizationLevel};
use tensor_equiv::graph::{NodeRef, Side};
use tensor_equiv::ops::OpKind;
use tensor_equiv::pattern::{Level, Pattern, Rule};
use tensor_equiv::synth::{generality_audit, synthesize_rule};
use tensor_equiv::tensor::{values_match, Tolerance, Value};

const SEED: u64 = 0;
const MAX_ITERATIONS: usize = 2;
const RUN_BUDGET: Duration = Duration::from_secs(30);
const AUDIT_ATOL: f64 = 1e-2;
const AUDIT_SEEDS: std::ops::Range<u64> = 1000..1008;
const CONGRUENCE_GRAPHS: u64 = 100;
const CONGRUENCE_BUDGET: Duration = Duration::from_secs(10);

/// Golden localization level per bug kind.
const GOLDEN: [(BugKind, LocalizationLevel); 5] = [
    (BugKind::GeluApproxSwap, LocalizationLevel::L0),
    (BugKind::MissingAttnScale, LocalizationLevel::L0),
    (BugKind::WrongRotationTranspose, LocalizationLevel::L1),
    (BugKind::MissingClip, LocalizationLevel::L0),
    (BugKind::WrongSplitSemantics, LocalizationLevel::L1),
];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn config() -> Config {
    let mut cfg = Config {
        max_iterations: MAX_ITERATIONS,
        ..Config::default()
    };
    cfg.validation.seed = SEED;
    cfg
}

fn run(fx: &Fixture) -> (CompareResult, Duration) {
    let t = Instant::now();
    let res = compare(&fx.a, &fx.b, &config()).expect("compare");
    (res, t.elapsed())
}

fn parse_rule(l: &str, r: &str) -> Rule {
    Rule::new(Pattern::parse(l).unwrap(), Pattern::parse(r).unwrap(), vec![])
}

/// Key of a rule ignoring its preconditions.
fn shape_free_key(r: &Rule) -> String {
    Rule::new(r.lhs.clone(), r.rhs.clone(), vec![]).canonical_key()
}

fn has_op(r: &Rule, op: OpKind) -> bool {
    r.lhs.ops().contains(&op) || r.rhs.ops().contains(&op)
}

fn c1_equivalence_suite() -> Outcome {
    let mut bad = Vec::new();
    let mut slowest = Duration::ZERO;
    for name in FixtureName::suite() {
        let fx = gen_pair(name, SEED).unwrap();
        let (res, took) = run(&fx);
        slowest = slowest.max(took);
        if res.verdict != Verdict::Equivalent || res.stats.iterations > MAX_ITERATIONS || took >= RUN_BUDGET {
            bad.push(format!(
                "{name}: {} in {} iterations, {took:?}",
                res.verdict, res.stats.iterations
            ));
        }
    }
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            format!("7/7 equivalent, slowest {slowest:?}")
        } else {
            bad.join("; ")
        },
    )
}

fn c2_rule_fidelity() -> Outcome {
    let cfg = config();
    let fx = gen_pair(FixtureName::Fig2Linear, SEED).unwrap();
    let (_, mut g, outputs) = init_egraph(&fx.a, &fx.b).unwrap();
    merge_inputs(&mut g, &cfg).unwrap();
    let (u, v) = (g.class_of(outputs[0].0).unwrap(), g.class_of(outputs[0].1).unwrap());
    let Some(s) = synthesize_rule(&g, u, v, cfg.synth) else {
        return outcome(false, "fig2-linear: no rule synthesized");
    };
    let expected = parse_rule("(linear ?a (transpose :axes [0 1] ?c) ?b)", "(addmm ?b ?a ?c)");
    let same = shape_free_key(&s.rule) == shape_free_key(&expected);
    let audit = generality_audit(&s.rule, &g, u, v, cfg.synth);
    let engine = run(&fx).0;
    let engine_same = engine.synthesized_rules().len() == 1
        && shape_free_key(&engine.synthesized_rules()[0].rule) == shape_free_key(&expected);
    let gpt2 = run(&gen_pair(FixtureName::Gpt2Fragment, SEED).unwrap()).0;
    let ln_free = gpt2.accepted_rules().iter().all(|r| !has_op(r, OpKind::LayerNorm));
    outcome(
        same && audit.is_ok() && engine_same && ln_free,
        format!(
            "fig2 rule `{} <=> {}` matches={same} engine_matches={engine_same} audit_ok={} gpt2_layernorm_free={ln_free}",
            s.rule.lhs,
            s.rule.rhs,
            audit.is_ok()
        ),
    )
}

fn c3_validation_split() -> Outcome {
    let res = run(&gen_pair(FixtureName::Gpt2Fragment, SEED).unwrap()).0;
    let level_of = |op: OpKind| -> Vec<Level> {
        res.synthesized_rules()
            .iter()
            .filter(|r| has_op(&r.rule, op))
            .map(|r| r.rule.level)
            .collect()
    };
    let split = level_of(OpKind::Chunk);
    let attn = level_of(OpKind::FusedAttention);
    let split_ok = !split.is_empty() && split.iter().all(|l| *l == Level::FormallyVerified);
    let attn_ok = !attn.is_empty() && attn.iter().all(|l| matches!(l, Level::EmpiricallyValidated { .. }));
    let log = res.verdict_log.join("\n");
    let logged = log.contains("formally-verified") && log.contains("empirically-validated");
    outcome(
        split_ok && attn_ok && logged,
        format!("split/chunk {split:?}, attention {attn:?}, log records both levels: {logged}"),
    )
}

fn c4_rule_reuse() -> Outcome {
    let one = run(&gen_pair(FixtureName::TinyTransformer { layers: 1 }, SEED).unwrap()).0;
    let four = run(&gen_pair(FixtureName::TinyTransformer { layers: 4 }, SEED).unwrap()).0;
    let keys = |r: &CompareResult| -> BTreeSet<String> {
        r.synthesized_rules().iter().map(|x| x.rule.canonical_key()).collect()
    };
    let same = keys(&one) == keys(&four);
    let (a1, a4) = (one.stats.applications, four.stats.applications);
    let both_eq = one.verdict == Verdict::Equivalent && four.verdict == Verdict::Equivalent;
    outcome(
        same && a1 > 0 && a4 >= 4 * a1 && both_eq,
        format!(
            "unique rules {} vs {} (identical: {same}); applications {a1} -> {a4}; instances {} -> {}",
            keys(&one).len(),
            keys(&four).len(),
            one.stats.rule_instances,
            four.stats.rule_instances
        ),
    )
}

fn c5_bug_localization() -> Outcome {
    let fx = gen_pair(FixtureName::Gpt2Fragment, SEED).unwrap();
    let mut parts = Vec::new();
    let mut ok = true;
    let mut exact = 0;
    for (bug, golden) in GOLDEN {
        let m = inject_bug(&fx, bug).unwrap();
        let res = run(&m).0;
        let level = match &res.verdict {
            Verdict::NotEquivalent(r) => Some(m.meta.level(&[r.a, r.b])),
            _ => None,
        };
        ok &= level == Some(golden);
        exact += usize::from(level == Some(LocalizationLevel::L0));
        let lv = level.map_or_else(|| res.verdict.to_string(), |l| l.to_string());
        parts.push(format!("{bug}={lv}"));
    }
    ok &= exact >= 3;
    outcome(ok, format!("{} ({exact}/5 at L0)", parts.join(" ")))
}

/// Values of every node of both graphs of `fx` regenerated at `seed`.
fn replay(name: FixtureName, seed: u64) -> BTreeMap<NodeRef, Value> {
    let fx = gen_pair(name, seed).unwrap();
    let mut out = BTreeMap::new();
    for (side, g) in [(Side::A, &fx.a), (Side::B, &fx.b)] {
        for (id, v) in run_graph(g, &BTreeMap::new()).unwrap() {
            out.insert(NodeRef { side, id }, v);
        }
    }
    out
}

fn c6_soundness_audit() -> Outcome {
    let tol = Tolerance::abs(AUDIT_ATOL);
    let (mut checked, mut violations) = (0usize, Vec::new());
    for name in FixtureName::suite() {
        let res = run(&gen_pair(name, SEED).unwrap()).0;
        let replays: Vec<BTreeMap<NodeRef, Value>> = AUDIT_SEEDS.map(|s| replay(name, s)).collect();
        for c in res.egraph.classes() {
            let origins = res.egraph.origins(c);
            let (xs, ys): (Vec<&NodeRef>, Vec<&NodeRef>) = origins.iter().partition(|r| r.side == Side::A);
            if xs.is_empty() || ys.is_empty() {
                continue;
            }
            for x in &xs {
                for y in &ys {
                    checked += 1;
                    if !replays.iter().all(|vals| values_match(&vals[x], &vals[y], tol)) {
                        violations.push(format!("{name}: {x} ~ {y}"));
                    }
                }
            }
        }
    }
    outcome(
        violations.is_empty() && checked > 0,
        format!(
            "{checked} merged cross-side pairs x {} seeds, {} violations {violations:?}",
            AUDIT_SEEDS.count(),
            violations.len()
        ),
    )
}

fn c7_congruence_oracle() -> Outcome {
    let t = Instant::now();
    let (mismatches, cross) = common::congruence_trials(CONGRUENCE_GRAPHS);
    let took = t.elapsed();
    outcome(
        mismatches == 0 && took < CONGRUENCE_BUDGET,
        format!(
            "{CONGRUENCE_GRAPHS} graphs, {mismatches} partition mismatches, {cross} cross-side congruences, {took:?}"
        ),
    )
}

fn c8_split_precondition() -> Outcome {
    let res = run(&gen_pair(FixtureName::SplitChunk { hidden: 10 }, SEED).unwrap()).0;
    let rejected: Vec<String> = res
        .rules
        .iter()
        .filter(|r| !r.is_accepted() && has_op(&r.rule, OpKind::Chunk))
        .map(|r| r.verdict.to_string())
        .collect();
    let accepted_chunk = res.accepted_rules().iter().any(|r| has_op(r, OpKind::Chunk));
    let not_eq = res.verdict != Verdict::Equivalent;
    outcome(
        !rejected.is_empty() && !accepted_chunk && not_eq,
        format!(
            "verdict {}, {} split/chunk rules {}, none accepted: {}",
            res.verdict,
            rejected.len(),
            rejected.join(" "),
            !accepted_chunk
        ),
    )
}

fn suite_transcript() -> String {
    let mut out = String::new();
    let fx = gen_pair(FixtureName::Gpt2Fragment, SEED).unwrap();
    let mut pairs: Vec<Fixture> = FixtureName::suite()
        .into_iter()
        .map(|n| gen_pair(n, SEED).unwrap())
        .collect();
    pairs.extend(BugKind::ALL.into_iter().map(|b| inject_bug(&fx, b).unwrap()));
    for p in &pairs {
        let res = run(p).0;
        out.push_str(&format!("## {} {:?}\n", p.name, p.bug));
        out.push_str(&emit_report(&res, ReportFormat::Text));
        out.push_str(&emit_report(&res, ReportFormat::Lines));
        out.push_str(&res.catalogue());
    }
    out
}

fn c9_determinism() -> Outcome {
    let (x, y) = (suite_transcript(), suite_transcript());
    outcome(
        x == y,
        format!("two suite transcripts of {} bytes, identical: {}", x.len(), x == y),
    )
}

fn main() -> std::process::ExitCode {
    println!(
        "tolerances: engine atol 1e-2 rtol 1e-2, validation atol 1e-4 rtol 0, fixture differential 1e-9, audit atol {AUDIT_ATOL:e}"
    );
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("equivalence suite", c1_equivalence_suite),
        ("rule fidelity", c2_rule_fidelity),
        ("validation split", c3_validation_split),
        ("rule reuse", c4_rule_reuse),
        ("bug detection and localization", c5_bug_localization),
        ("soundness audit", c6_soundness_audit),
        ("congruence oracle", c7_congruence_oracle),
        ("split/chunk precondition", c8_split_precondition),
        ("determinism", c9_determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        println!(
            "{} criterion {} ({name}): {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
        if !o.pass {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        std::process::ExitCode::SUCCESS
    } else {
        eprintln!("failed criteria: {failed:?}");
        std::process::ExitCode::FAILURE
    }
}
