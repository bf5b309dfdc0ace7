// SPDX-License-Identifier: Apache-2.0

//! The verification loop, fault localization and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::apply::apply_rules;
use crate::egraph::{ClassId, EGraph};
use crate::error::EngineError;
use crate::exec::run_graph;
use crate::graph::{join_graphs, ComputationGraph, JointGraph, NodeRef, Side};
use crate::ops::OpKind;
use crate::pattern::{serialize_catalogue, Level, Rule};
use crate::relation::{find_candidate_relations, match_inputs, CandidateRelation, Via};
use crate::synth::{synthesize_rule, SynthConfig};
use crate::tensor::{max_abs_diff, values_match, Tolerance, Value};
use crate::transform::{insert_auxiliary, GrammarBudget};
use crate::validate::{self, verdict_line, RuleClass, ValidationConfig};

#[derive(Debug, Clone)]
pub struct Config {
    pub max_iterations: usize,
    /// Value agreement required of candidate relations and rule witnesses.
    pub tol: Tolerance,
    pub validation: ValidationConfig,
    pub grammar: GrammarBudget,
    pub synth: SynthConfig,
    /// Blocked non-leaf pairs offered to the transform search per iteration.
    pub transform_cap: usize,
    pub max_candidates: usize,
    pub max_synthesis: usize,
    pub seed_rules: Vec<Rule>,
    /// Ops the localizer walks through without reporting.
    pub transparent: BTreeSet<OpKind>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            max_iterations: 2,
            tol: Tolerance::new(1e-2, 1e-2),
            validation: ValidationConfig::default(),
            grammar: GrammarBudget::default(),
            synth: SynthConfig::default(),
            transform_cap: 64,
            max_candidates: 512,
            max_synthesis: 128,
            seed_rules: Vec::new(),
            transparent: [OpKind::Reshape, OpKind::Transpose, OpKind::GetItem]
                .into_iter()
                .collect(),
        }
    }
}

impl Config {
    pub fn check(&self) -> Result<(), EngineError> {
        let budgets = [
            self.max_iterations,
            self.validation.trials,
            self.grammar.max_depth,
            self.synth.max_frontier,
            self.synth.max_stream,
            self.max_candidates,
            self.max_synthesis,
        ];
        if budgets.contains(&0) || self.validation.max_free < 1 {
            return Err(EngineError::Structure("all budgets must be positive".into()));
        }
        Ok(())
    }
}

/// A rule known to the engine, with its validation outcome and use count.
#[derive(Debug, Clone)]
pub struct RuleRecord {
    pub rule: Rule,
    pub class: Option<RuleClass>,
    pub verdict: validate::Verdict,
    /// Synthesis counts as the first instance; every application adds one.
    pub instances: usize,
    pub seeded: bool,
}

impl RuleRecord {
    pub fn is_accepted(&self) -> bool {
        self.rule.level.is_accepted()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Stats {
    pub iterations: usize,
    pub candidates: usize,
    pub applications: usize,
    pub synthesis_attempts: usize,
    pub synthesized: usize,
    pub rejected: usize,
    pub merges: usize,
    pub classes: usize,
    pub nodes: usize,
    pub unique_rules: usize,
    pub rule_instances: usize,
    pub formally_verified: usize,
    pub empirically_validated: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathStep {
    pub node: NodeRef,
    pub op: OpKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MismatchReport {
    pub a: NodeRef,
    pub a_op: OpKind,
    pub b: NodeRef,
    pub b_op: OpKind,
    /// `L0` when both nodes read the same input classes, so the divergence
    /// starts at these ops; `L1` otherwise.
    pub hint: &'static str,
    pub a_value: String,
    pub b_value: String,
    pub max_abs_diff: Option<f64>,
    /// Transparent nodes walked through from the outputs, per side.
    pub path_a: Vec<PathStep>,
    pub path_b: Vec<PathStep>,
    pub catalogue: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Equivalent,
    NotEquivalent(Box<MismatchReport>),
    Inconclusive(Box<MismatchReport>),
}

impl Verdict {
    pub fn name(&self) -> &'static str {
        match self {
            Verdict::Equivalent => "EQUIVALENT",
            Verdict::NotEquivalent(_) => "NOT_EQUIVALENT",
            Verdict::Inconclusive(_) => "INCONCLUSIVE",
        }
    }

    pub fn report(&self) -> Option<&MismatchReport> {
        match self {
            Verdict::Equivalent => None,
            Verdict::NotEquivalent(r) | Verdict::Inconclusive(r) => Some(r),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Verdict::Equivalent => 0,
            Verdict::NotEquivalent(_) => 1,
            Verdict::Inconclusive(_) => 2,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct CompareResult {
    pub verdict: Verdict,
    pub rules: Vec<RuleRecord>,
    /// One `verdict_line` per validation, in order.
    pub verdict_log: Vec<String>,
    /// Applied rule instances as `<rule-id> <class-u> <class-v>`.
    pub application_log: Vec<String>,
    pub stats: Stats,
    pub egraph: EGraph,
    pub outputs: Vec<(NodeRef, NodeRef)>,
}

impl CompareResult {
    /// Accepted rules in discovery order.
    pub fn accepted_rules(&self) -> Vec<Rule> {
        self.rules
            .iter()
            .filter(|r| r.is_accepted())
            .map(|r| r.rule.clone())
            .collect()
    }

    pub fn catalogue(&self) -> String {
        serialize_catalogue(&self.accepted_rules())
    }

    /// Accepted rules that were synthesized in this run.
    pub fn synthesized_rules(&self) -> Vec<&RuleRecord> {
        self.rules.iter().filter(|r| r.is_accepted() && !r.seeded).collect()
    }
}

/// Corresponding output nodes, A side first.
pub type OutputPairs = Vec<(NodeRef, NodeRef)>;

/// Executes both graphs and builds their joint e-graph.
pub fn init_egraph(
    a: &ComputationGraph,
    b: &ComputationGraph,
) -> Result<(JointGraph, EGraph, OutputPairs), EngineError> {
    if a.outputs.len() != b.outputs.len() {
        return Err(EngineError::Structure(format!(
            "graphs have {} and {} outputs",
            a.outputs.len(),
            b.outputs.len()
        )));
    }
    let (va, vb) = (run_graph(a, &BTreeMap::new())?, run_graph(b, &BTreeMap::new())?);
    let outputs = a
        .outputs
        .iter()
        .zip(&b.outputs)
        .map(|(&x, &y)| (NodeRef { side: Side::A, id: x }, NodeRef { side: Side::B, id: y }))
        .collect();
    let jg = join_graphs(a.clone(), b.clone());
    let g = EGraph::init(&jg, &va, &vb);
    Ok((jg, g, outputs))
}

/// Pairs input leaves across the sides, inserting layout transforms where
/// needed, and restores congruence.
pub fn merge_inputs(g: &mut EGraph, cfg: &Config) -> Result<(), EngineError> {
    for cand in match_inputs(g, cfg.tol, cfg.grammar) {
        let (u, v) = match &cand.via {
            Via::Direct => (cand.left, cand.right),
            Via::Transformed { source, expr } => {
                let aux = insert_auxiliary(g, &[*source], expr)?;
                (aux, cand.target())
            }
        };
        g.merge(u, v);
    }
    g.rebuild();
    Ok(())
}

struct Run<'c> {
    cfg: &'c Config,
    g: EGraph,
    records: Vec<RuleRecord>,
    /// Mirrors `records` for `apply_rules`.
    rules: Vec<Rule>,
    keys: BTreeMap<String, usize>,
    verdict_log: Vec<String>,
    application_log: Vec<String>,
    stats: Stats,
}

impl Run<'_> {
    fn add_rule(&mut self, mut rule: Rule, seeded: bool) -> usize {
        let key = rule.canonical_key();
        if let Some(&i) = self.keys.get(&key) {
            return i;
        }
        let (class, verdict) = if seeded && rule.level.is_accepted() {
            let v = match rule.level {
                Level::EmpiricallyValidated { trials } => validate::Verdict::EmpiricallyValidated { trials },
                _ => validate::Verdict::FormallyVerified,
            };
            (Some(validate::classify(&rule)), v)
        } else {
            validate::validate(&rule, &self.cfg.validation)
        };
        self.verdict_log.push(verdict_line(&rule, class, &verdict));
        rule.level = verdict.level().unwrap_or(Level::Unvalidated);
        if !rule.level.is_accepted() {
            self.stats.rejected += 1;
        }
        let i = self.records.len();
        self.records.push(RuleRecord {
            rule: rule.clone(),
            class,
            verdict,
            instances: usize::from(!seeded),
            seeded,
        });
        self.rules.push(rule);
        self.keys.insert(key, i);
        i
    }

    fn merge(&mut self, u: ClassId, v: ClassId) {
        self.g.merge(u, v);
        self.g.rebuild();
    }

    fn relate(&mut self, cand: &CandidateRelation) -> Result<(), EngineError> {
        let (u, v) = match &cand.via {
            Via::Direct => (self.g.find(cand.left), self.g.find(cand.right)),
            Via::Transformed { source, expr } => {
                let aux = insert_auxiliary(&mut self.g, &[*source], expr)?;
                self.g.rebuild();
                (self.g.find(aux), self.g.find(cand.target()))
            }
        };
        if u == v {
            return Ok(());
        }
        if let Some(app) = apply_rules(&self.rules, &self.g, u, v, self.cfg.tol) {
            self.records[app.rule].instances += 1;
            self.stats.applications += 1;
            self.application_log
                .push(format!("{} {u} {v}", self.rules[app.rule].id()));
            self.merge(u, v);
            return Ok(());
        }
        if self.stats.synthesis_attempts >= self.cfg.max_synthesis {
            return Ok(());
        }
        self.stats.synthesis_attempts += 1;
        let Some(s) = synthesize_rule(&self.g, u, v, self.cfg.synth) else {
            return Ok(());
        };
        if self.keys.contains_key(&s.rule.canonical_key()) {
            return Ok(());
        }
        let i = self.add_rule(s.rule, false);
        if self.records[i].is_accepted() {
            self.stats.synthesized += 1;
            self.merge(u, v);
        }
        Ok(())
    }

    fn outputs_merged(&self, outputs: &[(ClassId, ClassId)]) -> bool {
        outputs.iter().all(|&(a, b)| self.g.find(a) == self.g.find(b))
    }
}

/// Decides whether `a` and `b` compute the same function on their bound inputs.
pub fn compare(a: &ComputationGraph, b: &ComputationGraph, cfg: &Config) -> Result<CompareResult, EngineError> {
    cfg.check()?;
    let (jg, g, outputs) = init_egraph(a, b)?;
    let mut run = Run {
        cfg,
        g,
        records: Vec::new(),
        rules: Vec::new(),
        keys: BTreeMap::new(),
        verdict_log: Vec::new(),
        application_log: Vec::new(),
        stats: Stats::default(),
    };
    for r in &cfg.seed_rules {
        run.add_rule(r.clone(), true);
    }
    let out_classes: Vec<(ClassId, ClassId)> = outputs
        .iter()
        .map(|&(x, y)| {
            (
                run.g.class_of(x).expect("captured"),
                run.g.class_of(y).expect("captured"),
            )
        })
        .collect();
    for _ in 0..cfg.max_iterations {
        if run.outputs_merged(&out_classes) {
            break;
        }
        run.stats.iterations += 1;
        let before = run.g.merge_count;
        merge_inputs(&mut run.g, cfg)?;
        let cands = find_candidate_relations(&run.g, cfg.tol, cfg.grammar, cfg.transform_cap);
        for cand in cands.iter().take(cfg.max_candidates) {
            run.stats.candidates += 1;
            run.relate(cand)?;
            if run.outputs_merged(&out_classes) {
                break;
            }
        }
        if run.g.merge_count == before {
            break;
        }
    }
    let verdict = if run.outputs_merged(&out_classes) {
        Verdict::Equivalent
    } else {
        let catalogue = serialize_catalogue(
            &run.rules
                .iter()
                .filter(|r| r.level.is_accepted())
                .cloned()
                .collect::<Vec<_>>(),
        );
        let report = localize(&run.g, &jg.a, &jg.b, &outputs, &cfg.transparent, catalogue);
        let diverged = out_classes
            .iter()
            .any(|&(x, y)| match (run.g.value(x), run.g.value(y)) {
                (Some(p), Some(q)) => !values_match(p, q, cfg.tol),
                _ => false,
            });
        let refuted = run.records.iter().any(|r| r.verdict.is_counterexample());
        if diverged || refuted {
            Verdict::NotEquivalent(Box::new(report))
        } else {
            Verdict::Inconclusive(Box::new(report))
        }
    };
    let mut stats = run.stats;
    stats.merges = run.g.merge_count;
    stats.classes = run.g.class_count();
    stats.nodes = run.g.node_count();
    for r in run.records.iter().filter(|r| r.is_accepted()) {
        stats.unique_rules += 1;
        stats.rule_instances += r.instances;
        match r.rule.level {
            Level::FormallyVerified => stats.formally_verified += 1,
            Level::EmpiricallyValidated { .. } => stats.empirically_validated += 1,
            Level::Unvalidated => {}
        }
    }
    Ok(CompareResult {
        verdict,
        rules: run.records,
        verdict_log: run.verdict_log,
        application_log: run.application_log,
        stats,
        egraph: run.g,
        outputs,
    })
}

fn node_depths(g: &ComputationGraph) -> BTreeMap<u64, usize> {
    let mut depth = BTreeMap::new();
    for id in g.topo_order().expect("validated graph is acyclic") {
        let d = g.nodes[&id].children.iter().map(|c| depth[c] + 1).max().unwrap_or(0);
        depth.insert(id, d);
    }
    depth
}

/// Earliest unmatched non-transparent node below the unmatched outputs of one
/// side, and the transparent nodes passed on the way to it.
fn side_frontier(
    g: &EGraph,
    graph: &ComputationGraph,
    side: Side,
    starts: &[u64],
    transparent: &BTreeSet<OpKind>,
) -> (u64, Vec<PathStep>) {
    let r = |id: u64| NodeRef { side, id };
    let matched = |id: u64| g.class_of(r(id)).is_some_and(|c| g.has_side(c, side.other()));
    let stops = |id: u64| matched(id) || graph.nodes[&id].op.is_leaf();
    let mut reached: BTreeSet<u64> = BTreeSet::new();
    let mut parent: BTreeMap<u64, u64> = BTreeMap::new();
    let mut stack: Vec<u64> = starts.iter().rev().copied().filter(|&s| !stops(s)).collect();
    reached.extend(stack.iter().copied());
    while let Some(n) = stack.pop() {
        for &c in graph.nodes[&n].children.iter().rev() {
            if !stops(c) && reached.insert(c) {
                parent.insert(c, n);
                stack.push(c);
            }
        }
    }
    // A node qualifies when nothing unmatched and opaque lies below it.
    let mut blocked: BTreeMap<u64, bool> = BTreeMap::new();
    for id in graph.topo_order().expect("validated graph is acyclic") {
        if !reached.contains(&id) {
            continue;
        }
        let below = graph.nodes[&id]
            .children
            .iter()
            .filter(|c| reached.contains(c))
            .any(|c| blocked[c] || !transparent.contains(&graph.nodes[c].op));
        blocked.insert(id, below);
    }
    let depth = node_depths(graph);
    let pick = |opaque: bool| {
        reached
            .iter()
            .copied()
            .filter(|id| !blocked[id] && transparent.contains(&graph.nodes[id].op) != opaque)
            .min_by_key(|id| (depth[id], *id))
    };
    let Some(found) = pick(true).or_else(|| pick(false)) else {
        let id = starts.first().copied().unwrap_or_default();
        return (id, Vec::new());
    };
    let mut path = Vec::new();
    let mut cur = found;
    while let Some(&p) = parent.get(&cur) {
        path.push(p);
        cur = p;
    }
    path.reverse();
    let steps = path
        .into_iter()
        .filter(|id| transparent.contains(&graph.nodes[id].op))
        .map(|id| PathStep {
            node: r(id),
            op: graph.nodes[&id].op,
        })
        .collect();
    (found, steps)
}

/// Reports the pair of earliest unexplained nodes, one per side.
pub fn localize(
    g: &EGraph,
    a: &ComputationGraph,
    b: &ComputationGraph,
    outputs: &[(NodeRef, NodeRef)],
    transparent: &BTreeSet<OpKind>,
    catalogue: String,
) -> MismatchReport {
    let open: Vec<&(NodeRef, NodeRef)> = outputs
        .iter()
        .filter(|(x, y)| g.class_of(*x) != g.class_of(*y))
        .collect();
    let starts_a: Vec<u64> = open.iter().map(|(x, _)| x.id).collect();
    let starts_b: Vec<u64> = open.iter().map(|(_, y)| y.id).collect();
    let (na, path_a) = side_frontier(g, a, Side::A, &starts_a, transparent);
    let (nb, path_b) = side_frontier(g, b, Side::B, &starts_b, transparent);
    let (ra, rb) = (NodeRef { side: Side::A, id: na }, NodeRef { side: Side::B, id: nb });
    let inputs = |graph: &ComputationGraph, side: Side, id: u64| -> BTreeSet<ClassId> {
        graph.nodes[&id]
            .children
            .iter()
            .filter_map(|&c| g.class_of(NodeRef { side, id: c }))
            .collect()
    };
    let hint = if inputs(a, Side::A, na) == inputs(b, Side::B, nb) {
        "L0"
    } else {
        "L1"
    };
    let va = g.class_of(ra).and_then(|c| g.value(c));
    let vb = g.class_of(rb).and_then(|c| g.value(c));
    let summary = |v: Option<&Value>| v.map_or_else(|| "unavailable".to_string(), Value::shape_summary);
    MismatchReport {
        a: ra,
        a_op: a.nodes[&na].op,
        b: rb,
        b_op: b.nodes[&nb].op,
        hint,
        a_value: summary(va),
        b_value: summary(vb),
        max_abs_diff: va.zip(vb).and_then(|(x, y)| max_abs_diff(x, y)),
        path_a,
        path_b,
        catalogue,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Lines,
}

fn fmt_path(p: &[PathStep]) -> String {
    if p.is_empty() {
        return "-".into();
    }
    p.iter()
        .map(|s| format!("{}:{}", s.node, s.op))
        .collect::<Vec<_>>()
        .join(" ")
}

fn fmt_diff(d: Option<f64>) -> String {
    d.map_or_else(|| "n/a".to_string(), |d| format!("{d:.6e}"))
}

/// Deterministic report of a comparison.
pub fn emit_report(res: &CompareResult, format: ReportFormat) -> String {
    let s = &res.stats;
    let mut out = String::new();
    let mut line = |l: String| {
        out.push_str(&l);
        out.push('\n');
    };
    match format {
        ReportFormat::Text => {
            line(format!("verdict: {}", res.verdict));
            line(format!("iterations: {}", s.iterations));
            line(format!(
                "rules: {} unique, {} instances ({} formally verified, {} empirically validated, {} rejected)",
                s.unique_rules, s.rule_instances, s.formally_verified, s.empirically_validated, s.rejected
            ));
            line(format!(
                "search: {} candidates, {} applications, {} synthesis attempts",
                s.candidates, s.applications, s.synthesis_attempts
            ));
            line(format!(
                "e-graph: {} classes, {} nodes, {} merges",
                s.classes, s.nodes, s.merges
            ));
            if !res.verdict_log.is_empty() {
                line("validation:".into());
                for v in &res.verdict_log {
                    line(format!("  {v}"));
                }
            }
            for r in res.rules.iter().filter(|r| r.is_accepted()) {
                line(format!(
                    "rule {} x{}: {} <=> {}",
                    r.rule.id(),
                    r.instances,
                    r.rule.lhs,
                    r.rule.rhs
                ));
            }
            if let Some(m) = res.verdict.report() {
                line("mismatch:".into());
                line(format!("  A node {} ({}) value {}", m.a.id, m.a_op, m.a_value));
                line(format!("  B node {} ({}) value {}", m.b.id, m.b_op, m.b_value));
                line(format!("  max abs diff: {}", fmt_diff(m.max_abs_diff)));
                line(format!("  level hint: {}", m.hint));
                line(format!("  transparent path A: {}", fmt_path(&m.path_a)));
                line(format!("  transparent path B: {}", fmt_path(&m.path_b)));
            }
        }
        ReportFormat::Lines => {
            line(format!("verdict {}", res.verdict));
            for (k, v) in [
                ("iterations", s.iterations),
                ("candidates", s.candidates),
                ("applications", s.applications),
                ("synthesis_attempts", s.synthesis_attempts),
                ("unique_rules", s.unique_rules),
                ("rule_instances", s.rule_instances),
                ("formally_verified", s.formally_verified),
                ("empirically_validated", s.empirically_validated),
                ("rejected", s.rejected),
                ("classes", s.classes),
                ("nodes", s.nodes),
                ("merges", s.merges),
            ] {
                line(format!("stat {k} {v}"));
            }
            for v in &res.verdict_log {
                line(format!("validation {v}"));
            }
            for r in res.rules.iter().filter(|r| r.is_accepted()) {
                line(format!(
                    "rule {} {} instances {}",
                    r.rule.id(),
                    r.rule.level,
                    r.instances
                ));
            }
            if let Some(m) = res.verdict.report() {
                line(format!(
                    "mismatch {} {} {} {} hint {} diff {}",
                    m.a,
                    m.a_op,
                    m.b,
                    m.b_op,
                    m.hint,
                    fmt_diff(m.max_abs_diff)
                ));
                line(format!("path A {}", fmt_path(&m.path_a)));
                line(format!("path B {}", fmt_path(&m.path_b)));
            }
        }
    }
    out
}
