// SPDX-License-Identifier: Apache-2.0

//! Rule validation: structural pre-check, classification, symbolic proofs
//! where a decision procedure applies, randomized testing otherwise.

mod scalar;
mod symbolic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::ExecError;
use crate::exec::{eval_op, normalize_attrs, ValueShape};
use crate::ops::OpKind;
use crate::pattern::{Level, Pattern, Rule};
use crate::shape::{var_ranks, Assignment, ShapeInference, Solved};
use crate::tensor::{values_match, Tensor, Tolerance, Value};

pub use scalar::verify_scalar;
pub use symbolic::verify_rearrangement;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RuleClass {
    ScalarLogic,
    TensorRearrangement,
    OpaqueHeavy,
}

impl fmt::Display for RuleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuleClass::ScalarLogic => "scalar-logic",
            RuleClass::TensorRearrangement => "tensor-rearrangement",
            RuleClass::OpaqueHeavy => "opaque-heavy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RejectReason {
    Trivial,
    FreeVariables,
    Inconsistent,
    Vacuous,
    Counterexample,
    InvalidRule,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::Trivial => "trivial",
            RejectReason::FreeVariables => "free-variables",
            RejectReason::Inconsistent => "inconsistent",
            RejectReason::Vacuous => "vacuous",
            RejectReason::Counterexample => "counterexample",
            RejectReason::InvalidRule => "invalid-rule",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    FormallyVerified,
    EmpiricallyValidated {
        trials: usize,
    },
    Rejected {
        reason: RejectReason,
        detail: String,
        /// Hash of the offending inputs.
        counterexample: Option<String>,
    },
}

impl Verdict {
    fn reject(reason: RejectReason, detail: impl Into<String>) -> Verdict {
        Verdict::Rejected {
            reason,
            detail: detail.into(),
            counterexample: None,
        }
    }

    pub fn level(&self) -> Option<Level> {
        match self {
            Verdict::FormallyVerified => Some(Level::FormallyVerified),
            Verdict::EmpiricallyValidated { trials } => Some(Level::EmpiricallyValidated { trials: *trials }),
            Verdict::Rejected { .. } => None,
        }
    }

    pub fn is_counterexample(&self) -> bool {
        matches!(
            self,
            Verdict::Rejected {
                reason: RejectReason::Counterexample,
                ..
            }
        )
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::FormallyVerified => f.write_str("formally-verified"),
            Verdict::EmpiricallyValidated { trials } => write!(f, "empirically-validated:{trials}"),
            Verdict::Rejected {
                reason, counterexample, ..
            } => {
                write!(f, "rejected:{reason}")?;
                if let Some(h) = counterexample {
                    write!(f, " {h}")?;
                }
                Ok(())
            }
        }
    }
}

/// `<rule-id> <class> <verdict> [counterexample-hash]`
pub fn verdict_line(rule: &Rule, class: Option<RuleClass>, verdict: &Verdict) -> String {
    let class = class.map_or_else(|| "unclassified".to_string(), |c| c.to_string());
    format!("{} {} {}", rule.id(), class, verdict)
}

#[derive(Debug, Clone, Copy)]
pub struct ValidationConfig {
    pub tol: Tolerance,
    pub trials: usize,
    pub retries: usize,
    pub instantiations: usize,
    pub max_free: i64,
    pub seed: u64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            tol: Tolerance::new(1e-4, 0.0),
            trials: 32,
            retries: 8,
            instantiations: 5,
            max_free: 16,
            seed: 0,
        }
    }
}

/// Per-rule generator, independent of orientation and variable names.
pub(crate) fn rule_rng(rule: &Rule, seed: u64) -> ChaCha8Rng {
    let digest = Sha256::digest(rule.canonical_key().as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(seed ^ u64::from_le_bytes(word))
}

fn shape_inference_error(rule: &Rule) -> Option<String> {
    let ranks = var_ranks(&rule.preconditions);
    for v in rule.lhs.vars().iter().chain(&rule.rhs.vars()) {
        if !ranks.contains_key(v) {
            return Some(format!("variable ?{v} has no rank"));
        }
    }
    let mut inf = ShapeInference::new(&ranks, &rule.preconditions, None);
    inf.infer(&rule.lhs).and_then(|_| inf.infer(&rule.rhs)).err()
}

/// Structural checks that need no execution.
pub fn precheck(rule: &Rule) -> Result<(), Verdict> {
    if rule.lhs == rule.rhs || (rule.lhs.is_var() && rule.rhs.is_var()) {
        return Err(Verdict::reject(
            RejectReason::Trivial,
            "sides are identical or both variables",
        ));
    }
    let fv = |p: &Pattern| p.vars().into_iter().collect::<BTreeSet<_>>();
    if fv(&rule.lhs) != fv(&rule.rhs) {
        return Err(Verdict::reject(
            RejectReason::FreeVariables,
            "sides bind different variables",
        ));
    }
    if let Some(e) = shape_inference_error(rule) {
        return Err(Verdict::reject(RejectReason::Inconsistent, e));
    }
    Ok(())
}

const OPAQUE: [OpKind; 10] = [
    OpKind::FusedAttention,
    OpKind::ScaledDotProductAttention,
    OpKind::Embedding,
    OpKind::Softmax,
    OpKind::Linear,
    OpKind::LayerNorm,
    OpKind::Gelu,
    OpKind::Addmm,
    OpKind::Mm,
    OpKind::Matmul,
];
const REARRANGE: [OpKind; 6] = [
    OpKind::Transpose,
    OpKind::Reshape,
    OpKind::Concat,
    OpKind::Split,
    OpKind::Chunk,
    OpKind::GetItem,
];

pub fn classify(rule: &Rule) -> RuleClass {
    let ops: BTreeSet<OpKind> = rule.lhs.ops().union(&rule.rhs.ops()).copied().collect();
    if ops.iter().any(|o| OPAQUE.contains(o)) {
        RuleClass::OpaqueHeavy
    } else if ops.iter().any(|o| REARRANGE.contains(o)) {
        RuleClass::TensorRearrangement
    } else {
        RuleClass::ScalarLogic
    }
}

/// Evaluates a pattern with variables bound to concrete values.
pub fn eval_pattern(p: &Pattern, env: &BTreeMap<String, Value>) -> Result<Value, ExecError> {
    match p {
        Pattern::Var(v) => env.get(v).cloned().ok_or(ExecError::Unbound(0)),
        Pattern::Op { op, attrs, children } => {
            let args = children
                .iter()
                .map(|c| eval_pattern(c, env))
                .collect::<Result<Vec<_>, _>>()?;
            let shapes: Vec<ValueShape> = args.iter().map(ValueShape::of).collect();
            let mut attrs = attrs.clone();
            normalize_attrs(*op, &mut attrs, &shapes)?;
            eval_op(*op, &attrs, &args.iter().collect::<Vec<_>>())
        }
    }
}

pub(crate) fn shapes_of(rule: &Rule, asg: &Assignment) -> BTreeMap<String, Vec<usize>> {
    var_ranks(&rule.preconditions)
        .into_iter()
        .map(|(v, r)| {
            let s = (0..r)
                .map(|a| asg.get(&(v.clone(), a)).copied().unwrap_or(1).max(0) as usize)
                .collect();
            (v, s)
        })
        .collect()
}

/// Variables used as embedding indices, with the variable of the table.
fn index_vars(p: &Pattern, out: &mut BTreeMap<String, Option<String>>) {
    if let Pattern::Op { op, children, .. } = p {
        if *op == OpKind::Embedding {
            if let Some(Pattern::Var(i)) = children.first() {
                let table = match children.get(1) {
                    Some(Pattern::Var(w)) => Some(w.clone()),
                    _ => None,
                };
                out.insert(i.clone(), table);
            }
        }
        children.iter().for_each(|c| index_vars(c, out));
    }
}

pub(crate) fn hash_inputs(env: &BTreeMap<String, Value>) -> String {
    let mut h = Sha256::new();
    for (k, v) in env {
        h.update(k.as_bytes());
        for t in v.tensors() {
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in t.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
    }
    hex::encode(&h.finalize()[..8])
}

fn sample_env<R: Rng>(rule: &Rule, asg: &Assignment, rng: &mut R) -> BTreeMap<String, Value> {
    let shapes = shapes_of(rule, asg);
    let mut idx = BTreeMap::new();
    index_vars(&rule.lhs, &mut idx);
    index_vars(&rule.rhs, &mut idx);
    let mut env = BTreeMap::new();
    for (v, s) in &shapes {
        let t = match idx.get(v) {
            Some(table) => {
                let rows = table
                    .as_ref()
                    .and_then(|w| shapes.get(w))
                    .and_then(|s| s.first().copied())
                    .unwrap_or(1)
                    .max(1);
                let n = crate::tensor::numel(s);
                Tensor::index(s.clone(), (0..n).map(|_| rng.random_range(0..rows as i64)).collect())
                    .expect("valid index tensor")
            }
            None => Tensor::from_fn(s.clone(), |_| rng.sample::<f64, _>(StandardNormal)),
        };
        env.insert(v.clone(), Value::Tensor(t));
    }
    env
}

/// Randomized testing under the rule's preconditions.
pub fn fuzz_validate<R: Rng>(rule: &Rule, trials: usize, cfg: &ValidationConfig, rng: &mut R) -> Verdict {
    let mut passed = 0;
    let mut failures = 0;
    while passed < trials {
        let asg = match crate::shape::solve_shapes(&rule.preconditions, cfg.max_free, rng) {
            Solved::Sat(a) => a,
            Solved::Unsat => return Verdict::reject(RejectReason::Vacuous, "preconditions are unsatisfiable"),
        };
        let env = sample_env(rule, &asg, rng);
        match (eval_pattern(&rule.lhs, &env), eval_pattern(&rule.rhs, &env)) {
            (Ok(l), Ok(r)) => {
                if !values_match(&l, &r, cfg.tol) {
                    return Verdict::Rejected {
                        reason: RejectReason::Counterexample,
                        detail: format!(
                            "sides differ by {:.3e}",
                            crate::tensor::max_abs_diff(&l, &r).unwrap_or(f64::INFINITY)
                        ),
                        counterexample: Some(hash_inputs(&env)),
                    };
                }
                passed += 1;
            }
            (Err(e), _) | (_, Err(e)) => {
                failures += 1;
                if failures > cfg.retries {
                    return Verdict::reject(RejectReason::InvalidRule, format!("execution failed: {e}"));
                }
            }
        }
    }
    Verdict::EmpiricallyValidated { trials }
}

/// Outcome of a symbolic path: a verdict, or a request to fall back to testing.
pub enum Symbolic {
    Decided(Verdict),
    Unknown,
}

/// Full pipeline; returns the class (when the pre-check passed) and verdict.
pub fn validate(rule: &Rule, cfg: &ValidationConfig) -> (Option<RuleClass>, Verdict) {
    if let Err(v) = precheck(rule) {
        return (None, v);
    }
    let class = classify(rule);
    let mut rng = rule_rng(rule, cfg.seed);
    if let Solved::Unsat = crate::shape::solve_shapes(&rule.preconditions, cfg.max_free, &mut rng) {
        return (
            Some(class),
            Verdict::reject(RejectReason::Vacuous, "preconditions are unsatisfiable"),
        );
    }
    let symbolic = match class {
        RuleClass::ScalarLogic => verify_scalar(rule, &mut rng),
        RuleClass::TensorRearrangement => verify_rearrangement(rule, cfg, &mut rng),
        RuleClass::OpaqueHeavy => Symbolic::Unknown,
    };
    let verdict = match symbolic {
        Symbolic::Decided(v) => v,
        Symbolic::Unknown => fuzz_validate(rule, cfg.trials, cfg, &mut rng),
    };
    (Some(class), verdict)
}
