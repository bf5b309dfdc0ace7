// SPDX-License-Identifier: Apache-2.0

//! Exact decision procedure for add/mul/constant rules: both sides are
//! expanded to polynomials with rational coefficients over the reals and
//! compared term by term.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::Rng;

use super::{RejectReason, Symbolic, Verdict};
use crate::ops::OpKind;
use crate::pattern::{Pattern, Rule};

/// Variable exponents, sorted by variable name.
type Monomial = BTreeMap<String, u32>;

#[derive(Debug, Clone, PartialEq)]
struct Poly(BTreeMap<Monomial, BigRational>);

/// Expansion gives up past this many terms and defers to testing.
const MAX_TERMS: usize = 4096;

impl Poly {
    fn constant(c: BigRational) -> Poly {
        let mut m = BTreeMap::new();
        if !c.is_zero() {
            m.insert(Monomial::new(), c);
        }
        Poly(m)
    }

    fn var(v: &str) -> Poly {
        Poly(BTreeMap::from([(
            Monomial::from([(v.to_string(), 1)]),
            BigRational::one(),
        )]))
    }

    fn add(&self, o: &Poly) -> Poly {
        let mut m = self.0.clone();
        for (k, c) in &o.0 {
            let e = m.entry(k.clone()).or_insert_with(BigRational::zero);
            *e += c;
            if e.is_zero() {
                m.remove(k);
            }
        }
        Poly(m)
    }

    fn mul(&self, o: &Poly) -> Option<Poly> {
        let mut m: BTreeMap<Monomial, BigRational> = BTreeMap::new();
        for (ka, ca) in &self.0 {
            for (kb, cb) in &o.0 {
                let mut k = ka.clone();
                for (v, e) in kb {
                    *k.entry(v.clone()).or_insert(0) += e;
                }
                let e = m.entry(k).or_insert_with(BigRational::zero);
                *e += ca * cb;
            }
            if m.len() > MAX_TERMS {
                return None;
            }
        }
        m.retain(|_, c| !c.is_zero());
        Some(Poly(m))
    }

    fn eval(&self, point: &BTreeMap<String, BigRational>) -> BigRational {
        let mut acc = BigRational::zero();
        for (k, c) in &self.0 {
            let mut t = c.clone();
            for (v, e) in k {
                for _ in 0..*e {
                    t *= &point[v];
                }
            }
            acc += t;
        }
        acc
    }
}

enum Lower {
    Poly(Poly),
    /// Contains an operator outside the fragment, or grew too large.
    Unsupported,
}

fn lower(p: &Pattern) -> Lower {
    match p {
        Pattern::Var(v) => Lower::Poly(Poly::var(v)),
        Pattern::Op { op, attrs, children } => {
            let mut parts = Vec::new();
            for c in children {
                match lower(c) {
                    Lower::Poly(q) => parts.push(q),
                    Lower::Unsupported => return Lower::Unsupported,
                }
            }
            match op {
                OpKind::Constant => match attrs.float("value").and_then(BigRational::from_float) {
                    Some(c) => Lower::Poly(Poly::constant(c)),
                    None => Lower::Unsupported,
                },
                OpKind::Add | OpKind::ReduceAdd => {
                    Lower::Poly(parts.iter().fold(Poly::constant(BigRational::zero()), |a, b| a.add(b)))
                }
                OpKind::Mul => match parts[0].mul(&parts[1]) {
                    Some(q) if q.0.len() <= MAX_TERMS => Lower::Poly(q),
                    _ => Lower::Unsupported,
                },
                _ => Lower::Unsupported,
            }
        }
    }
}

/// Proves or refutes a scalar rule over the reals. A refutation carries a
/// point where the two polynomials differ.
pub fn verify_scalar<R: Rng>(rule: &Rule, rng: &mut R) -> Symbolic {
    let (Lower::Poly(l), Lower::Poly(r)) = (lower(&rule.lhs), lower(&rule.rhs)) else {
        return Symbolic::Unknown;
    };
    if l == r {
        return Symbolic::Decided(Verdict::FormallyVerified);
    }
    let diff = l.add(&r.mul(&Poly::constant(-BigRational::one())).expect("scalar multiple"));
    let vars: Vec<String> = rule.lhs.vars();
    // A nonzero polynomial is nonzero at most points of a large integer grid.
    for _ in 0..64 {
        let point: BTreeMap<String, BigRational> = vars
            .iter()
            .map(|v| {
                (
                    v.clone(),
                    BigRational::from_integer(BigInt::from(rng.random_range(-1000i64..=1000))),
                )
            })
            .collect();
        if !diff.eval(&point).is_zero() {
            let text: Vec<String> = point.iter().map(|(v, x)| format!("?{v}={x}")).collect();
            return Symbolic::Decided(Verdict::Rejected {
                reason: RejectReason::Counterexample,
                detail: format!("sides differ at {}", text.join(" ")),
                counterexample: Some(point_hash(&text)),
            });
        }
    }
    Symbolic::Decided(Verdict::Rejected {
        reason: RejectReason::Counterexample,
        detail: "normal forms differ".into(),
        counterexample: None,
    })
}

fn point_hash(text: &[String]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(&Sha256::digest(text.join(" ").as_bytes())[..8])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rule(l: &str, r: &str) -> Rule {
        Rule::new(Pattern::parse(l).unwrap(), Pattern::parse(r).unwrap(), vec![])
    }

    fn verdict(l: &str, r: &str) -> Verdict {
        match verify_scalar(&rule(l, r), &mut ChaCha8Rng::seed_from_u64(1)) {
            Symbolic::Decided(v) => v,
            Symbolic::Unknown => panic!("undecided"),
        }
    }

    #[test]
    fn identities_are_proved() {
        assert_eq!(
            verdict("(add ?a (mul ?b (constant :shape [] :value 0.0)))", "?a"),
            Verdict::FormallyVerified
        );
        assert_eq!(
            verdict("(add ?a (add ?b ?c))", "(add (add ?a ?b) ?c)"),
            Verdict::FormallyVerified
        );
        assert_eq!(
            verdict("(mul ?a (add ?b ?c))", "(add (mul ?a ?b) (mul ?c ?a))"),
            Verdict::FormallyVerified
        );
    }

    #[test]
    fn non_identities_have_counterexamples() {
        let v = verdict("(add ?a ?b)", "(mul ?a ?b)");
        assert!(v.is_counterexample());
    }

    #[test]
    fn other_ops_are_undecided() {
        let r = rule("(gelu :approximate \"exact\" ?a)", "?a");
        assert!(matches!(
            verify_scalar(&r, &mut ChaCha8Rng::seed_from_u64(1)),
            Symbolic::Unknown
        ));
    }
}
