// SPDX-License-Identifier: Apache-2.0

//! Equivalence checking for tensor computation graphs.
//!
//! Two graphs are joined into one e-graph whose classes carry concrete
//! execution values. Candidate relations between the two sides are proposed
//! from those values, justified by rewrite rules that are either reused or
//! synthesized and validated on the fly, and merged until the outputs meet or
//! the iteration budget runs out. On failure the first unexplained divergence
//! is reported.

pub mod apply;
pub mod driver;
pub mod egraph;
pub mod error;
pub mod exec;
pub mod fixtures;
pub mod graph;
pub mod ops;
pub mod pattern;
pub mod relation;
pub mod shape;
pub mod synth;
pub mod tensor;
pub mod transform;
pub mod validate;
