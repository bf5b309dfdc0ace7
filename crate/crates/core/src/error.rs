// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

/// Errors raised while reading or validating a serialized graph.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("graph contains a cycle through node {0}")]
    Cycle(u64),
}

/// Errors raised by the reference interpreter.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("attribute error: {0}")]
    Attr(String),
    #[error("input {0} is not bound")]
    Unbound(u64),
    #[error("node {node}: {source}")]
    AtNode {
        node: u64,
        #[source]
        source: Box<ExecError>,
    },
}

impl ExecError {
    pub fn at(self, node: u64) -> ExecError {
        ExecError::AtNode {
            node,
            source: Box::new(self),
        }
    }
}

/// Errors surfaced by the verification engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("unknown e-class id {0}")]
    UnknownClass(u32),
    #[error("rule file error: {0}")]
    RuleFormat(String),
    #[error("fixture structure error: {0}")]
    Structure(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for EngineError {
    fn from(e: std::io::Error) -> Self {
        EngineError::Io(e.to_string())
    }
}
