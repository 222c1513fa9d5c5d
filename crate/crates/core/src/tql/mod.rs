//! Tensor query language: parsing, checking, planning and execution.
//!
//! ```text
//! SELECT images[0:64, 0:64] AS crop, labels FROM dataset
//! WHERE IOU(boxes, "training/boxes") > 0.9 ORDER BY labels DESC LIMIT 10
//! ```

pub mod ast;
pub mod builtins;
pub mod exec;
mod lexer;
pub mod parser;
pub mod plan;
pub mod value;

pub use ast::{BinOp, DimSlice, Expr, OrderBy, Projection, Query, UnaryOp};
pub use builtins::Func;
pub use exec::execute;
pub use parser::{parse, parse_expr};
pub use plan::{plan, Column, QueryPlan, RowSource, Stage, Ty};
pub use value::Value;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TqlError {
    #[error("syntax error at {line}:{col}: {message}")]
    Syntax { line: usize, col: usize, message: String },
    #[error("unknown function `{name}` at {line}:{col}")]
    UnknownFunction { name: String, line: usize, col: usize },
    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("type error: {0}")]
    Type(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("duplicate output column `{0}`")]
    DuplicateAlias(String),
    #[error("row {row}: {message}")]
    RuntimeEval { row: u64, message: String },
}
