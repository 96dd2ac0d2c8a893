//! Loop-nest scheduling: a small affine IR in the `seq`-loop dialect,
//! semantics-preserving schedule commands driven by a JSON protocol, a
//! reference interpreter, randomized equivalence checking and a locality
//! cost proxy.

use thiserror::Error;

pub mod command;
pub mod cost;
pub mod interp;
pub mod ir;
pub mod rewrite;
pub mod session;

pub use command::{parse_apply, FissionLocation, ScheduleCommand};
pub use cost::{locality_cost, locality_cost_with, CostTerms, DEFAULT_PENALTY};
pub use interp::{check_equivalence, interpret, random_inputs, Equivalence, Values};
pub use ir::{parse_kernel, Access, ArrayDecl, BinOp, Expr, Loop, LoopNest, Stmt};
pub use rewrite::{apply_schedule_command, find_line};
pub use session::{Session, SessionConfig, SessionRecord};

/// Message every rejected `reorder` starts with.
pub const REORDER_SINGLE_LOOP: &str = "expected the body of the outer loop to be a single loop";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedError {
    #[error("syntax error on line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("loop bound `{0}` is not a constant")]
    NonConstantBound(String),
    #[error("out-of-bounds access {0}")]
    OutOfBounds(String),
    #[error("could not find line: {0}")]
    LineNotFound(String),
    #[error("line `{0}` appears {1} times; add ` #N` to pick one (0-indexed)")]
    AmbiguousLine(String, usize),
    #[error("{0}")]
    IllegalRewrite(String),
    #[error("loop extent {extent} is not divisible by tile size {tile}")]
    NonDivisibleTile { extent: i64, tile: i64 },
    #[error("input shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("kernels have different signatures: {0}")]
    SignatureMismatch(String),
    #[error("malformed command: {0}")]
    Protocol(String),
}
