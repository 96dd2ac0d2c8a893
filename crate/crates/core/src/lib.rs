//! Core library: the accelerator ISA, its functional simulator, kernel
//! fixtures, prompt assembly, completion backends, evaluation, repair, cost
//! model and block optimizer.

pub mod cost;
pub mod eval;
pub mod isa;
pub mod kernels;
pub mod llm;
pub mod opt;
pub mod matrix;
pub mod prompt;
pub mod repair;
pub mod sim;
