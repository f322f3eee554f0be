//! Early estimation and structured pruning of a frozen transformer and its
//! LoRA/Adapter modules, on a self-contained f64 autodiff engine.

// `!(x > 0.0)` is deliberate throughout: it rejects NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod data;
pub mod error;
pub mod fm_prune;
pub mod graph;
pub mod io;
mod kernel;
pub mod model;
pub mod optim;
pub mod peft;
pub mod peft_prune;
pub mod pipeline;
pub mod plan;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
