//! Sparse-attention transformer encoder classifier with teacher → student
//! logit distillation, built on a small `f64` reverse-mode autograd tape.
//!
//! Pipeline: [`distill::train_teacher`] trains a (sparse-attention) teacher
//! on labelled text; [`distill::distill_student`] then trains a smaller
//! student against the frozen teacher's logits and the true labels.
//! [`bench::run_bench`] measures how the attention sublayer scales with
//! sequence length under full and sparse patterns.

pub mod attention;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod run_config;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
