//! Toy-scale vision transformer with dynamic token idling.
//!
//! The crate bundles a small dense-math substrate with reverse-mode
//! differentiation, a pre-norm ViT backbone, class-attention top-K token
//! selection with idle skip-through, the token cut regularizer on attention
//! maps, a distillation finetuning harness, analytic MAC accounting and
//! diagnostics (token similarity, re-selection statistics, PGM exports).

pub mod cli;
pub mod complexity;
pub mod cut_loss;
pub mod diagnostics;
pub mod error;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{DType, Tensor};
pub mod token_idle;
pub mod train;
pub mod vit;
