//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records primitive applications in evaluation order. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! returns [`Gradients`] for every leaf that requires them. Named model
//! parameters live in a [`ParamStore`] and are updated with [`AdamW`].
//!
//! All arithmetic is 64-bit. Nothing here is thread-aware: one graph and
//! one optimizer state are owned by a single training loop.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod mask;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{finite_diff_check, relative_error};
pub use graph::{CrossEntropy, Gradients, Graph, Var};
pub use mask::AttentionMask;
pub use optim::{AdamW, AdamWConfig};
pub use params::ParamStore;
pub use rng::SeededRng;
pub use tensor::Tensor;
