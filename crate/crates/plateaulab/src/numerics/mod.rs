//! Tape based reverse-mode automatic differentiation over dense tensors.
//!
//! The engine records primitive operations on a [`Tape`]; [`Tape::backward`]
//! replays them in reverse to accumulate gradients. Primitives cover exactly
//! what the transformer, the losses, and the hand-built relaxed construction
//! need: matmul, elementwise arithmetic, ReLU, softmax, layer norm, embedding
//! lookup, slice/concat, means, cross-entropy with integer targets, sign, L2
//! norms, plus fused causal attention and the token interleaving used by the
//! sequence models.
//!
//! Everything is generic over [`Scalar`] so the same graph code runs in
//! double precision (default, used by the gradient checker and the exact
//! construction) or single precision (selectable per run for training speed).

mod gradcheck;
mod scalar;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use scalar::Scalar;
pub use tape::{AttnMeta, Gradients, NodeId, Tape};
