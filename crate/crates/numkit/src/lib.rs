//! Dense-tensor numeric kernel with reverse-mode automatic differentiation.
//!
//! Everything is 64-bit floating point and single-threaded per tape: a
//! [`Tape`] is rebuilt for every forward pass, operations append nodes in
//! topological order, and [`Tape::backward`] replays them once in reverse,
//! accumulating gradients additively. Parameters live outside the tape in a
//! [`ParamStore`] so they survive across steps; each forward pass binds them
//! as leaves and harvests their gradients afterwards.
//!
//! Log-domain tensors (CTC recursions, attention masks) may legitimately
//! carry `-inf`; `NaN` anywhere is an error state and is rejected after
//! every forward operation.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod store;
pub mod tape;
pub mod tensor;

pub use adam::{AdamHyper, AdamState};
pub use error::{NumError, Result};
pub use store::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
