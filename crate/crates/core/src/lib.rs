//! Dual-branch densely connected classifier with learned layer skipping.
//!
//! The crate implements, from the ground up:
//!
//! * a reverse-mode tape (`tape`, `ops`) over dense NCHW tensors,
//!   generic over `f32`/`f64`;
//! * the two-branch skip-dense network (`net`): a shared stem feeding a
//!   coarse and a fine branch of densely connected blocks whose layers
//!   can be skipped per sample by small learned gates;
//! * the composite-digit dataset pipeline (`data`): IDX parsing,
//!   big/small digit composition, binary dataset files, batching;
//! * two-phase training (`train`) and evaluation/analysis (`eval`);
//! * a binary checkpoint format (`checkpoint`).
//!
//! Errors are surfaced as [`Error`]; panics are reserved for internal
//! invariant violations.

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod net;
mod ops;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{FloatWidth, Scalar};
pub use tape::{BnMode, Tape, Var};
pub use tensor::Tensor;
