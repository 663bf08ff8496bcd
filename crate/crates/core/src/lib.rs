//! Relational embedding head for cross-domain identity matching, built as a
//! self-contained f64 numerical library.
//!
//! The crate covers the full desk-scale pipeline: a deterministic
//! counter-based RNG, a small tensor type with hand-derived reverse-mode
//! adjoints, the relational graph head (pairwise edge scoring, feature
//! propagation, node attention recalibration, residual projection), a family
//! of angular-margin classification losses, a synthetic two-domain benchmark
//! generator with binary tensor serialization, and an SGD trainer plus
//! verification metrics (rank-1, verification rate at fixed false-accept
//! rates).
//!
//! Everything is plain `f64` on contiguous `Vec`s; there is no implicit
//! parallelism and no global state, so fixed seeds reproduce every artifact
//! byte for byte.

#![forbid(unsafe_code)]

pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod model;
pub mod nau;
pub mod rgm;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
