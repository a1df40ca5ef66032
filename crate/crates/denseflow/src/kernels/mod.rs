//! Raw numeric kernels behind the tape operations.
//!
//! These work on flat slices with explicit dimensions and know nothing about
//! gradients; the tape supplies the forward/backward wiring.

pub mod conv;
pub mod pool;
pub mod warp;
