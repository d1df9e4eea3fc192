//! Aligned contrastive predictive coding at desk scale.
//!
//! A strided convolutional encoder maps a sample stream to latents `z_t`, a
//! recurrent context model summarizes `z_{<=t}` into `c_t`, and `K`
//! prediction heads are force-aligned to the next `M` latents by a monotone
//! dynamic program over contrastive scores. With `K == M` the loss reduces to
//! plain CPC.

pub mod error;
pub mod math;

pub use error::{Error, Result};
pub mod alignment;
pub mod model;
pub mod data;
pub mod eval;
pub mod oracle;
pub mod stats;
pub mod train;
