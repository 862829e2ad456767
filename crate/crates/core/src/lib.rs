//! Temporally consistent video colorization.
//!
//! Anchor frames are colorized by a single-image backbone; the frames
//! between them receive features propagated along optical flow from both
//! anchors, merged by a learned fusion module that is trained with a
//! temporal warping loss on grayscale video alone.

pub mod backbone;
pub mod checkpoint;
pub mod colorspace;
pub mod config;
pub mod error;
pub mod flow;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod propagation;
pub mod srl;
pub mod tensor;

pub use error::{Result, TcvcError};
