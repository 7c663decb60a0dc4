//! Prior-guided, motion-weighted video deblurring.
//!
//! The crate is split along the processing chain:
//!
//! - [`media_io`]: frame sequences, PNG I/O, temporal windows and run configuration
//! - [`priors`]: contrast, gradient and motion prior maps plus the blur reasoning vector
//! - [`flow`]: optical flow fields, `.flo` files, color coding and the attention map
//! - [`synthesis`]: blur synthesis by signal-space frame averaging
//! - [`nn`]: a small reverse-mode tensor engine with grouped 2D/3D convolution
//! - [`model`]: the prior encoder, channel-attention blocks and the restoration network
//! - [`loss`] and [`metrics`]: the flow-weighted dual loss, PSNR and SSIM
//! - [`train`]: toy-scale training and inference drivers

pub mod error;
pub mod flow;
pub mod loss;
pub mod media_io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod priors;
pub mod synthesis;
pub mod train;

pub use error::{Error, Result};
