//! Unsupervised keypoint learning for lung-ultrasound-like video.
//!
//! The crate is split along the pipeline:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape, Adam and checkpoint records.
//! * [`fusion`]: depth attenuation, monogenic filtering, feature fusion and SSIM.
//! * [`model`]: the transporter network (encoder, keypoint net, transport, refine, CBAM).
//! * [`synth`]: a synthetic video generator with landmark ground truth.
//! * [`train`]: pair sampling, autoencoder pretraining and the main training loop.
//! * [`eval`]: pleura accuracy, landmark distances and temporal jitter.
//! * [`config`]: the flat `key=value` run configuration shared by the CLI.

pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
