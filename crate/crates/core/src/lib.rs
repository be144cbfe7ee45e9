//! Edge-cloud grasp detection over a learned image codec.
//!
//! The edge encodes a camera image into a small latent with [`codec`], frames
//! it with [`netproto`] and sends it to a server that decodes the image and
//! runs the two-stage grasp detector in [`grasp`].

pub mod checkpoint;
pub mod codec;
pub mod gan;
pub mod imageio;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod grasp;
pub mod synth;
