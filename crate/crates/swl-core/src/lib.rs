//! Spherical world-locking for egocentric audio-visual scenes: geometry on
//! the world-locked sphere, explicit panorama warping, multisensory token
//! construction, a pose-aware transformer encoder, task decoders, synthetic
//! scene generation, and a training/evaluation harness.

pub mod decoder;
pub mod synth;
pub mod encoder;
pub mod geom;
pub mod harness;
pub mod numcore;
pub mod tokens;
pub mod warp;
