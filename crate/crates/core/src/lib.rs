//! Adversarial music against a frame-level wake-word detector.
//!
//! The crate covers the full digital pipeline: audio utilities, a
//! differentiable Karplus-Strong synthesizer, a small reverse-mode tape,
//! psychoacoustic masking, image-source room simulation, the highway-network
//! detector, corpus construction and the projected-gradient attack.

pub mod attack;
pub mod audio;
pub mod corpus;
pub mod detector;
pub mod diff;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod metrics;
pub mod psycho;
pub mod room;
pub mod speechgen;
pub mod synth;

pub use error::{Error, Result};
