//! Learned emulation of 3D atmospheric tracer advection.
//!
//! The crate generates synthetic transport data with a finite-volume /
//! semi-Lagrangian oracle, turns it into normalized patch pairs, trains a
//! 3D U-Net on root-transformed differences and scores it against the
//! persistence baseline.

pub mod config;
pub mod error;
pub mod eval;
pub mod grid;
pub mod oracle;
pub mod patch;
pub mod pipeline;
pub mod synth;
pub mod unet;
pub mod xform;

pub use error::{Error, ErrorClass, Result};
