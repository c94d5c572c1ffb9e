//! Vibration fault diagnosis from wavelet scalograms.
//!
//! The pipeline: multi-channel vibration recordings are segmented
//! ([`signal`]), each segment becomes a 64x64 Morlet scalogram image
//! ([`wavelet`]), and a from-scratch residual CNN ([`resnet`], built on
//! [`nn`]) classifies the images into 17 fault classes, scored by
//! [`metrics`]. [`synth`] generates a deterministic labeled dataset so the
//! whole chain is exercised without proprietary measurements.

pub mod metrics;
pub mod nn;
pub mod resnet;
pub mod seed;
pub mod signal;
pub mod synth;
pub mod wavelet;
