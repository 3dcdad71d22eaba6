//! Core library for GRCSF: a dual-feature-compensation segmentation framework.
//!
//! The pipeline has three stages:
//!
//! 1. A small masked autoencoder is trained on lesion-free slices and used to
//!    produce multi-ratio residual maps (MRMs) that highlight "hard to
//!    reconstruct" regions ([`residual_map`]).
//! 2. A nested UNet++ backbone segments lesions; its skip connections are
//!    augmented by a Global Compensation Unit ([`gcu`]) and its last decoder
//!    stages by a Regional Compensation Unit ([`rcu`]), both driven by the MRMs.
//! 3. Evaluation covers overlap metrics, clinical calcium scoring, and an
//!    ablation harness that compares the main variants ([`ablation`]).
//!
//! Everything runs on a small tape-based autodiff engine ([`tape`]) that is
//! generic over `f32`/`f64`; training uses `f32`, gradient checking `f64`.

pub mod ablation;
pub mod backbone;
pub mod error;
pub mod gcu;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod losses_metrics;
pub mod params;
pub mod plots;
pub mod rcu;
pub mod residual_map;
pub mod seeding;
pub mod synthdata;
pub mod tape;

pub use error::{Error, Result};
