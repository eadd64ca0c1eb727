//! Self-supervised correspondence generation and feature learning for
//! multi-experience stereo localization.
//!
//! The crate is organised as a pipeline:
//!
//! * [`simworld`] generates multi-experience stereo datasets with simulated
//!   VO and evaluation-only ground truth;
//! * [`placerec`] aligns experiences with sequence-based place recognition;
//! * [`assoc`] validates raw matches with VO, builds the experience
//!   association graph and samples training pairs;
//! * [`features`] and [`pose`] implement keypoint detection, soft matching,
//!   RANSAC and weighted SVD alignment;
//! * [`emtrain`] alternates pose estimation (E-step) with descriptor
//!   optimisation against the keypoint loss (M-step).

pub mod assoc;
pub mod config;
pub mod emtrain;
pub mod error;
pub mod features;
pub mod geometry;
pub mod imageio;
pub mod placerec;
pub mod pose;
pub mod simworld;
pub mod stereo;
pub mod table;

pub use error::{Error, Result};
pub use geometry::{StereoCamera, Transform};
