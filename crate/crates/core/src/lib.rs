//! Single-LiDAR 3D human motion prediction.
//!
//! The crate is organised bottom-up:
//!
//! * [`sim`] renders part-labelled LiDAR scans of an animated 24-joint humanoid.
//! * [`pcops`] holds deterministic point-cloud preprocessing and metrics.
//! * [`autodiff`] is a small reverse-mode tensor engine with attention layers and Adam.
//! * [`model`] is the prediction network: part-aware descriptor, query-based
//!   latent mapping, spatial/temporal refinement and the joint/point heads.
//! * [`harness`] covers dataset I/O, training, evaluation, sweeps and checkpoints.

pub mod autodiff;
pub mod error;
pub mod fsutil;
pub mod harness;
pub mod model;
pub mod pcops;
pub mod sim;

pub use error::{Error, Result};

/// Number of skeleton joints (SMPL ordering).
pub const NUM_JOINTS: usize = 24;
/// Number of body-part labels produced by the scanner.
pub const NUM_PARTS: usize = 9;
/// Label carried by injected noise points.
pub const NOISE_LABEL: u8 = 255;

/// A full-body pose: world-space joint positions in meters.
pub type Pose = [[f64; 3]; NUM_JOINTS];
