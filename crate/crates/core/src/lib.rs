//! Cross-embodiment visual retargeting engine and transfer harness.
//!
//! Given a target robot's camera frame and joint state, the pipeline produces
//! a "cross-painted" image in which the target robot is masked out and a
//! source robot is rendered at the same end-effector pose. Around that sit
//! the pieces needed to replay a source robot's policy on an unseen target:
//! pose algebra and frame conversion, URDF kinematics with IK, a software
//! rasterizer, fast-marching inpainting, depth reprojection, forward-dynamics
//! fitting, blocking/delta/playback execution, and an experiment harness.

pub mod dynamics;
pub mod error;
pub mod files;
pub mod fixtures;
pub mod geometry;
pub mod harness;
pub mod imageops;
pub mod kinematics;
pub mod pipeline;
pub mod policy;
pub mod raster;
pub mod reproject;
pub mod urdf;

pub use error::{Error, Result};
