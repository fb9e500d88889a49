//! Trajectory diffusion with kinematic constraint gradient guidance for a
//! planar air-hockey arm.
//!
//! The crate bundles a small reverse-mode autodiff, the arm model, a
//! conditional diffusion prior over joint trajectories, three guided
//! samplers, the simulator they are evaluated in, demonstration
//! generation and the experiment harness.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod constraints;
pub mod demos;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod kinematics;
pub mod sampling;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
