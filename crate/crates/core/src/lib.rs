//! # flexcable
//!
//! Elastic, flexible cables manipulated by one or more quadrotors.
//!
//! The cable is discretised into point masses joined by linear springs with
//! viscous damping on every point. With that model the whole system is
//! differentially flat: selected cable points plus the robot yaws determine
//! every state and input through an explicit recursion along the chain.
//!
//! - [`cable`]: data model, spring forces, point-mass dynamics, static equilibrium
//! - [`quadrotor`]: rigid-body dynamics, thrust/attitude reconstruction, SE(3) tracking
//! - [`jet`]: truncated Taylor arithmetic used by the recursion
//! - [`signal`]: analytic flat-output primitives with exact derivatives
//! - [`planner`]: the flatness recursion for the three system classes
//! - [`sim`]: fixed-step RK4 simulation, logs and error metrics
//! - [`sysid`]: homotopy-based identification of stiffness and damping
//! - [`feedback`]: integral output feedback wrapped around the recursion
//! - [`scenario`]: JSON scenario files and the batch commands behind the `flexcable` binary

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cable;
pub mod error;
pub mod feedback;
pub mod geometry;
pub mod jet;
pub mod planner;
pub mod quadrotor;
pub mod scenario;
pub mod signal;
pub mod sim;
pub mod sysid;

pub use error::{Error, Result};
pub use geometry::{Mat3, Vec3};
