//! Detector tomography of photon-number-resolving detectors calibrated with
//! correlated photon pairs.
//!
//! A twin-beam source feeds a device under test on one arm and a tunable-loss
//! click detector (the tomographer) on the other. From the joint statistics the
//! crate reconstructs first the source's photon-number distribution and then
//! the device's diagonal POVM.

pub mod error;
pub mod exec;
pub mod model;
pub mod sim;
pub mod povm;
pub mod solver;
pub mod state;

pub use error::{Error, Result};
pub use exec::Execution;
pub use model::*;
