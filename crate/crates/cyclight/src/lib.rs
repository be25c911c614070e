//! Cycle-level traffic signal control laboratory: a mesoscopic grid
//! simulator, cycle-by-cycle signal plans with a hybrid discrete-continuous
//! action space, learned controllers that coordinate through attention over
//! neighboring intersections, and the classical timing baselines to measure
//! them against.

pub mod agent;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod grid;
pub mod nn;
pub mod pamdp;
pub mod rng;
pub mod signal;
pub mod sim;

pub use error::{Error, Result};
