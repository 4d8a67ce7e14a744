//! Multi-exit classifiers trained with meta-learned per-exit sample weights,
//! and evaluated under confidence-based early exiting.

pub mod backbone;
pub mod checkpoint;
pub mod datahub;
pub mod error;
pub mod exitpolicy;
pub mod gradcheck;
pub mod numkit;
pub mod trainer;
pub mod wpn;

pub use error::{Error, Result};
