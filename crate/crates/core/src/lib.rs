//! Configuration-dependent kinematic calibration of 6R arms with a minimal
//! product-of-exponentials model.

pub mod error;
pub mod kin;
pub mod minpoe;
pub mod cpa;
pub mod nls;
pub mod cdc;
pub mod learn;
pub mod sim;
pub mod eval;
pub mod pipeline;
pub mod io;

pub use error::{Error, Result};
