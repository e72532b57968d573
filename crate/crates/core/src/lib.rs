pub mod calibration;
pub mod chimera;
pub mod dbn;
pub mod error;
pub mod ising;
pub mod mnist;
pub mod rbm;
pub mod sampler;

pub use error::{Error, IdxError, Result};
