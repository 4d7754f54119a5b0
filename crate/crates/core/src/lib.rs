pub mod adaptation;
pub mod approximators;
pub mod autodiff;
pub mod denoiser;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod operators;
pub mod optim;
pub mod phantoms;
pub mod schedule;

pub use error::{Error, Result};
