//! Reference-based video super-resolution: cross-scale flow estimation,
//! global flow refinement, warp-and-synthesize decoding, the training loss
//! suite, and a harness contrasting correspondence-composition strategies on
//! synthetic clips with analytic ground-truth flows.

pub mod autodiff;
pub mod error;
pub mod flow_estimator;
pub mod flow_refiner;
pub mod imaging;
mod kernels;
pub mod data;
pub mod losses;
pub mod metrics;
mod nn;
pub mod synthesis;

pub use error::{Error, Result};
