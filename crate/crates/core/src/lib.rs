//! Training and evaluation of small variational autoencoders, with estimators
//! that split the gap between `log p(x)` and the training bound into an
//! approximation part and an amortization part.

pub mod ais;
pub mod bounds;
pub mod diffnet;
pub mod error;
pub mod flows;
pub mod gaps;
pub mod harness;
pub mod localopt;
pub mod model;
pub mod objective;
pub mod rng;

pub use error::{Error, Result};
