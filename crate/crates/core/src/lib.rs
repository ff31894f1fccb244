//! Rule-injected neural networks whose reliance on a rule is controlled at
//! inference time by a scalar rule strength `alpha`.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub mod data;
pub mod pendulum;
pub mod rules;
pub mod model;
pub mod tabular;
pub mod train;
pub mod eval;
pub mod cli;
