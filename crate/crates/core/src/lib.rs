pub mod bsde;
pub mod chain;
pub mod cli;
pub mod drivers;
pub mod error;
pub mod grid;
pub mod insurance;
pub mod maxprinciple;
pub mod numerics;
pub mod parallel;
pub mod rng;
pub mod robust_entropy;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
