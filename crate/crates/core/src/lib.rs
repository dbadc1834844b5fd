pub mod chemmetrics;
pub mod config;
pub mod error;
pub mod flowcore;
pub mod hashing;
pub mod model;
pub mod molio;
pub mod objectives;
pub mod sampler;
pub mod synthetic;
pub mod targetenc;
pub mod trainer;

pub use error::{Error, Result};
