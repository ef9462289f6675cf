pub mod error;
pub mod families;
pub mod optim;
pub mod quad;
pub mod rng;

pub use error::{Error, Result};
pub mod mgf;
pub mod chernoff;
pub mod output;
pub mod sampler;
pub mod nonsep;
pub mod glm;
pub mod simulate;
