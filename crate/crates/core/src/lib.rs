pub mod codec;
pub mod error;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod rng;
pub mod siren;
pub mod terrain_analysis;
pub mod trainer;
pub mod trig;
pub mod wavelet;
pub mod wcf;

pub use error::{Error, Result};
