pub mod artifact;
pub mod base;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod experiment;
pub mod hypernet;
pub mod metrics;
pub mod optim;
pub mod raster;
pub mod sampler;
pub mod schedule;
pub mod tape;
pub mod text;
pub mod tuner;
pub mod unet;

pub use error::{Error, Result};
