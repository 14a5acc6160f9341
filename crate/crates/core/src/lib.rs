pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod drw;
pub mod error;
pub mod evaluation;
pub mod events;
pub mod gradcheck;
pub mod model;
pub mod msf;
pub mod nn;
pub mod plot;
pub mod raster;
pub mod synthetic;
pub mod training;
pub mod tsfe;
pub mod vlad;

pub use error::{Error, Result};
