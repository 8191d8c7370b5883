pub mod curve;
pub mod deformation;
pub mod error;
pub mod image_ingest;
pub mod inference;
pub mod linalg;
pub mod metrics;
pub mod process;
pub mod render;

pub use error::{Error, Result};
