pub mod camera;
pub mod checkpoint;
pub mod dataio;
pub mod encoding;
pub mod error;
pub mod gaussian;
pub mod img;
pub mod init;
pub mod lifecycle;
pub mod math;
pub mod objectives;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod sh;
pub mod synth;
pub mod tinynet;

pub use error::{Error, Result};
