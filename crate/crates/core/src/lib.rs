pub mod dataset;
pub mod geostat;
pub mod indices;
pub mod io;
pub mod linalg;
pub mod ml;
pub mod pipeline;
pub mod raster;
pub mod synth;
