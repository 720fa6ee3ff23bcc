//! Library side of the `mosaix` executable: argument handling and synthetic
//! cohort generation.

pub mod app;
pub mod synth;
