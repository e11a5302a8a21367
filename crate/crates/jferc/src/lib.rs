//! Training harness, file formats and command-line front end for the
//! joint-vector cross-modal fusion emotion recognizer in `jferc-core`.

pub mod checks;
pub mod config;
pub mod data;
pub mod experiments;
pub mod formats;
pub mod manifest;
pub mod run;
pub mod synth;
pub mod train;
pub mod wav;

pub use config::RunConfig;
