//! Pipeline, file formats, and experiment harness around `molt-core`.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod formats;
pub mod pipeline;
pub mod training;
