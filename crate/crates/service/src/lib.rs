//! HTTP service and command line over trained fadersynth pipelines.

pub mod api;
pub mod cli;
pub mod pipeline;
