//! Command-line tools and the HTTP job service around the semantic radiance field generator.

pub mod artifacts;
pub mod cli;
pub mod jobs;
pub mod service;
