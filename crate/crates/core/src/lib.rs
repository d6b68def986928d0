// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversary;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod imageio;
pub mod inversion;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod renderer;
pub mod scenegen;
pub mod training;

pub use error::{Error, Result};
