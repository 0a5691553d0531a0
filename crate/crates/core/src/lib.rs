//! Editing engine for dynamic Gaussian splatting scenes.

pub mod config;
pub mod error;
pub mod io;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod planner;
pub mod rasterizer;
pub mod remote;
pub mod rng;
pub mod scene;
pub mod selector;
pub mod supervision;
pub mod toy;
pub mod tracking;

pub use error::{Error, Result};
