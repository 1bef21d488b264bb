pub mod admm;
pub mod channelizer;
pub mod container;
pub mod denoise;
pub mod error;
pub mod experiments;
pub mod fidelity;
pub mod filters;
pub mod hermitian;
pub mod image;
pub mod metrics;
pub mod scenes;
pub mod statistics;

pub use error::{Error, Result};
