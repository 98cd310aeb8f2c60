pub mod brdf;
pub mod cli;
pub mod dual;
pub mod envlight;
pub mod fit;
pub mod io;
pub mod metrics;
pub mod error;
pub mod oracle;
pub mod pipeline;
pub mod quadrature;
pub mod render;
pub mod scene;
pub mod spectral;

pub use error::{Error, Result};
