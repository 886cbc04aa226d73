//! Likelihood-free estimation of spatiotemporal Hawkes processes observed
//! through missing-at-random thinning.
//!
//! The crate is organised around the estimation pipeline:
//!
//! * [`model`]: parameters, background geometry, event streams and the
//!   closed-form intensity/compensator formulas.
//! * [`generator`]: an exact branching simulator written as a deterministic
//!   transform of keyed base noise ([`noise`]), with pathwise Jacobians.
//! * [`thinning`]: region maps and reporting-rate/victimisation subsampling.
//! * [`critic`]: the masked LSTM critic and its gradient penalty.
//! * [`wgan`]: the adversarial training loop and multi-start driver.
//! * [`em`]: the EM baseline that treats reported data as complete.
//! * [`gof`]: the inter-arrival chi-square criterion and run selection.
//! * [`hotspot`]: grid expectations, hotspot sets and error metrics.
//! * [`io`]: file formats, configuration, manifests and plot emission.

pub mod critic;
pub mod em;
pub mod generator;
pub mod gof;
pub mod hotspot;
pub mod io;
pub mod model;
pub mod noise;
pub mod optim;
pub mod stats;
pub mod thinning;
pub mod wgan;

pub use model::{BackgroundConfig, Event, EventStream, ModelParams, Rect};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid event stream: {0}")]
    InvalidStream(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("simulation would not terminate: {0}")]
    NonTermination(String),
    #[error("noise channel {channel} exhausted after {capacity} draws")]
    NoiseExhausted { channel: &'static str, capacity: u64 },
    #[error("stream {index}: {source}")]
    Stream {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    /// True for failures caused by inputs or configuration rather than numerics.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Numerical(_) | Error::NonTermination(_) | Error::NoiseExhausted { .. } => false,
            Error::Stream { source, .. } => source.is_config(),
            _ => true,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
