//! Error taxonomy shared across the crate.
//!
//! Variants map onto the CLI exit-code contract:
//!
//! | exit code | variants |
//! |-----------|----------|
//! | 1 | [`Error::Input`], [`Error::Config`], [`Error::Io`], [`Error::Image`] |
//! | 2 | [`Error::Numerical`] |
//! | 3 | [`Error::Contract`] |

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user-supplied input (missing file, malformed image, empty mask).
    #[error("input error: {0}")]
    Input(String),

    /// Invalid configuration value (out-of-range beta, unknown key).
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite values or other numerical breakdown, with step context.
    #[error("numerical error at step {step}: {message}")]
    Numerical { step: usize, message: String },

    /// An internal contract was violated (shape mismatch, key collision,
    /// mask containment). These indicate caller bugs, not bad data files.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numerical(step: usize, msg: impl Into<String>) -> Self {
        Error::Numerical {
            step,
            message: msg.into(),
        }
    }

    /// Exit code for the CLI: 1 input, 2 numerical, 3 contract.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Input(_) | Error::Config(_) | Error::Io(_) | Error::Image(_) => 1,
            Error::Numerical { .. } => 2,
            Error::Contract(_) => 3,
        }
    }
}
