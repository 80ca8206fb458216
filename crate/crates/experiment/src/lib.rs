//! Dataset persistence and experiment orchestration on top of `tmra-core`:
//! generate a phantom suite, train, reconstruct held-out frames at several
//! view-sharing numbers, evaluate against a reference, and run the ablations.

pub mod config;
pub mod container;
pub mod dataset;
pub mod pipeline;
pub mod plots;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] tmra_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}
