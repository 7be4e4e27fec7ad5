use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("gaussian frame is empty")]
    EmptyFrame,
    #[error("vertex set is empty")]
    EmptyVertexSet,
    #[error("attention over an empty key set")]
    EmptySet,
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("blended skinning transform of gaussian {0} is singular")]
    DegenerateBlend(usize),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad or corrupt input data (as opposed to IO
    /// failures or divergence).
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::Diverged { .. })
    }
}
