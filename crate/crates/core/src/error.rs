use stflow_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: TensorError,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait LayerContext<T> {
    fn layer(self, name: impl FnOnce() -> String) -> Result<T>;
}

impl<T> LayerContext<T> for Result<T> {
    fn layer(self, name: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| match e {
            Error::Tensor(source) => Error::Layer {
                layer: name(),
                source,
            },
            Error::Layer { layer, source } => Error::Layer {
                layer: format!("{}/{layer}", name()),
                source,
            },
            other => other,
        })
    }
}

/// Maps tensor-level format errors onto [`Error::Format`].
pub(crate) fn lift_format(e: TensorError) -> Error {
    match e {
        TensorError::Format { offset, msg } => Error::Format { offset, msg },
        other => other.into(),
    }
}
