use thiserror::Error;

/// Errors raised by the numerical engines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Operand shapes do not satisfy an operation's contract.
    #[error("shape contract violated: {0}")]
    Shape(String),
    /// A forward or backward pass produced a non-finite value.
    #[error("run diverged: non-finite values in layer {layer}")]
    Diverged { layer: usize },
    /// Caller supplied an argument outside the accepted domain.
    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
