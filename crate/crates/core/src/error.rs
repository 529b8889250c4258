use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition.
    #[error("invalid input: {0}")]
    Input(String),
    /// An iterative optimization produced a non-finite loss.
    #[error("optimization diverged at iteration {iteration}: {message}")]
    Optimization { iteration: usize, message: String },
    /// Model training produced a non-finite loss.
    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },
    /// A training observer asked to abort (usually an IO failure upstream).
    #[error("aborted by observer: {0}")]
    Aborted(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! input_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Input(alloc::format!($($arg)*))
    };
}
pub(crate) use input_err;

macro_rules! ensure_input {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::input_err!($($arg)*));
        }
    };
}
pub(crate) use ensure_input;
