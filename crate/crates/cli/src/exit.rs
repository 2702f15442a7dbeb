//! Exit statuses and the error classification behind them.

use std::fmt;
use std::process::ExitCode;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INTERNAL: u8 = 1;
pub const EXIT_BAD_INPUT: u8 = 2;
pub const EXIT_MAX_ITERATIONS: u8 = 3;

/// A failure caused by the caller's files or parameters.
#[derive(Debug)]
pub struct InputError(String);

impl InputError {
    pub fn new(message: impl Into<String>) -> Self {
        Self(message.into())
    }
}

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

/// How a command that ran to completion ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Done,
    /// Outputs were written, but a reported solve hit the iteration limit.
    MaxIterations,
}

impl Outcome {
    pub fn code(self) -> ExitCode {
        match self {
            Outcome::Done => ExitCode::from(EXIT_OK),
            Outcome::MaxIterations => ExitCode::from(EXIT_MAX_ITERATIONS),
        }
    }
}

/// Bad input (2) when any error in the chain is an [`InputError`] or an
/// input-caused library error, internal (1) otherwise.
pub fn error_code(err: &anyhow::Error) -> ExitCode {
    let input = err.chain().any(|e| {
        e.is::<InputError>()
            || e.downcast_ref::<mtlfsl::Error>().is_some_and(mtlfsl::Error::is_input_error)
    });
    ExitCode::from(if input { EXIT_BAD_INPUT } else { EXIT_INTERNAL })
}
