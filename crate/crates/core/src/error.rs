//! Error type shared by all core modules.

use alloc::string::String;
use core::fmt;

/// Everything that can go wrong inside the core library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    Shape { op: &'static str, detail: String },
    /// A numeric-domain precondition was violated (simplex, finiteness, ...).
    Domain { op: &'static str, detail: String },
    /// An index (token id, position) is out of range.
    Index { op: &'static str, detail: String },
    /// Invalid configuration value or combination.
    Config(String),
    /// An API contract was broken by the caller (empty batch, non-scalar loss, ...).
    Contract(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain { op, detail: detail.into() }
    }

    pub fn index(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Index { op, detail: detail.into() }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Domain { op, detail } => write!(f, "domain error in {op}: {detail}"),
            Error::Index { op, detail } => write!(f, "index error in {op}: {detail}"),
            Error::Config(detail) => write!(f, "config error: {detail}"),
            Error::Contract(detail) => write!(f, "contract violation: {detail}"),
        }
    }
}

impl core::error::Error for Error {}
