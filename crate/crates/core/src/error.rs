use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Which half of a pass produced a non-finite value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Forward,
    Backward,
    Update,
}

impl core::fmt::Display for Pass {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Pass::Forward => "forward pass",
            Pass::Backward => "backward pass",
            Pass::Update => "parameter update",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {found:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite value in {pass} at layer {layer} ({kind})")]
    NonFinite {
        layer: usize,
        kind: &'static str,
        pass: Pass,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("not enough {class} patches: requested {requested}, available {available}")]
    InsufficientClass {
        class: &'static str,
        requested: usize,
        available: usize,
    },
    #[error("training failed at epoch {epoch}, batch {batch}: {source}")]
    Training {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
