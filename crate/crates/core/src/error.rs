use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {shapes:?}{}", fmt_detail(.detail))]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
        detail: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("custom backward for node {node} returned gradient of shape {got:?}, expected {expected:?}")]
    CustomGradShape {
        node: usize,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("counterfactual gradient needs the fully observed context; tokens were built from a pre-masked input")]
    MissingFullObservation,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),
    #[error("solver failure: {0}")]
    Solver(String),
}

fn fmt_detail(detail: &str) -> String {
    if detail.is_empty() {
        String::new()
    } else {
        alloc::format!(" ({detail})")
    }
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
