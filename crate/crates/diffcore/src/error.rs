use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid shape {shape:?}: extents must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths")]
    RaggedRows,
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    InvalidAxis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("slice {start}..{end} out of range for extent {extent}")]
    SliceRange { start: usize, end: usize, extent: usize },
    #[error("concat of zero arrays")]
    EmptyConcat,
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
}
