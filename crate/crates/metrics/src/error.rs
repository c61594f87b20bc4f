use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("mask shape mismatch: {lhs_h}x{lhs_w} vs {rhs_h}x{rhs_w}")]
    ShapeMismatch {
        lhs_h: usize,
        lhs_w: usize,
        rhs_h: usize,
        rhs_w: usize,
    },
    #[error("mask data length {len} does not match {height}x{width}")]
    BadLength {
        len: usize,
        height: usize,
        width: usize,
    },
    #[error("mask value {value} at index {index} is not binary")]
    NotBinary { index: usize, value: u8 },
    #[error("cannot aggregate an empty set of reports")]
    EmptyAggregate,
}
