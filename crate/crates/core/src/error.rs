use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index {index} out of range for extent {extent} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("reduction over empty axis {axis} of shape {shape:?}")]
    EmptyReduction { axis: usize, shape: Vec<usize> },
    #[error("batch norm in training mode needs at least 2 rows, got {rows}")]
    BatchSize { rows: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("graph validation failed: {0}")]
    Graph(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
