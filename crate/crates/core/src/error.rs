// SPDX-License-Identifier: Apache-2.0

use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimensions must all be at least 1, got {0:?}")]
    EmptyDimension([usize; 4]),
    #[error("dimension product overflows usize")]
    DimensionOverflow,
    #[error("data length {actual} does not match dimensions (expected {expected})")]
    DataLength { expected: usize, actual: usize },
    #[error("row modes must be a non-empty proper subset without repeats")]
    InvalidModeSplit,
    #[error("matrix contains a non-finite value")]
    NonFinite,
    #[error("rank {rank} outside 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("SVD did not converge after {sweeps} sweeps (residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("relative error undefined for a zero reference tensor")]
    ZeroReference,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("layer {index} ({kind}): {reason}")]
    Layer {
        index: usize,
        kind: &'static str,
        reason: String,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("kernel width {kernel} exceeds scan width {width}")]
    ScanTooNarrow { kernel: usize, width: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("weight {value} of node {node} is not representable in Q{n}.{m}")]
    Unquantized {
        node: usize,
        value: f64,
        n: u32,
        m: u32,
    },
}
