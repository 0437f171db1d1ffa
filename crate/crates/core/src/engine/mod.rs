//! Execution engines: a fake-quantized floating-point reference for float and
//! quantized graphs, and a bit-exact integer engine for lowered graphs.

mod integer;
mod reference;
mod verify;

pub use integer::{im2col, matvec, run_int, run_int_with, ExecutionTrace, TraceEntry};
pub use reference::{conv2d, run_reference, run_reference_observed, run_reference_with, ReferenceTrace};
pub use verify::{quantize_input, verify, NodeDiff, VerifyReport};

use std::collections::HashSet;

use thiserror::Error;

use crate::graph::{GraphError, Stage};
use crate::lowering::LowerError;

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("engine needs a {want} graph, got {got:?}")]
    Stage { want: &'static str, got: Stage },
    #[error("input has dims {got:?}, graph expects {want:?}")]
    InputShape { want: Vec<usize>, got: Vec<usize> },
    #[error("input value {value} at index {index} outside [{lo}, {hi}]")]
    InputRange { index: usize, value: i32, lo: i32, hi: i32 },
    #[error("accumulator saturation at `{node}` channel {channel}: {value} outside [{lo}, {hi}]")]
    Saturation { node: String, channel: usize, value: i64, lo: i64, hi: i64 },
    #[error("`{node}` ({kind}) cannot run on this engine")]
    Unsupported { node: String, kind: &'static str },
    #[error("`{node}` references missing or mistyped tensor `{tensor}`")]
    MissingTensor { node: String, tensor: String },
    #[error("no dequantization tap for `{0}`")]
    MissingTap(String),
    #[error(transparent)]
    Lower(#[from] LowerError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Which node outputs a run retains. Checksums and statistics are produced
/// for every node regardless.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum Keep {
    #[default]
    All,
    Nothing,
    Only(HashSet<String>),
}

impl Keep {
    pub fn wants(&self, id: &str) -> bool {
        match self {
            Keep::All => true,
            Keep::Nothing => false,
            Keep::Only(ids) => ids.contains(id),
        }
    }
}

/// 64-bit FNV-1a over the little-endian bytes of an `i32` payload.
pub fn fnv1a64(data: &[i32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in data {
        for byte in v.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
