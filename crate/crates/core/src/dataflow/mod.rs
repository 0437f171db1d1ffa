//! Streaming accelerator model: folding, cycle counts, resource estimates,
//! FIFO-level pipeline simulation and energy efficiency.

mod cost;
mod demo;
mod pipeline;
mod sim;

use thiserror::Error;

pub use cost::{
    bits_for_range, divisors, estimate_resources, fifo_brams, fold_graph, fold_graph_brute_force, node_cycles,
    CostModel, Fold, FoldingPlan, NodeResources, ResourceBudget, ResourceEstimate,
};
pub use demo::{demo_folding, demo_graph, demo_spec, latency_budget, DEMO_CLOCK_MHZ, DEMO_TARGET_FPS};
pub use pipeline::{edge_key, Pipeline, PipelineStage, StageInput, Window};
pub use sim::{repair_deadlocks, simulate_pipeline, FifoConfig, FifoPreset, SimReport};

use crate::graph::GraphError;
use crate::lowering::LowerError;

#[derive(Debug, Error, PartialEq)]
pub enum DataflowError {
    #[error("node `{node}`: {detail}")]
    Fold { node: String, detail: String },
    #[error("latency budget infeasible: `{node}` needs at least {min_cycles} cycles, budget is {budget}")]
    LatencyInfeasible { node: String, min_cycles: u64, budget: u64 },
    #[error("resources exceeded: {need} {resource} needed, {budget} available")]
    ResourcesExceeded { resource: &'static str, need: u64, budget: u64 },
    #[error("deadlock at cycle {cycle}: FIFO `{edge}` (depth {depth}) is full while its consumer starves")]
    Deadlock { edge: String, depth: usize, cycle: u64 },
    #[error("{given} frames given, at least {need} (3x pipeline depth) needed")]
    FramesTooFew { given: usize, need: usize },
    #[error("power must be positive, got {0} W")]
    NonPositivePower(f64),
    #[error("unknown FIFO edge `{0}`")]
    UnknownEdge(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Lower(#[from] LowerError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Frames per second per Watt.
pub fn energy_metrics(fps: f64, power_watts: f64) -> Result<f64, DataflowError> {
    if !(power_watts > 0.0) {
        return Err(DataflowError::NonPositivePower(power_watts));
    }
    Ok(fps / power_watts)
}
