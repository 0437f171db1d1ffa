//! Small residual network whose folded pipeline is limited by several
//! balanced stages at exactly 750,000 cycles per frame.

use super::{fold_graph, CostModel, DataflowError, FoldingPlan, ResourceBudget};
use crate::graph::{build_network, BlockSpec, Graph, NetworkSpec, Shape, StemSpec};
use crate::lowering::lower;
use crate::quantize::{calibrate, quantize_graph, BitWidthPlan};
use crate::scalar::Scalar;
use crate::synth::synthetic_images;

pub const DEMO_CLOCK_MHZ: f64 = 187.5;
pub const DEMO_TARGET_FPS: f64 = 250.0;

/// Cycles per frame available to each node at a target frame rate.
pub fn latency_budget(clock_mhz: f64, target_fps: f64) -> u64 {
    (clock_mhz * 1e6 / target_fps).floor() as u64
}

/// 3x50x50 input, 3x3 stem to 30 channels, one inverted residual block with
/// expansion 10.
pub fn demo_spec() -> NetworkSpec {
    NetworkSpec {
        input: Shape::new(3, 50, 50),
        stem: Some(StemSpec { out_channels: 30, kernel: 3, stride: 1 }),
        blocks: vec![BlockSpec { expansion: 10, out_channels: 30, stride: 1, kernel: 3 }],
        head: None,
    }
}

/// Lowered demo network: 4-bit weights and activations, calibrated on two
/// synthetic images.
pub fn demo_graph<T: Scalar>(seed: u64) -> Result<Graph<T>, DataflowError> {
    let spec = demo_spec();
    let float: Graph<T> = build_network(&spec, seed, 0.0)?;
    let err = |e: &dyn std::fmt::Display| DataflowError::Invalid(format!("demo network: {e}"));
    let cal = calibrate(&float, &synthetic_images(spec.input, 2, seed)).map_err(|e| err(&e))?;
    let q = quantize_graph(&float, &BitWidthPlan::uniform(&float, 4, 4), &cal).map_err(|e| err(&e))?;
    Ok(lower(&q)?)
}

/// LUT-minimal folding of the demo at 250 FPS and 187.5 MHz.
pub fn demo_folding<T: Scalar>(g: &Graph<T>) -> Result<FoldingPlan, DataflowError> {
    fold_graph(
        g,
        latency_budget(DEMO_CLOCK_MHZ, DEMO_TARGET_FPS),
        &ResourceBudget::default(),
        &CostModel::default(),
        DEMO_CLOCK_MHZ,
    )
}
