use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{run_int_with, run_reference_with, EngineError, Keep};
use crate::graph::{Graph, NodeKind, Stage};
use crate::qtensor::{quantize_value, QuantTensor};
use crate::scalar::Scalar;
use crate::tensor::{FloatTensor, IntTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDiff {
    pub id: String,
    pub kind: String,
    pub elements: usize,
    pub mismatches: usize,
    pub max_abs_diff: i64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub bit_exact: bool,
    pub max_mse: f64,
    pub compared_nodes: usize,
    pub nodes: Vec<NodeDiff>,
}

/// Quantizes a float image with the per-tensor input scale of a lowered graph.
pub fn quantize_input<T: Scalar>(g: &Graph<T>, x: &FloatTensor<T>) -> Result<QuantTensor<T>, EngineError> {
    let node = g.input_node();
    let NodeKind::Input { quant } = &node.kind else { unreachable!() };
    let scale = quant
        .scale
        .or_else(|| g.meta.taps.get(&node.id).and_then(|t| t.first().copied()))
        .ok_or_else(|| EngineError::MissingTap(node.id.clone()))?;
    let data = x.data().iter().map(|&v| quantize_value(v, scale, quant.bits, quant.signed)).collect();
    let c = x.dims().first().copied().unwrap_or(1);
    QuantTensor::new(x.dims().to_vec(), data, vec![scale; c], 0, quant.bits, quant.signed)
        .map_err(|_| EngineError::InputShape { want: vec![], got: x.dims().to_vec() })
}

/// Runs the quantized reference and the lowered integer graph on the same
/// input and compares every node that has a dequantization tap:
/// `round_half_even(reference / tap)` must equal the integer output.
pub fn verify<T: Scalar>(
    quantized: &Graph<T>,
    lowered: &Graph<T>,
    input: &FloatTensor<T>,
) -> Result<VerifyReport, EngineError> {
    if quantized.stage() != Stage::Quantized {
        return Err(EngineError::Stage { want: "quantized", got: quantized.stage() });
    }
    let ids: HashSet<String> = lowered
        .nodes
        .iter()
        .filter(|n| lowered.meta.taps.contains_key(&n.id))
        .filter(|n| match quantized.node(&n.id).map(|r| &r.kind) {
            Some(k) => k.conv().is_none_or(|a| a.affine.is_none()),
            None => false,
        })
        .map(|n| n.id.clone())
        .collect();
    let keep = Keep::Only(ids.clone());
    let q_in = quantize_input(lowered, input)?;
    let reference = run_reference_with(quantized, input, &keep)?;
    let int_in = IntTensor::new(q_in.dims().to_vec(), q_in.data().to_vec()).expect("dims match");
    let trace = run_int_with(lowered, &int_in, &keep)?;

    let mut nodes = Vec::new();
    for node in lowered.nodes.iter().filter(|n| ids.contains(&n.id)) {
        let tap = &lowered.meta.taps[&node.id];
        let r = reference.get(&node.id).expect("kept");
        let got = trace.get(&node.id).and_then(|e| e.data.as_ref()).expect("kept");
        let px = node.shape.pixels().max(1);
        let mut diff = NodeDiff {
            id: node.id.clone(),
            kind: node.kind.name().to_owned(),
            elements: got.len(),
            mismatches: 0,
            max_abs_diff: 0,
            mse: 0.0,
        };
        let mut sq = 0.0f64;
        for (i, (&rv, &iv)) in r.data().iter().zip(got.data()).enumerate() {
            let s = if tap.len() == 1 { tap[0] } else { tap[i / px] };
            let want = (rv / s).round_half_even().as_f64();
            let d = want - iv as f64;
            if d != 0.0 {
                diff.mismatches += 1;
                diff.max_abs_diff = diff.max_abs_diff.max(d.abs() as i64);
                sq += d * d;
            }
        }
        diff.mse = if diff.elements == 0 { 0.0 } else { sq / diff.elements as f64 };
        nodes.push(diff);
    }
    let max_mse = nodes.iter().map(|n| n.mse).fold(0.0, f64::max);
    Ok(VerifyReport { bit_exact: nodes.iter().all(|n| n.mismatches == 0), max_mse, compared_nodes: nodes.len(), nodes })
}
