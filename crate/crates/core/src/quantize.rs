//! Post-training quantization of a float graph: max-abs activation
//! calibration and per-layer weight quantization driven by a bit-width plan.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{run_reference_observed, EngineError, Keep};
use crate::graph::{Graph, NodeKind, Stage, TensorData};
use crate::lowering::residual_groups;
use crate::qtensor::{max_level, quantize_per_channel, QuantError};
use crate::scalar::Scalar;
use crate::tensor::FloatTensor;

#[derive(Debug, Error, PartialEq)]
pub enum QuantizeError {
    #[error("invalid bit-width plan: {0}")]
    Plan(String),
    #[error("quantization needs a float graph, got {0:?}")]
    Stage(Stage),
    #[error("calibration needs at least one input")]
    NoCalibrationData,
    #[error("`{0}` has no calibration statistics")]
    Uncalibrated(String),
    #[error("residual add `{add}` mixes `{producer}`, which has no activation quantizer")]
    ResidualProducer { add: String, producer: String },
    #[error("layer `{layer}`: {source}")]
    Weights { layer: String, source: QuantError },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn default_input_bits() -> u8 {
    8
}

/// Per-layer weight bit-widths plus activation bit-widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitWidthPlan {
    pub weight_bits: BTreeMap<String, u8>,
    pub act_bits: u8,
    /// Per-quantizer exceptions to `act_bits`, keyed by activation node id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub act_overrides: BTreeMap<String, u8>,
    #[serde(default = "default_input_bits")]
    pub input_bits: u8,
}

impl BitWidthPlan {
    pub fn uniform<T: Scalar>(g: &Graph<T>, weight_bits: u8, act_bits: u8) -> Self {
        Self {
            weight_bits: g.conv_layers().iter().map(|n| (n.id.clone(), weight_bits)).collect(),
            act_bits,
            act_overrides: BTreeMap::new(),
            input_bits: 8,
        }
    }

    pub fn act_bits_for(&self, id: &str) -> u8 {
        self.act_overrides.get(id).copied().unwrap_or(self.act_bits)
    }

    /// Checks that every conv layer appears exactly once, no unknown layer is
    /// listed and every width is in 1..=8 (2..=8 for signed activations).
    pub fn validate<T: Scalar>(&self, g: &Graph<T>) -> Result<(), QuantizeError> {
        let bad = |b: u8| !(1..=8).contains(&b);
        for n in g.conv_layers() {
            match self.weight_bits.get(&n.id) {
                None => return Err(QuantizeError::Plan(format!("no weight bits for layer `{}`", n.id))),
                Some(&b) if bad(b) => return Err(QuantizeError::Plan(format!("layer `{}` has {b} bits", n.id))),
                _ => {}
            }
        }
        if let Some(extra) = self.weight_bits.keys().find(|k| g.node(k).is_none_or(|n| n.kind.conv().is_none())) {
            return Err(QuantizeError::Plan(format!("`{extra}` is not a conv layer")));
        }
        if bad(self.act_bits) || bad(self.input_bits) {
            return Err(QuantizeError::Plan("activation and input bits must be in 1..=8".into()));
        }
        for (id, &b) in &self.act_overrides {
            match g.node(id).map(|n| &n.kind) {
                Some(NodeKind::ActivationQuant(_)) if !bad(b) => {}
                Some(NodeKind::ActivationQuant(_)) => return Err(QuantizeError::Plan(format!("`{id}` has {b} bits"))),
                _ => return Err(QuantizeError::Plan(format!("override `{id}` is not an activation quantizer"))),
            }
        }
        for n in &g.nodes {
            if let NodeKind::ActivationQuant(q) = &n.kind {
                if q.signed && self.act_bits_for(&n.id) < 2 {
                    return Err(QuantizeError::Plan(format!("signed activation `{}` needs at least 2 bits", n.id)));
                }
            }
        }
        Ok(())
    }
}

/// Max-abs statistics of the input and every activation quantizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration<T> {
    pub max_abs: BTreeMap<String, T>,
}

/// Runs the float graph on every calibration input and records the largest
/// magnitude seen at the input and at each activation quantizer.
pub fn calibrate<T: Scalar>(g: &Graph<T>, inputs: &[FloatTensor<T>]) -> Result<Calibration<T>, QuantizeError> {
    if g.stage() != Stage::Float {
        return Err(QuantizeError::Stage(g.stage()));
    }
    if inputs.is_empty() {
        return Err(QuantizeError::NoCalibrationData);
    }
    let tracked: Vec<&str> = g
        .nodes
        .iter()
        .filter(|n| matches!(n.kind, NodeKind::Input { .. } | NodeKind::ActivationQuant(_)))
        .map(|n| n.id.as_str())
        .collect();
    let mut max_abs: BTreeMap<String, T> = tracked.iter().map(|id| (id.to_string(), T::zero())).collect();
    for x in inputs {
        run_reference_observed(g, x, &Keep::Nothing, &mut |id, v| {
            if let Some(m) = max_abs.get_mut(id) {
                *m = v.iter().fold(*m, |m, x| m.max(x.abs()));
            }
        })?;
    }
    Ok(Calibration { max_abs })
}

/// Quantizes weights per the plan and fixes every activation scale from the
/// calibration statistics. Quantizers that meet at a residual add share the
/// largest of their scales so the sum stays an integer addition.
pub fn quantize_graph<T: Scalar>(
    g: &Graph<T>,
    plan: &BitWidthPlan,
    calib: &Calibration<T>,
) -> Result<Graph<T>, QuantizeError> {
    if g.stage() != Stage::Float {
        return Err(QuantizeError::Stage(g.stage()));
    }
    plan.validate(g)?;
    let mut out = g.clone();
    let mut scales: BTreeMap<String, T> = BTreeMap::new();
    for n in out.nodes.iter_mut() {
        let (quant, bits) = match &mut n.kind {
            NodeKind::Input { quant } => (quant, plan.input_bits),
            NodeKind::ActivationQuant(quant) => (quant, plan.act_bits_for(&n.id)),
            _ => continue,
        };
        let m = *calib.max_abs.get(&n.id).ok_or_else(|| QuantizeError::Uncalibrated(n.id.clone()))?;
        quant.bits = bits;
        let s = if m > T::zero() { m / T::from_int(max_level(bits, quant.signed) as i64) } else { T::one() };
        scales.insert(n.id.clone(), s);
    }
    for group in residual_groups(&out) {
        let mut shared = T::zero();
        for id in &group {
            match out.node(id).map(|n| &n.kind) {
                Some(NodeKind::ResidualAdd) => {}
                Some(NodeKind::ActivationQuant(_)) => shared = shared.max(scales[id]),
                _ => {
                    let add = out
                        .nodes
                        .iter()
                        .find(|a| matches!(a.kind, NodeKind::ResidualAdd) && a.inputs.contains(id))
                        .map(|a| a.id.clone())
                        .unwrap_or_default();
                    return Err(QuantizeError::ResidualProducer { add, producer: id.clone() });
                }
            }
        }
        for id in group {
            if let Some(s) = scales.get_mut(&id) {
                *s = shared;
            }
        }
    }
    for n in out.nodes.iter_mut() {
        match &mut n.kind {
            NodeKind::Input { quant } | NodeKind::ActivationQuant(quant) => quant.scale = Some(scales[&n.id]),
            _ => {}
        }
    }
    let layers: Vec<(String, String)> = out
        .conv_layers()
        .iter()
        .map(|n| (n.id.clone(), n.kind.conv().expect("conv").weight.clone()))
        .collect();
    for (layer, w) in layers {
        let ft = out
            .float_tensor(&w)
            .ok_or_else(|| QuantizeError::Plan(format!("layer `{layer}` weights are not float")))?;
        let q = quantize_per_channel(ft, plan.weight_bits[&layer], 0)
            .map_err(|source| QuantizeError::Weights { layer: layer.clone(), source })?;
        out.tensors.insert(w, TensorData::Quant(q));
    }
    out.meta.stage = Stage::Quantized;
    out.validate().map_err(|e| QuantizeError::Plan(e.to_string()))?;
    Ok(out)
}
