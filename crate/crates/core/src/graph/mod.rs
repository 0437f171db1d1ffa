//! Network description shared by every stage of the pipeline.
//!
//! A [`Graph`] is an ordered list of nodes (always in topological order) plus
//! a tensor store. The same structure carries the float model, the quantized
//! model and the lowered integer pipeline; [`Stage`] tells them apart.

mod builder;
mod io;

pub use builder::{
    backbone_spec, build_backbone, build_backbone_with_seed, build_network, random_network_spec,
    BlockSpec, ConvKind, GraphBuilder, NetworkSpec, StemSpec, BACKBONE_SCHEDULE,
};
pub use io::{load_model, save_model, ModelIoError, FORMAT_NAME, FORMAT_VERSION};

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qtensor::QuantTensor;
use crate::scalar::Scalar;
use crate::tensor::{FloatTensor, IntTensor};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("duplicate node id `{0}`")]
    DuplicateId(String),
    #[error("node `{node}` references unknown or later node `{input}`")]
    UnknownInput { node: String, input: String },
    #[error("node `{node}` expects {want} inputs, has {got}")]
    Arity { node: String, want: usize, got: usize },
    #[error("shape mismatch at `{node}`: {detail}")]
    Shape { node: String, detail: String },
    #[error("graph must have exactly one input and one output node")]
    Endpoints,
    #[error("node `{node}` references missing tensor `{tensor}`")]
    DanglingTensor { node: String, tensor: String },
    #[error("tensor `{tensor}` has the wrong type or dims for `{node}`: {detail}")]
    TensorMismatch { node: String, tensor: String, detail: String },
    #[error("node `{0}` is not allowed at stage {1:?}")]
    StageKind(String, Stage),
    #[error("unsupported convolution at `{node}`: kernel {kernel}, stride {stride}")]
    UnsupportedConv { node: String, kernel: usize, stride: usize },
    #[error("invalid input resolution {0}; must be at least 32")]
    Resolution(usize),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("{0}")]
    Invalid(String),
}

/// Output feature map of a node: `channels x height x width`. For im2col
/// nodes `channels` is the patch length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn numel(&self) -> usize {
        self.channels * self.pixels()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Float,
    Quantized,
    Lowered,
}

/// Activation quantizer. Unsigned quantizers double as ReLU; signed ones are
/// linear. `scale` is `None` in float graphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActQuant<T> {
    pub bits: u8,
    pub signed: bool,
    #[serde(default = "Option::default", skip_serializing_if = "Option::is_none")]
    pub scale: Option<T>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvAttrs {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: String,
    /// Folded per-channel affine `[2, out_channels]` (multiplier row, bias row).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affine: Option<String>,
    /// Output channels whose weights were negated while folding batch norm.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negated: Vec<usize>,
}

impl ConvAttrs {
    pub fn out_dim(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Im2colAttrs {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Im2colAttrs {
    pub fn out_dim(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatvecAttrs {
    /// Dot-product length per output: `in_ch*k*k`, or `k*k` when depthwise.
    pub fold_in: usize,
    pub out_channels: usize,
    pub depthwise: bool,
    /// Integer weight matrix `[out_channels, fold_in]`.
    pub weight: String,
    pub weight_bits: u8,
    /// Output channels computed with negated weights (from batch-norm folding).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negated: Vec<usize>,
    /// Real-valued metadata kept until streamlining: folded affine `[2, C]`
    /// and per-channel weight scales `[C]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affine: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_scale: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdDerivation<T> {
    /// Real-valued affine `[2, C]` applied to the real accumulator value.
    pub affine: String,
    /// Per-channel weight scales `[C]`; one accumulator unit is worth
    /// `weight_scale[c] * in_scale`.
    pub weight_scale: String,
    pub in_scale: T,
    pub out_scale: T,
    pub acc_range: (i64, i64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAttrs<T> {
    pub thresholds: String,
    pub out_bits: u8,
    pub out_signed: bool,
    /// Kept until the graph is streamlined so scales can be re-derived.
    #[serde(default = "Option::default", skip_serializing_if = "Option::is_none")]
    pub derivation: Option<ThresholdDerivation<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind<T> {
    Input { quant: ActQuant<T> },
    Conv2d(ConvAttrs),
    DepthwiseConv2d(ConvAttrs),
    PointwiseConv2d(ConvAttrs),
    /// `params` is a float tensor `[4, C]`: gamma, beta, running mean, running var.
    BatchNorm { params: String, eps: T },
    ActivationQuant(ActQuant<T>),
    ResidualAdd,
    Im2col(Im2colAttrs),
    Matvec(MatvecAttrs),
    Multithreshold(ThresholdAttrs<T>),
    Output,
}

impl<T> NodeKind<T> {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::Conv2d(_) => "conv2d",
            NodeKind::DepthwiseConv2d(_) => "depthwise_conv2d",
            NodeKind::PointwiseConv2d(_) => "pointwise_conv2d",
            NodeKind::BatchNorm { .. } => "batch_norm",
            NodeKind::ActivationQuant(_) => "activation_quant",
            NodeKind::ResidualAdd => "residual_add",
            NodeKind::Im2col(_) => "im2col",
            NodeKind::Matvec(_) => "matvec",
            NodeKind::Multithreshold(_) => "multithreshold",
            NodeKind::Output => "output",
        }
    }

    pub fn conv(&self) -> Option<&ConvAttrs> {
        match self {
            NodeKind::Conv2d(a) | NodeKind::DepthwiseConv2d(a) | NodeKind::PointwiseConv2d(a) => Some(a),
            _ => None,
        }
    }

    pub fn conv_mut(&mut self) -> Option<&mut ConvAttrs> {
        match self {
            NodeKind::Conv2d(a) | NodeKind::DepthwiseConv2d(a) | NodeKind::PointwiseConv2d(a) => Some(a),
            _ => None,
        }
    }

    pub fn is_depthwise(&self) -> bool {
        matches!(self, NodeKind::DepthwiseConv2d(_))
    }

    /// Node kinds allowed in a fully lowered integer pipeline.
    pub fn is_integer_kind(&self) -> bool {
        matches!(
            self,
            NodeKind::Input { .. }
                | NodeKind::Im2col(_)
                | NodeKind::Matvec(_)
                | NodeKind::Multithreshold(_)
                | NodeKind::ResidualAdd
                | NodeKind::Output
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNode<T> {
    pub id: String,
    #[serde(flatten)]
    pub kind: NodeKind<T>,
    #[serde(default)]
    pub inputs: Vec<String>,
    pub shape: Shape,
}

/// Everything the tensor store can hold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TensorData<T> {
    Float(FloatTensor<T>),
    Quant(QuantTensor<T>),
    Int(IntTensor),
    Thresholds(ThresholdUnit),
}

impl<T> TensorData<T> {
    pub fn type_name(&self) -> &'static str {
        match self {
            TensorData::Float(_) => "float",
            TensorData::Quant(_) => "quant",
            TensorData::Int(_) => "int",
            TensorData::Thresholds(_) => "thresholds",
        }
    }
}

/// Integer activation: `out = clamp(offset + #{k : acc >= t_k}, lo, hi)`,
/// one non-decreasing threshold list per channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdUnit {
    pub thresholds: Vec<Vec<i64>>,
    pub out_bits: u8,
    pub out_signed: bool,
    pub out_offset: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphMeta<T> {
    pub stage: Stage,
    /// Per-node dequantization scales (one per channel, or a single
    /// per-tensor entry) used to compare integer traces with the reference.
    #[serde(default = "BTreeMap::new", skip_serializing_if = "BTreeMap::is_empty")]
    pub taps: BTreeMap<String, Vec<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph<T> {
    pub nodes: Vec<LayerNode<T>>,
    pub tensors: BTreeMap<String, TensorData<T>>,
    pub meta: GraphMeta<T>,
}

impl<T: Scalar> Graph<T> {
    pub fn node(&self, id: &str) -> Option<&LayerNode<T>> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn input_node(&self) -> &LayerNode<T> {
        self.nodes
            .iter()
            .find(|n| matches!(n.kind, NodeKind::Input { .. }))
            .expect("validated graph has an input node")
    }

    pub fn output_node(&self) -> &LayerNode<T> {
        self.nodes
            .iter()
            .find(|n| matches!(n.kind, NodeKind::Output))
            .expect("validated graph has an output node")
    }

    pub fn input_shape(&self) -> Shape {
        self.input_node().shape
    }

    pub fn stage(&self) -> Stage {
        self.meta.stage
    }

    /// Consumers of every node, in node order.
    pub fn consumers(&self) -> HashMap<&str, Vec<&str>> {
        let mut out: HashMap<&str, Vec<&str>> = HashMap::new();
        for n in &self.nodes {
            for i in &n.inputs {
                out.entry(i.as_str()).or_default().push(n.id.as_str());
            }
        }
        out
    }

    /// Ids of the convolution layers in order (the weight layers).
    pub fn conv_layers(&self) -> Vec<&LayerNode<T>> {
        self.nodes.iter().filter(|n| n.kind.conv().is_some()).collect()
    }

    pub fn float_tensor(&self, id: &str) -> Option<&FloatTensor<T>> {
        match self.tensors.get(id)? {
            TensorData::Float(t) => Some(t),
            _ => None,
        }
    }

    pub fn quant_tensor(&self, id: &str) -> Option<&QuantTensor<T>> {
        match self.tensors.get(id)? {
            TensorData::Quant(t) => Some(t),
            _ => None,
        }
    }

    pub fn int_tensor(&self, id: &str) -> Option<&IntTensor> {
        match self.tensors.get(id)? {
            TensorData::Int(t) => Some(t),
            _ => None,
        }
    }

    pub fn threshold_unit(&self, id: &str) -> Option<&ThresholdUnit> {
        match self.tensors.get(id)? {
            TensorData::Thresholds(t) => Some(t),
            _ => None,
        }
    }

    /// Tensor ids referenced by a node.
    pub fn tensor_refs(kind: &NodeKind<T>) -> Vec<&str> {
        match kind {
            NodeKind::Conv2d(a) | NodeKind::DepthwiseConv2d(a) | NodeKind::PointwiseConv2d(a) => {
                let mut v = vec![a.weight.as_str()];
                v.extend(a.affine.as_deref());
                v
            }
            NodeKind::BatchNorm { params, .. } => vec![params.as_str()],
            NodeKind::Matvec(m) => {
                let mut v = vec![m.weight.as_str()];
                v.extend(m.affine.as_deref());
                v.extend(m.weight_scale.as_deref());
                v
            }
            NodeKind::Multithreshold(t) => {
                let mut v = vec![t.thresholds.as_str()];
                if let Some(d) = &t.derivation {
                    v.push(&d.affine);
                    v.push(&d.weight_scale);
                }
                v
            }
            _ => Vec::new(),
        }
    }

    /// Drops tensors no node references.
    pub fn prune_tensors(&mut self) {
        let used: HashSet<String> = self
            .nodes
            .iter()
            .flat_map(|n| Self::tensor_refs(&n.kind).into_iter().map(str::to_owned))
            .collect();
        self.tensors.retain(|k, _| used.contains(k));
    }

    /// Checks structural invariants: unique ids, topological order, single
    /// input/output, arity, edge shapes and tensor references.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut seen: HashMap<&str, &LayerNode<T>> = HashMap::new();
        let mut inputs = 0;
        let mut outputs = 0;
        for node in &self.nodes {
            if seen.contains_key(node.id.as_str()) {
                return Err(GraphError::DuplicateId(node.id.clone()));
            }
            let producers: Vec<&LayerNode<T>> = node
                .inputs
                .iter()
                .map(|i| {
                    seen.get(i.as_str()).copied().ok_or_else(|| GraphError::UnknownInput {
                        node: node.id.clone(),
                        input: i.clone(),
                    })
                })
                .collect::<Result<_, _>>()?;
            let want = match node.kind {
                NodeKind::Input { .. } => 0,
                NodeKind::ResidualAdd => 2,
                _ => 1,
            };
            if producers.len() != want {
                return Err(GraphError::Arity { node: node.id.clone(), want, got: producers.len() });
            }
            match node.kind {
                NodeKind::Input { .. } => inputs += 1,
                NodeKind::Output => outputs += 1,
                _ => {}
            }
            self.check_node(node, &producers)?;
            for t in Self::tensor_refs(&node.kind) {
                if !self.tensors.contains_key(t) {
                    return Err(GraphError::DanglingTensor { node: node.id.clone(), tensor: t.to_owned() });
                }
            }
            seen.insert(&node.id, node);
        }
        if inputs != 1 || outputs != 1 {
            return Err(GraphError::Endpoints);
        }
        Ok(())
    }

    fn check_node(&self, node: &LayerNode<T>, producers: &[&LayerNode<T>]) -> Result<(), GraphError> {
        let shape_err = |detail: String| GraphError::Shape { node: node.id.clone(), detail };
        let want_shape = |expected: Shape| {
            if node.shape == expected {
                Ok(())
            } else {
                Err(shape_err(format!("declared {:?}, expected {:?}", node.shape, expected)))
            }
        };
        let stage = self.meta.stage;
        let lowered_only = matches!(node.kind, NodeKind::Im2col(_) | NodeKind::Matvec(_) | NodeKind::Multithreshold(_));
        if lowered_only && stage != Stage::Lowered && stage != Stage::Quantized {
            return Err(GraphError::StageKind(node.id.clone(), stage));
        }
        match &node.kind {
            NodeKind::Input { quant } => {
                if !(1..=8).contains(&quant.bits) {
                    return Err(GraphError::Invalid(format!("input `{}` has {} bits", node.id, quant.bits)));
                }
                Ok(())
            }
            NodeKind::Conv2d(a) | NodeKind::DepthwiseConv2d(a) | NodeKind::PointwiseConv2d(a) => {
                if stage == Stage::Lowered {
                    return Err(GraphError::StageKind(node.id.clone(), stage));
                }
                let src = producers[0].shape;
                if src.channels != a.in_channels {
                    return Err(shape_err(format!("in_channels {} but producer has {}", a.in_channels, src.channels)));
                }
                if !matches!((a.kernel, a.stride), (1, 1) | (1, 2) | (3, 1) | (3, 2)) {
                    return Err(GraphError::UnsupportedConv { node: node.id.clone(), kernel: a.kernel, stride: a.stride });
                }
                if matches!(node.kind, NodeKind::PointwiseConv2d(_)) && a.kernel != 1 {
                    return Err(shape_err("pointwise conv must have a 1x1 kernel".into()));
                }
                if node.kind.is_depthwise() && a.in_channels != a.out_channels {
                    return Err(shape_err("depthwise conv must keep the channel count".into()));
                }
                if src.height + 2 * a.padding < a.kernel || src.width + 2 * a.padding < a.kernel {
                    return Err(shape_err("kernel larger than padded input".into()));
                }
                want_shape(Shape::new(a.out_channels, a.out_dim(src.height), a.out_dim(src.width)))?;
                let wdims = if node.kind.is_depthwise() {
                    vec![a.out_channels, 1, a.kernel, a.kernel]
                } else {
                    vec![a.out_channels, a.in_channels, a.kernel, a.kernel]
                };
                let got = match self.tensors.get(&a.weight) {
                    Some(TensorData::Float(t)) => t.dims().to_vec(),
                    Some(TensorData::Quant(t)) => t.dims().to_vec(),
                    Some(other) => {
                        return Err(GraphError::TensorMismatch {
                            node: node.id.clone(),
                            tensor: a.weight.clone(),
                            detail: format!("{} tensor used as conv weight", other.type_name()),
                        })
                    }
                    None => {
                        return Err(GraphError::DanglingTensor { node: node.id.clone(), tensor: a.weight.clone() })
                    }
                };
                if got != wdims {
                    return Err(GraphError::TensorMismatch {
                        node: node.id.clone(),
                        tensor: a.weight.clone(),
                        detail: format!("dims {got:?}, expected {wdims:?}"),
                    });
                }
                Ok(())
            }
            NodeKind::BatchNorm { params, .. } => {
                if stage == Stage::Lowered {
                    return Err(GraphError::StageKind(node.id.clone(), stage));
                }
                want_shape(producers[0].shape)?;
                if let Some(t) = self.float_tensor(params) {
                    if t.dims() != [4, node.shape.channels] {
                        return Err(GraphError::TensorMismatch {
                            node: node.id.clone(),
                            tensor: params.clone(),
                            detail: format!("dims {:?}, expected [4, {}]", t.dims(), node.shape.channels),
                        });
                    }
                }
                Ok(())
            }
            NodeKind::ActivationQuant(q) => {
                if stage == Stage::Lowered {
                    return Err(GraphError::StageKind(node.id.clone(), stage));
                }
                if !(1..=8).contains(&q.bits) {
                    return Err(GraphError::Invalid(format!("`{}` has {} activation bits", node.id, q.bits)));
                }
                want_shape(producers[0].shape)
            }
            NodeKind::ResidualAdd => {
                let (a, b) = (producers[0].shape, producers[1].shape);
                if a != b {
                    return Err(shape_err(format!("operands {a:?} and {b:?} differ")));
                }
                want_shape(a)
            }
            NodeKind::Im2col(a) => {
                let src = producers[0].shape;
                if src != Shape::new(a.in_channels, a.in_height, a.in_width) {
                    return Err(shape_err(format!("producer shape {src:?} does not match im2col attrs")));
                }
                want_shape(Shape::new(a.patch_len(), a.out_dim(a.in_height), a.out_dim(a.in_width)))
            }
            NodeKind::Matvec(m) => {
                let src = producers[0].shape;
                let expect_in = if m.depthwise { m.out_channels * m.fold_in } else { m.fold_in };
                if src.channels != expect_in {
                    return Err(shape_err(format!("patch length {} but matvec expects {expect_in}", src.channels)));
                }
                want_shape(Shape::new(m.out_channels, src.height, src.width))
            }
            NodeKind::Multithreshold(t) => {
                want_shape(producers[0].shape)?;
                if let Some(u) = self.threshold_unit(&t.thresholds) {
                    if u.thresholds.len() != node.shape.channels {
                        return Err(GraphError::TensorMismatch {
                            node: node.id.clone(),
                            tensor: t.thresholds.clone(),
                            detail: format!("{} channels, expected {}", u.thresholds.len(), node.shape.channels),
                        });
                    }
                }
                Ok(())
            }
            NodeKind::Output => want_shape(producers[0].shape),
        }
    }
}

/// Parameter count of every convolution layer (batch norm excluded).
pub fn count_params<T: Scalar>(g: &Graph<T>) -> BTreeMap<String, usize> {
    g.nodes
        .iter()
        .filter_map(|n| {
            let a = n.kind.conv()?;
            let per_out = if n.kind.is_depthwise() { 1 } else { a.in_channels };
            Some((n.id.clone(), a.out_channels * per_out * a.kernel * a.kernel))
        })
        .collect()
}

/// Multiply-accumulate count of every weight layer; works on float,
/// quantized and lowered graphs (matvec nodes stand in for their convs).
/// Batch norm, thresholds and additions count as zero and are omitted.
pub fn count_macs<T: Scalar>(g: &Graph<T>) -> BTreeMap<String, usize> {
    let params = count_params(g);
    g.nodes
        .iter()
        .filter_map(|n| match &n.kind {
            NodeKind::Matvec(m) => Some((n.id.clone(), m.fold_in * m.out_channels * n.shape.pixels())),
            _ => params.get(&n.id).map(|p| (n.id.clone(), p * n.shape.pixels())),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backbone_counts() {
        let g = build_backbone::<f64>(240).unwrap();
        let p = count_params(&g);
        let m = count_macs(&g);
        assert_eq!(p.len(), 52);
        assert_eq!(p["conv0"], 864);
        assert_eq!(p["b1_dw"], 288);
        assert_eq!(p["b1_project"], 512);
        assert_eq!(m["conv0"], 12_441_600);
        assert_eq!(m["b1_dw"], 4_147_200);
        assert!(!m.contains_key("conv0_bn"));
    }

    #[test]
    fn validation_catches_bad_edges() {
        let mut g = build_backbone::<f64>(64).unwrap();
        g.nodes[3].inputs = vec!["nope".into()];
        assert!(matches!(g.validate(), Err(GraphError::UnknownInput { .. })));

        let mut g = build_backbone::<f64>(64).unwrap();
        let idx = g.index_of("b3_add").unwrap();
        g.nodes[idx].inputs.pop();
        assert!(matches!(g.validate(), Err(GraphError::Arity { .. })));

        let mut g = build_backbone::<f64>(64).unwrap();
        g.tensors.remove("conv0.weight");
        assert!(matches!(g.validate(), Err(GraphError::DanglingTensor { .. })));

        let mut g = build_backbone::<f64>(64).unwrap();
        let idx = g.index_of("b1_project").unwrap();
        g.nodes[idx].shape.channels = 17;
        assert!(g.validate().is_err());
    }
}
