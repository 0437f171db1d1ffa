use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    ActQuant, ConvAttrs, Graph, GraphError, GraphMeta, LayerNode, NodeKind, Shape, Stage, TensorData,
};
use crate::scalar::Scalar;
use crate::tensor::FloatTensor;

/// MobileNetV2 inverted residual schedule: (expansion, out channels, repeats, first stride).
pub const BACKBONE_SCHEDULE: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

const BACKBONE_STEM: usize = 32;
const BACKBONE_HEAD: usize = 1280;
const DEFAULT_SEED: u64 = 0x5eed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// One inverted residual block: optional 1x1 expansion, depthwise conv,
/// linear 1x1 projection, identity shortcut when shapes allow.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub expansion: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Shape,
    pub stem: Option<StemSpec>,
    pub blocks: Vec<BlockSpec>,
    /// Output channels of the closing 1x1 convolution, if any.
    pub head: Option<usize>,
}

/// MobileNetV2 backbone (width multiplier 1.0) for a square RGB input.
pub fn backbone_spec(resolution: usize) -> Result<NetworkSpec, GraphError> {
    if resolution < 32 {
        return Err(GraphError::Resolution(resolution));
    }
    let mut blocks = Vec::new();
    for &(t, c, n, s) in BACKBONE_SCHEDULE.iter() {
        for i in 0..n {
            blocks.push(BlockSpec { expansion: t, out_channels: c, stride: if i == 0 { s } else { 1 }, kernel: 3 });
        }
    }
    Ok(NetworkSpec {
        input: Shape::new(3, resolution, resolution),
        stem: Some(StemSpec { out_channels: BACKBONE_STEM, kernel: 3, stride: 2 }),
        blocks,
        head: Some(BACKBONE_HEAD),
    })
}

pub fn build_backbone<T: Scalar>(resolution: usize) -> Result<Graph<T>, GraphError> {
    build_backbone_with_seed(resolution, DEFAULT_SEED)
}

pub fn build_backbone_with_seed<T: Scalar>(resolution: usize, seed: u64) -> Result<Graph<T>, GraphError> {
    build_network(&backbone_spec(resolution)?, seed, 0.0)
}

/// Small random network for property tests: at most `max_blocks` blocks and
/// `max_channels` channels anywhere, kernels in {1, 3}, strides in {1, 2}.
pub fn random_network_spec<R: Rng>(rng: &mut R, max_blocks: usize, max_channels: usize) -> NetworkSpec {
    let side = rng.random_range(3..=10);
    let input = Shape::new(rng.random_range(1..=3), side, side + rng.random_range(0..=2));
    let stem = StemSpec {
        out_channels: rng.random_range(1..=max_channels),
        kernel: if rng.random_bool(0.5) { 1 } else { 3 },
        stride: rng.random_range(1..=2),
    };
    let mut ch = stem.out_channels;
    let mut blocks = Vec::new();
    for _ in 0..rng.random_range(0..=max_blocks) {
        let max_t = (max_channels / ch).max(1);
        let expansion = rng.random_range(1..=max_t.min(4));
        let stride = if rng.random_bool(0.3) { 2 } else { 1 };
        let out_channels = if stride == 1 && rng.random_bool(0.6) { ch } else { rng.random_range(1..=max_channels) };
        let kernel = if rng.random_bool(0.75) { 3 } else { 1 };
        blocks.push(BlockSpec { expansion, out_channels, stride, kernel });
        ch = out_channels;
    }
    let head = rng.random_bool(0.5).then(|| rng.random_range(1..=max_channels));
    NetworkSpec { input, stem: Some(stem), blocks, head }
}

/// Builds a float graph from a spec with seeded random weights and batch
/// norm statistics. `neg_gamma_prob` is the chance that a batch-norm channel
/// gets a negative scale.
pub fn build_network<T: Scalar>(spec: &NetworkSpec, seed: u64, neg_gamma_prob: f64) -> Result<Graph<T>, GraphError> {
    let mut b = GraphBuilder::new(seed);
    b.neg_gamma_prob = neg_gamma_prob;
    let mut x = b.input("input", spec.input, 8)?;
    if let Some(stem) = &spec.stem {
        x = b.conv_bn_act("conv0", ConvKind::Standard, &x, stem.out_channels, stem.kernel, stem.stride, false)?;
    }
    for (i, blk) in spec.blocks.iter().enumerate() {
        let name = format!("b{}", i + 1);
        let in_ch = b.shape(&x)?.channels;
        let mut h = x.clone();
        if blk.expansion != 1 {
            h = b.conv_bn_act(&format!("{name}_expand"), ConvKind::Pointwise, &h, in_ch * blk.expansion, 1, 1, false)?;
        }
        let hidden = b.shape(&h)?.channels;
        h = b.conv_bn_act(&format!("{name}_dw"), ConvKind::Depthwise, &h, hidden, blk.kernel, blk.stride, false)?;
        h = b.conv_bn_act(&format!("{name}_project"), ConvKind::Pointwise, &h, blk.out_channels, 1, 1, true)?;
        if blk.stride == 1 && in_ch == blk.out_channels {
            h = b.add(&format!("{name}_add"), &h, &x)?;
        }
        x = h;
    }
    if let Some(c) = spec.head {
        x = b.conv_bn_act("conv_last", ConvKind::Pointwise, &x, c, 1, 1, false)?;
    }
    b.output("output", &x)?;
    b.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Standard,
    Depthwise,
    Pointwise,
}

/// Incremental graph construction with shape inference.
pub struct GraphBuilder<T> {
    nodes: Vec<LayerNode<T>>,
    tensors: BTreeMap<String, TensorData<T>>,
    rng: ChaCha8Rng,
    pub neg_gamma_prob: f64,
    pub stage: Stage,
}

impl<T: Scalar> GraphBuilder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            tensors: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            neg_gamma_prob: 0.0,
            stage: Stage::Float,
        }
    }

    pub fn shape(&self, id: &str) -> Result<Shape, GraphError> {
        self.nodes
            .iter()
            .find(|n| n.id == id)
            .map(|n| n.shape)
            .ok_or_else(|| GraphError::UnknownNode(id.to_owned()))
    }

    pub fn add_tensor(&mut self, id: &str, t: TensorData<T>) {
        self.tensors.insert(id.to_owned(), t);
    }

    /// Appends a node whose output shape is inferred from its producers.
    pub fn push(&mut self, id: &str, kind: NodeKind<T>, inputs: &[&str]) -> Result<String, GraphError> {
        let shapes: Vec<Shape> = inputs.iter().map(|i| self.shape(i)).collect::<Result<_, _>>()?;
        let shape = match &kind {
            NodeKind::Input { .. } => {
                return Err(GraphError::Invalid("use GraphBuilder::input for input nodes".into()));
            }
            NodeKind::Conv2d(a) | NodeKind::DepthwiseConv2d(a) | NodeKind::PointwiseConv2d(a) => {
                let s = shapes.first().ok_or_else(|| GraphError::Arity { node: id.into(), want: 1, got: 0 })?;
                Shape::new(a.out_channels, a.out_dim(s.height), a.out_dim(s.width))
            }
            NodeKind::Im2col(a) => Shape::new(a.patch_len(), a.out_dim(a.in_height), a.out_dim(a.in_width)),
            NodeKind::Matvec(m) => {
                let s = shapes.first().ok_or_else(|| GraphError::Arity { node: id.into(), want: 1, got: 0 })?;
                Shape::new(m.out_channels, s.height, s.width)
            }
            _ => *shapes.first().ok_or_else(|| GraphError::Arity { node: id.into(), want: 1, got: 0 })?,
        };
        self.nodes.push(LayerNode { id: id.to_owned(), kind, inputs: inputs.iter().map(|s| s.to_string()).collect(), shape });
        Ok(id.to_owned())
    }

    pub fn input(&mut self, id: &str, shape: Shape, bits: u8) -> Result<String, GraphError> {
        self.nodes.push(LayerNode {
            id: id.to_owned(),
            kind: NodeKind::Input { quant: ActQuant { bits, signed: false, scale: None } },
            inputs: Vec::new(),
            shape,
        });
        Ok(id.to_owned())
    }

    /// Convolution with explicit float weights `[out, in or 1, k, k]`.
    pub fn conv_with_weights(
        &mut self,
        id: &str,
        kind: ConvKind,
        input: &str,
        weights: FloatTensor<T>,
        stride: usize,
    ) -> Result<String, GraphError> {
        let dims = weights.dims().to_vec();
        if dims.len() != 4 || dims[2] != dims[3] {
            return Err(GraphError::Invalid(format!("conv `{id}` weights must be [out, in, k, k], got {dims:?}")));
        }
        let in_channels = self.shape(input)?.channels;
        let kernel = dims[2];
        let attrs = ConvAttrs {
            in_channels,
            out_channels: dims[0],
            kernel,
            stride,
            padding: kernel / 2,
            weight: format!("{id}.weight"),
            affine: None,
            negated: Vec::new(),
        };
        self.add_tensor(&attrs.weight, TensorData::Float(weights));
        let kind = match kind {
            ConvKind::Standard => NodeKind::Conv2d(attrs),
            ConvKind::Depthwise => NodeKind::DepthwiseConv2d(attrs),
            ConvKind::Pointwise => NodeKind::PointwiseConv2d(attrs),
        };
        self.push(id, kind, &[input])
    }

    /// Convolution with He-uniform random weights.
    pub fn conv(
        &mut self,
        id: &str,
        kind: ConvKind,
        input: &str,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<String, GraphError> {
        let in_channels = self.shape(input)?.channels;
        let per_out = if kind == ConvKind::Depthwise { 1 } else { in_channels };
        let fan_in = per_out * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..out_channels * fan_in).map(|_| T::lit(self.rng.random_range(-bound..bound))).collect();
        let w = FloatTensor::new(vec![out_channels, per_out, kernel, kernel], data).expect("finite init");
        self.conv_with_weights(id, kind, input, w, stride)
    }

    /// Batch norm with explicit `[4, C]` parameters (gamma, beta, mean, var).
    pub fn batch_norm_with(&mut self, id: &str, input: &str, params: FloatTensor<T>, eps: T) -> Result<String, GraphError> {
        let name = format!("{id}.params");
        self.add_tensor(&name, TensorData::Float(params));
        self.push(id, NodeKind::BatchNorm { params: name, eps }, &[input])
    }

    pub fn batch_norm(&mut self, id: &str, input: &str) -> Result<String, GraphError> {
        let c = self.shape(input)?.channels;
        let mut rows = vec![T::zero(); 4 * c];
        for ch in 0..c {
            let mut gamma = self.rng.random_range(0.6..1.4);
            if self.rng.random_bool(self.neg_gamma_prob) {
                gamma = -gamma;
            }
            rows[ch] = T::lit(gamma);
            rows[c + ch] = T::lit(self.rng.random_range(-0.15..0.15));
            rows[2 * c + ch] = T::lit(self.rng.random_range(-0.1..0.1));
            rows[3 * c + ch] = T::lit(self.rng.random_range(0.6..1.6));
        }
        let params = FloatTensor::new(vec![4, c], rows).expect("finite init");
        self.batch_norm_with(id, input, params, T::lit(1e-5))
    }

    pub fn act(&mut self, id: &str, input: &str, bits: u8, signed: bool) -> Result<String, GraphError> {
        self.push(id, NodeKind::ActivationQuant(ActQuant { bits, signed, scale: None }), &[input])
    }

    pub fn add(&mut self, id: &str, a: &str, b: &str) -> Result<String, GraphError> {
        self.push(id, NodeKind::ResidualAdd, &[a, b])
    }

    pub fn output(&mut self, id: &str, input: &str) -> Result<String, GraphError> {
        self.push(id, NodeKind::Output, &[input])
    }

    /// conv -> batch norm -> activation quantizer (unsigned unless `linear`).
    #[allow(clippy::too_many_arguments)]
    pub fn conv_bn_act(
        &mut self,
        id: &str,
        kind: ConvKind,
        input: &str,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        linear: bool,
    ) -> Result<String, GraphError> {
        let c = self.conv(id, kind, input, out_channels, kernel, stride)?;
        let n = self.batch_norm(&format!("{id}_bn"), &c)?;
        self.act(&format!("{id}_act"), &n, 8, linear)
    }

    pub fn finish(self) -> Result<Graph<T>, GraphError> {
        let g = Graph {
            nodes: self.nodes,
            tensors: self.tensors,
            meta: GraphMeta { stage: self.stage, taps: BTreeMap::new() },
        };
        g.validate()?;
        Ok(g)
    }
}
