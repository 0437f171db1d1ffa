//! Graph passes from a quantized model to an integer-only streaming
//! pipeline: batch-norm folding, convolution lowering to im2col + matvec,
//! quantizer absorption into multi-threshold units, residual scale
//! alignment and final streamlining.

mod thresholds;

pub use thresholds::{
    compute_thresholds, is_sorted, multithreshold_eval, output_range, threshold_eval, AffineSpec,
};

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use crate::graph::{
    ActQuant, Graph, GraphError, Im2colAttrs, LayerNode, MatvecAttrs, NodeKind, Stage, TensorData,
    ThresholdAttrs, ThresholdDerivation,
};
use crate::qtensor::{int_range, QuantError};
use crate::scalar::Scalar;
use crate::tensor::{FloatTensor, IntTensor};

#[derive(Debug, Error, PartialEq)]
pub enum LowerError {
    #[error("{0}")]
    Invalid(String),
    #[error("channel {channel} has a non-positive multiplier")]
    NonPositiveMultiplier { channel: usize },
    #[error("pass needs a {want:?} graph, got {got:?}")]
    Stage { want: Stage, got: Stage },
    #[error("batch norm `{0}` does not directly follow a convolution")]
    BatchNormPosition(String),
    #[error("batch norm `{node}` channel {channel} has a zero or non-finite multiplier")]
    DegenerateBatchNorm { node: String, channel: usize },
    #[error("unsupported at `{node}`: {detail}")]
    Unsupported { node: String, detail: String },
    #[error("residual add `{add}` is fed by `{producer}`, which has no threshold unit")]
    ResidualProducer { add: String, producer: String },
    #[error("accumulator of `{node}` can reach {bound}, which does not fit 32 bits")]
    AccumulatorOverflow { node: String, bound: i64 },
    #[error("float operation left at `{node}` ({detail})")]
    FloatRemains { node: String, detail: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

fn require_stage<T: Scalar>(g: &Graph<T>, want: Stage) -> Result<(), LowerError> {
    if g.stage() == want {
        Ok(())
    } else {
        Err(LowerError::Stage { want, got: g.stage() })
    }
}

fn node_index<T: Scalar>(g: &Graph<T>, id: &str) -> Result<usize, LowerError> {
    g.index_of(id).ok_or_else(|| GraphError::UnknownNode(id.to_owned()).into())
}

fn float_rows<T: Scalar>(g: &Graph<T>, id: &str) -> Result<Vec<T>, LowerError> {
    g.float_tensor(id)
        .map(|t| t.data().to_vec())
        .ok_or_else(|| LowerError::Invalid(format!("missing float tensor `{id}`")))
}

fn rewire<T>(nodes: &mut [LayerNode<T>], from: &str, to: &str) {
    for n in nodes.iter_mut() {
        for i in n.inputs.iter_mut() {
            if i == from {
                *i = to.to_owned();
            }
        }
    }
}

/// Folds every batch norm into the convolution that feeds it as a per-channel
/// affine `a * conv + b` with `a > 0`; channels whose multiplier is negative
/// get their weights negated. Works on float and quantized graphs.
pub fn fold_batchnorm<T: Scalar>(g: &Graph<T>) -> Result<Graph<T>, LowerError> {
    let mut out = g.clone();
    let consumers: HashMap<String, usize> = g
        .consumers()
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v.len()))
        .collect();
    let bn_ids: Vec<String> = g
        .nodes
        .iter()
        .filter(|n| matches!(n.kind, NodeKind::BatchNorm { .. }))
        .map(|n| n.id.clone())
        .collect();
    for bn_id in bn_ids {
        let bi = node_index(&out, &bn_id)?;
        let (params, eps) = match &out.nodes[bi].kind {
            NodeKind::BatchNorm { params, eps } => (params.clone(), *eps),
            _ => unreachable!(),
        };
        let conv_id = out.nodes[bi].inputs[0].clone();
        let ci = node_index(&out, &conv_id)?;
        let movable = out.nodes[ci].kind.conv().is_some_and(|a| a.affine.is_none())
            && consumers.get(&conv_id).copied() == Some(1);
        if !movable {
            return Err(LowerError::BatchNormPosition(bn_id));
        }
        let c = out.nodes[bi].shape.channels;
        let p = float_rows(&out, &params)?;
        let mut a = Vec::with_capacity(c);
        let mut b = Vec::with_capacity(c);
        let mut negated = Vec::new();
        for ch in 0..c {
            let (gamma, beta, mean, var) = (p[ch], p[c + ch], p[2 * c + ch], p[3 * c + ch]);
            let mut m = gamma / (var + eps).sqrt();
            if !m.is_finite() || m == T::zero() {
                return Err(LowerError::DegenerateBatchNorm { node: bn_id, channel: ch });
            }
            b.push(beta - m * mean);
            if m < T::zero() {
                negated.push(ch);
                m = -m;
            }
            a.push(m);
        }
        let attrs = out.nodes[ci].kind.conv().expect("checked above").clone();
        let negated_weights = match out.tensors.get(&attrs.weight) {
            Some(TensorData::Quant(q)) => TensorData::Quant(q.negate_channels(&negated)),
            Some(TensorData::Float(w)) => {
                let per = w.len() / attrs.out_channels;
                let data = w
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| if negated.contains(&(i / per)) { -v } else { v })
                    .collect();
                TensorData::Float(FloatTensor::new(w.dims().to_vec(), data).expect("finite"))
            }
            _ => return Err(LowerError::Invalid(format!("conv `{conv_id}` has no weight tensor"))),
        };
        out.tensors.insert(attrs.weight.clone(), negated_weights);
        let affine_id = format!("{conv_id}.affine");
        a.extend(b);
        out.tensors.insert(affine_id.clone(), TensorData::Float(FloatTensor::new(vec![2, c], a).expect("finite")));
        let conv = out.nodes[ci].kind.conv_mut().expect("conv");
        conv.affine = Some(affine_id);
        conv.negated = negated;
        out.nodes.remove(bi);
        rewire(&mut out.nodes, &bn_id, &conv_id);
        out.tensors.remove(&params);
    }
    out.validate()?;
    Ok(out)
}

/// Replaces every convolution by an im2col node (`<id>_im2col`) and a matvec
/// node that keeps the convolution id. Weights become integer matrices
/// `[out, in*k*k]` (or `[C, k*k]` for depthwise) plus a float scale vector.
pub fn lower_conv_to_im2col_matvec<T: Scalar>(g: &Graph<T>) -> Result<Graph<T>, LowerError> {
    require_stage(g, Stage::Quantized)?;
    let mut out = g.clone();
    if let Some(bn) = out.nodes.iter().find(|n| matches!(n.kind, NodeKind::BatchNorm { .. })) {
        return Err(LowerError::Invalid(format!("batch norm `{}` must be folded before lowering", bn.id)));
    }
    let mut nodes = Vec::with_capacity(out.nodes.len() * 2);
    for node in std::mem::take(&mut out.nodes) {
        let Some(attrs) = node.kind.conv().cloned() else {
            nodes.push(node);
            continue;
        };
        if !matches!((attrs.kernel, attrs.stride), (1, 1) | (1, 2) | (3, 1) | (3, 2)) {
            return Err(LowerError::Unsupported {
                node: node.id,
                detail: format!("kernel {} stride {}", attrs.kernel, attrs.stride),
            });
        }
        let q = match out.tensors.get(&attrs.weight) {
            Some(TensorData::Quant(q)) => q.clone(),
            _ => {
                return Err(LowerError::Unsupported {
                    node: node.id,
                    detail: "convolution weights are not quantized".into(),
                })
            }
        };
        let producer = nodes
            .iter()
            .find(|n: &&LayerNode<T>| n.id == node.inputs[0])
            .ok_or_else(|| GraphError::UnknownInput { node: node.id.clone(), input: node.inputs[0].clone() })?;
        let src = producer.shape;
        let depthwise = node.kind.is_depthwise();
        let im = Im2colAttrs {
            in_channels: src.channels,
            in_height: src.height,
            in_width: src.width,
            kernel: attrs.kernel,
            stride: attrs.stride,
            padding: attrs.padding,
        };
        let im_id = format!("{}_im2col", node.id);
        let im_shape = crate::graph::Shape::new(im.patch_len(), im.out_dim(src.height), im.out_dim(src.width));
        nodes.push(LayerNode { id: im_id.clone(), kind: NodeKind::Im2col(im), inputs: node.inputs.clone(), shape: im_shape });

        let fold_in = if depthwise { attrs.kernel * attrs.kernel } else { attrs.in_channels * attrs.kernel * attrs.kernel };
        let weight = IntTensor::new(vec![attrs.out_channels, fold_in], q.data().to_vec())
            .map_err(|e| LowerError::Invalid(e.to_string()))?;
        let scale_id = format!("{}.weight_scale", node.id);
        out.tensors.insert(attrs.weight.clone(), TensorData::Int(weight));
        out.tensors.insert(
            scale_id.clone(),
            TensorData::Float(FloatTensor::new(vec![attrs.out_channels], q.scales().to_vec()).expect("positive scales")),
        );
        let mv = MatvecAttrs {
            fold_in,
            out_channels: attrs.out_channels,
            depthwise,
            weight: attrs.weight.clone(),
            weight_bits: q.bit_width(),
            negated: attrs.negated.clone(),
            affine: attrs.affine.clone(),
            weight_scale: Some(scale_id),
        };
        nodes.push(LayerNode { id: node.id, kind: NodeKind::Matvec(mv), inputs: vec![im_id], shape: node.shape });
    }
    out.nodes = nodes;
    check_accumulators(&out)?;
    refresh_taps(&mut out);
    out.validate()?;
    Ok(out)
}

/// Inclusive integer range of the values a node emits, derived from
/// bit-widths and integer weights.
pub fn value_range<T: Scalar>(g: &Graph<T>, id: &str) -> Result<(i64, i64), LowerError> {
    let node = g.node(id).ok_or_else(|| GraphError::UnknownNode(id.to_owned()))?;
    let widen = |(lo, hi): (i32, i32)| (lo as i64, hi as i64);
    match &node.kind {
        NodeKind::Input { quant } | NodeKind::ActivationQuant(quant) => {
            if quant.signed && quant.bits == 1 {
                return Err(LowerError::Unsupported { node: id.into(), detail: "1-bit signed activation".into() });
            }
            Ok(widen(int_range(quant.bits, quant.signed)))
        }
        NodeKind::Multithreshold(t) => Ok(widen(output_range(t.out_bits, t.out_signed)?)),
        NodeKind::ResidualAdd => {
            let a = value_range(g, &node.inputs[0])?;
            let b = value_range(g, &node.inputs[1])?;
            Ok((a.0 + b.0, a.1 + b.1))
        }
        NodeKind::Im2col(_) => {
            let (lo, hi) = value_range(g, &node.inputs[0])?;
            Ok((lo.min(0), hi.max(0)))
        }
        NodeKind::Matvec(_) => {
            let per = matvec_channel_ranges(g, id)?;
            Ok(per.iter().fold((i64::MAX, i64::MIN), |(l, h), r| (l.min(r.0), h.max(r.1))))
        }
        NodeKind::Output => value_range(g, &node.inputs[0]),
        _ => Err(LowerError::Unsupported { node: id.into(), detail: format!("{} has no integer range", node.kind.name()) }),
    }
}

/// Exact reachable accumulator interval of every output channel of a matvec:
/// each product is bounded independently by the input range endpoints.
pub fn matvec_channel_ranges<T: Scalar>(g: &Graph<T>, id: &str) -> Result<Vec<(i64, i64)>, LowerError> {
    let node = g.node(id).ok_or_else(|| GraphError::UnknownNode(id.to_owned()))?;
    let NodeKind::Matvec(m) = &node.kind else {
        return Err(LowerError::Invalid(format!("`{id}` is not a matvec")));
    };
    let w = g
        .int_tensor(&m.weight)
        .ok_or_else(|| LowerError::Invalid(format!("matvec `{id}` has no integer weights")))?;
    let (lo, hi) = value_range(g, &node.inputs[0])?;
    Ok(w.data()
        .chunks(m.fold_in)
        .map(|row| {
            row.iter().fold((0i64, 0i64), |(l, h), &wv| {
                let (p, q) = (wv as i64 * lo, wv as i64 * hi);
                (l + p.min(q), h + p.max(q))
            })
        })
        .collect())
}

fn check_accumulators<T: Scalar>(g: &Graph<T>) -> Result<(), LowerError> {
    for n in &g.nodes {
        if matches!(n.kind, NodeKind::Matvec(_) | NodeKind::ResidualAdd) {
            let (lo, hi) = value_range(g, &n.id)?;
            for bound in [lo, hi] {
                if bound < i32::MIN as i64 || bound > i32::MAX as i64 {
                    return Err(LowerError::AccumulatorOverflow { node: n.id.clone(), bound });
                }
            }
        }
    }
    Ok(())
}

/// Real value of one integer unit on a node's output edge, when the edge
/// carries a single per-tensor scale.
pub fn edge_scale<T: Scalar>(g: &Graph<T>, id: &str) -> Option<T> {
    let node = g.node(id)?;
    match &node.kind {
        NodeKind::Input { quant } | NodeKind::ActivationQuant(quant) => quant.scale,
        NodeKind::Multithreshold(t) => t.derivation.as_ref().map(|d| d.out_scale),
        NodeKind::ResidualAdd | NodeKind::Im2col(_) | NodeKind::Output => edge_scale(g, &node.inputs[0]),
        _ => None,
    }
}

fn matvec_input_scale<T: Scalar>(g: &Graph<T>, matvec: &LayerNode<T>) -> Option<T> {
    edge_scale(g, &matvec.inputs[0])
}

/// Recomputes dequantization taps for every node whose scales are still
/// known; nodes whose scale metadata was stripped keep their entry.
pub fn refresh_taps<T: Scalar>(g: &mut Graph<T>) {
    let mut taps: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for n in &g.nodes {
        let tap = match &n.kind {
            NodeKind::Matvec(m) => (|| {
                let s_in = matvec_input_scale(g, n)?;
                let ws = g.float_tensor(m.weight_scale.as_deref()?)?;
                Some(
                    ws.data()
                        .iter()
                        .enumerate()
                        .map(|(c, &s)| if m.negated.contains(&c) { -s * s_in } else { s * s_in })
                        .collect(),
                )
            })(),
            NodeKind::Output => taps.get(&n.inputs[0]).cloned().or_else(|| g.meta.taps.get(&n.inputs[0]).cloned()),
            NodeKind::Im2col(_) => None,
            _ => edge_scale(g, &n.id).map(|s| vec![s]),
        };
        if let Some(t) = tap.or_else(|| g.meta.taps.get(&n.id).cloned()) {
            taps.insert(n.id.clone(), t);
        }
    }
    g.meta.taps = taps;
}

/// Threshold unit implied by a derivation record.
fn derive_unit<T: Scalar>(
    g: &Graph<T>,
    d: &ThresholdDerivation<T>,
    out_bits: u8,
    out_signed: bool,
) -> Result<crate::graph::ThresholdUnit, LowerError> {
    let aff = float_rows(g, &d.affine)?;
    let ws = float_rows(g, &d.weight_scale)?;
    let c = ws.len();
    if aff.len() != 2 * c {
        return Err(LowerError::Invalid(format!("affine `{}` does not match {c} channels", d.affine)));
    }
    let a = (0..c).map(|ch| aff[ch] * ws[ch] * d.in_scale / d.out_scale).collect();
    let b = (0..c).map(|ch| aff[c + ch] / d.out_scale).collect();
    compute_thresholds(&AffineSpec::new(a, b)?, d.acc_range, out_bits, out_signed)
}

/// Turns every activation quantizer that follows a matvec into a
/// multi-threshold unit absorbing the matvec's affine, weight scales, input
/// scale and output scale.
pub fn absorb_quantizers<T: Scalar>(g: &Graph<T>) -> Result<Graph<T>, LowerError> {
    let mut out = g.clone();
    for i in 0..out.nodes.len() {
        let NodeKind::ActivationQuant(q) = &out.nodes[i].kind else { continue };
        let q: ActQuant<T> = q.clone();
        let id = out.nodes[i].id.clone();
        let producer = out.node(&out.nodes[i].inputs[0]).expect("validated").clone();
        let NodeKind::Matvec(m) = &producer.kind else {
            return Err(LowerError::Unsupported {
                node: id,
                detail: format!("activation quantizer after {}", producer.kind.name()),
            });
        };
        let out_scale = q.scale.ok_or_else(|| LowerError::Unsupported { node: id.clone(), detail: "uncalibrated quantizer".into() })?;
        let in_scale = matvec_input_scale(&out, &producer).ok_or_else(|| LowerError::Unsupported {
            node: producer.id.clone(),
            detail: "matvec input has no per-tensor scale".into(),
        })?;
        let weight_scale = m
            .weight_scale
            .clone()
            .ok_or_else(|| LowerError::Invalid(format!("matvec `{}` lost its weight scales", producer.id)))?;
        let affine = match &m.affine {
            Some(a) => a.clone(),
            None => {
                let a_id = format!("{}.affine", producer.id);
                let c = m.out_channels;
                let mut rows = vec![T::one(); c];
                rows.extend(vec![T::zero(); c]);
                out.tensors.insert(a_id.clone(), TensorData::Float(FloatTensor::new(vec![2, c], rows).expect("finite")));
                let pi = node_index(&out, &producer.id)?;
                if let NodeKind::Matvec(mm) = &mut out.nodes[pi].kind {
                    mm.affine = Some(a_id.clone());
                }
                a_id
            }
        };
        let acc_range = value_range(&out, &producer.id)?;
        let derivation = ThresholdDerivation { affine, weight_scale, in_scale, out_scale, acc_range };
        let unit = derive_unit(&out, &derivation, q.bits, q.signed)?;
        let t_id = format!("{id}.thresholds");
        out.tensors.insert(t_id.clone(), TensorData::Thresholds(unit));
        out.nodes[i].kind = NodeKind::Multithreshold(ThresholdAttrs {
            thresholds: t_id,
            out_bits: q.bits,
            out_signed: q.signed,
            derivation: Some(derivation),
        });
    }
    refresh_taps(&mut out);
    out.validate()?;
    Ok(out)
}

struct UnionFind {
    parent: HashMap<String, String>,
}

impl UnionFind {
    fn find(&mut self, x: &str) -> String {
        let p = self.parent.get(x).cloned().unwrap_or_else(|| x.to_owned());
        if p == x {
            return p;
        }
        let root = self.find(&p);
        self.parent.insert(x.to_owned(), root.clone());
        root
    }

    fn union(&mut self, a: &str, b: &str) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent.insert(ra, rb);
        }
    }
}

/// Groups of node ids whose outputs meet at residual additions (transitively),
/// in node order. Adds are included in their group.
pub fn residual_groups<T: Scalar>(g: &Graph<T>) -> Vec<Vec<String>> {
    let mut uf = UnionFind { parent: HashMap::new() };
    for n in g.nodes.iter().filter(|n| matches!(n.kind, NodeKind::ResidualAdd)) {
        for i in &n.inputs {
            uf.union(&n.id, i);
        }
    }
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for n in &g.nodes {
        if uf.parent.contains_key(&n.id) || uf.parent.values().any(|v| v == &n.id) {
            let root = uf.find(&n.id);
            if !groups.contains_key(&root) {
                order.push(root.clone());
            }
            groups.entry(root).or_default().push(n.id.clone());
        }
    }
    order.into_iter().map(|r| groups.remove(&r).expect("group")).collect()
}

/// Gives every residual add operand the same output scale (the group max),
/// re-deriving the producer thresholds and any downstream thresholds whose
/// input scale changed.
pub fn align_residual_scales<T: Scalar>(g: &Graph<T>) -> Result<Graph<T>, LowerError> {
    let mut out = g.clone();
    for group in residual_groups(&out) {
        let mut producers = Vec::new();
        for id in &group {
            let n = out.node(id).expect("group member");
            match &n.kind {
                NodeKind::ResidualAdd => {}
                NodeKind::Multithreshold(t) if t.derivation.is_some() => producers.push(id.clone()),
                _ => {
                    let add = out
                        .nodes
                        .iter()
                        .find(|a| matches!(a.kind, NodeKind::ResidualAdd) && a.inputs.contains(id))
                        .map(|a| a.id.clone())
                        .unwrap_or_default();
                    return Err(LowerError::ResidualProducer { add, producer: id.clone() });
                }
            }
        }
        let shared = producers
            .iter()
            .filter_map(|p| edge_scale(&out, p))
            .fold(T::zero(), |m, s| m.max(s));
        for p in producers {
            let i = node_index(&out, &p)?;
            if let NodeKind::Multithreshold(t) = &mut out.nodes[i].kind {
                t.derivation.as_mut().expect("checked").out_scale = shared;
            }
        }
    }
    rederive_stale(&mut out)?;
    refresh_taps(&mut out);
    out.validate()?;
    Ok(out)
}

/// Re-derives every threshold unit whose recorded input scale no longer
/// matches the edge feeding its matvec, or whose output scale was changed.
fn rederive_stale<T: Scalar>(g: &mut Graph<T>) -> Result<(), LowerError> {
    for i in 0..g.nodes.len() {
        let NodeKind::Multithreshold(t) = &g.nodes[i].kind else { continue };
        let Some(d) = t.derivation.clone() else { continue };
        let (bits, signed, t_id) = (t.out_bits, t.out_signed, t.thresholds.clone());
        let mv = g.node(&g.nodes[i].inputs[0]).expect("validated");
        let in_scale = matvec_input_scale(g, mv).unwrap_or(d.in_scale);
        let current = derive_unit(g, &ThresholdDerivation { in_scale, ..d.clone() }, bits, signed)?;
        if g.threshold_unit(&t_id) != Some(&current) {
            g.tensors.insert(t_id, TensorData::Thresholds(current));
        }
        if let NodeKind::Multithreshold(t) = &mut g.nodes[i].kind {
            t.derivation.as_mut().expect("present").in_scale = in_scale;
        }
    }
    Ok(())
}

/// Drops all real-valued metadata and checks that only integer node kinds
/// and integer tensors remain. Idempotent.
pub fn streamline_to_integer<T: Scalar>(g: &Graph<T>) -> Result<Graph<T>, LowerError> {
    let mut out = g.clone();
    refresh_taps(&mut out);
    let consumers: HashMap<String, Vec<String>> = out
        .consumers()
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v.into_iter().map(str::to_owned).collect()))
        .collect();
    for n in &out.nodes {
        if !n.kind.is_integer_kind() {
            return Err(LowerError::FloatRemains { node: n.id.clone(), detail: n.kind.name().into() });
        }
        if let NodeKind::Matvec(m) = &n.kind {
            if let Some(a) = &m.affine {
                let absorbed = consumers.get(&n.id).is_some_and(|cs| {
                    cs.iter().all(|c| matches!(out.node(c).map(|x| &x.kind), Some(NodeKind::Multithreshold(_))))
                });
                let identity = out.float_tensor(a).is_some_and(|t| {
                    let c = m.out_channels;
                    t.data()[..c].iter().all(|v| *v == T::one()) && t.data()[c..].iter().all(|v| *v == T::zero())
                });
                if !absorbed && !identity {
                    return Err(LowerError::FloatRemains { node: n.id.clone(), detail: "unabsorbed affine".into() });
                }
            }
        }
    }
    for n in out.nodes.iter_mut() {
        match &mut n.kind {
            NodeKind::Input { quant } => quant.scale = None,
            NodeKind::Matvec(m) => {
                m.affine = None;
                m.weight_scale = None;
            }
            NodeKind::Multithreshold(t) => t.derivation = None,
            _ => {}
        }
    }
    out.prune_tensors();
    for (id, t) in &out.tensors {
        if !matches!(t, TensorData::Int(_) | TensorData::Thresholds(_)) {
            return Err(LowerError::FloatRemains { node: id.clone(), detail: format!("{} tensor", t.type_name()) });
        }
    }
    out.meta.stage = Stage::Lowered;
    out.validate()?;
    Ok(out)
}

/// Full lowering pipeline for a quantized graph.
pub fn lower<T: Scalar>(g: &Graph<T>) -> Result<Graph<T>, LowerError> {
    require_stage(g, Stage::Quantized)?;
    let g = fold_batchnorm(g)?;
    let g = lower_conv_to_im2col_matvec(&g)?;
    let g = absorb_quantizers(&g)?;
    let g = align_residual_scales(&g)?;
    streamline_to_integer(&g)
}
