use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{fnv1a64, EngineError, Keep};
use crate::graph::{Graph, Im2colAttrs, MatvecAttrs, NodeKind, Shape, Stage};
use crate::lowering::{matvec_channel_ranges, multithreshold_eval, value_range};
use crate::qtensor::QuantTensor;
use crate::scalar::Scalar;
use crate::tensor::IntTensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceEntry {
    pub id: String,
    pub kind: String,
    pub dims: Vec<usize>,
    /// FNV-1a 64 of the little-endian payload, as 16 hex digits.
    pub checksum: String,
    pub min: i32,
    pub max: i32,
    #[serde(skip)]
    pub wall_ns: u64,
    #[serde(skip)]
    pub data: Option<IntTensor>,
}

/// Equality ignores wall time.
impl PartialEq for TraceEntry {
    fn eq(&self, o: &Self) -> bool {
        (&self.id, &self.kind, &self.dims, &self.checksum, self.min, self.max, &self.data)
            == (&o.id, &o.kind, &o.dims, &o.checksum, o.min, o.max, &o.data)
    }
}

impl Eq for TraceEntry {}

/// Per-node integer outputs of one run, in topological order. Serializes to
/// shapes and checksums only; wall times are reported separately so the JSON
/// is reproducible.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub entries: Vec<TraceEntry>,
}

impl ExecutionTrace {
    pub fn get(&self, id: &str) -> Option<&TraceEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn output(&self) -> &TraceEntry {
        self.entries.last().expect("trace is never empty")
    }

    pub fn timings(&self) -> Vec<(String, u64)> {
        self.entries.iter().map(|e| (e.id.clone(), e.wall_ns)).collect()
    }
}

/// Extracts zero-padded patches. Output is `[C*k*k, H'*W']`, patch index
/// ordered channel-major, then kernel row, then kernel column.
pub fn im2col(x: &[i32], a: &Im2colAttrs) -> Vec<i32> {
    let (k, s, p) = (a.kernel, a.stride, a.padding as isize);
    let (oh, ow) = (a.out_dim(a.in_height), a.out_dim(a.in_width));
    let plane = a.in_height * a.in_width;
    let mut out = vec![0i32; a.patch_len() * oh * ow];
    for c in 0..a.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let j = (c * k + ky) * k + kx;
                let dst = &mut out[j * oh * ow..(j + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= a.in_height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && (ix as usize) < a.in_width {
                            dst[oy * ow + ox] = x[c * plane + iy as usize * a.in_width + ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Integer matrix-vector products over `pixels` patch columns, accumulated in
/// 64 bits. Depthwise rows only see their own channel's `k*k` patch slice.
pub fn matvec(patches: &[i32], weights: &[i32], m: &MatvecAttrs, pixels: usize) -> Vec<i64> {
    let mut acc = vec![0i64; m.out_channels * pixels];
    for (o, row) in weights.chunks(m.fold_in).enumerate() {
        let dst = &mut acc[o * pixels..(o + 1) * pixels];
        let base = if m.depthwise { o * m.fold_in } else { 0 };
        for (j, &w) in row.iter().enumerate() {
            if w == 0 {
                continue;
            }
            let src = &patches[(base + j) * pixels..(base + j + 1) * pixels];
            for (d, &x) in dst.iter_mut().zip(src) {
                *d += w as i64 * x as i64;
            }
        }
    }
    acc
}

pub fn run_int<T: Scalar>(g: &Graph<T>, input: &QuantTensor<T>) -> Result<ExecutionTrace, EngineError> {
    let t = IntTensor::new(input.dims().to_vec(), input.data().to_vec()).expect("quant tensor dims match payload");
    run_int_with(g, &t, &Keep::All)
}

/// Executes a lowered graph on integer input. Every matvec accumulator is
/// checked against its reachable range; leaving it means the lowering is
/// wrong and is reported as saturation.
pub fn run_int_with<T: Scalar>(g: &Graph<T>, input: &IntTensor, keep: &Keep) -> Result<ExecutionTrace, EngineError> {
    if g.stage() != Stage::Lowered {
        return Err(EngineError::Stage { want: "lowered", got: g.stage() });
    }
    let in_node = g.input_node();
    let s = in_node.shape;
    let want = vec![s.channels, s.height, s.width];
    if input.dims() != want.as_slice() {
        return Err(EngineError::InputShape { want, got: input.dims().to_vec() });
    }
    let (lo, hi) = value_range(g, &in_node.id)?;
    if let Some(index) = input.data().iter().position(|&v| (v as i64) < lo || (v as i64) > hi) {
        return Err(EngineError::InputRange { index, value: input.data()[index], lo: lo as i32, hi: hi as i32 });
    }

    let mut pending: HashMap<&str, usize> = g.consumers().into_iter().map(|(k, v)| (k, v.len())).collect();
    let mut live: HashMap<&str, Vec<i32>> = HashMap::new();
    let mut entries = Vec::with_capacity(g.nodes.len());
    for node in &g.nodes {
        let start = Instant::now();
        let arg = |i: usize| -> &Vec<i32> { &live[node.inputs[i].as_str()] };
        let value: Vec<i32> = match &node.kind {
            NodeKind::Input { .. } => input.data().to_vec(),
            NodeKind::Im2col(a) => im2col(arg(0), a),
            NodeKind::Matvec(m) => {
                let w = g
                    .int_tensor(&m.weight)
                    .ok_or_else(|| EngineError::MissingTensor { node: node.id.clone(), tensor: m.weight.clone() })?;
                let px = node.shape.pixels();
                let acc = matvec(arg(0), w.data(), m, px);
                let ranges = matvec_channel_ranges(g, &node.id)?;
                let mut out = Vec::with_capacity(acc.len());
                for (i, &v) in acc.iter().enumerate() {
                    let c = i / px.max(1);
                    let (rlo, rhi) = ranges[c];
                    let (rlo, rhi) = (rlo.max(i32::MIN as i64), rhi.min(i32::MAX as i64));
                    if v < rlo || v > rhi {
                        return Err(EngineError::Saturation { node: node.id.clone(), channel: c, value: v, lo: rlo, hi: rhi });
                    }
                    out.push(v as i32);
                }
                out
            }
            NodeKind::Multithreshold(t) => {
                let unit = g
                    .threshold_unit(&t.thresholds)
                    .ok_or_else(|| EngineError::MissingTensor { node: node.id.clone(), tensor: t.thresholds.clone() })?;
                let acc: Vec<i64> = arg(0).iter().map(|&v| v as i64).collect();
                multithreshold_eval(&acc, unit)
            }
            NodeKind::ResidualAdd => {
                let mut out = Vec::with_capacity(node.shape.numel());
                for (&a, &b) in arg(0).iter().zip(arg(1)) {
                    let v = a as i64 + b as i64;
                    if v < i32::MIN as i64 || v > i32::MAX as i64 {
                        return Err(EngineError::Saturation { node: node.id.clone(), channel: 0, value: v, lo: i32::MIN as i64, hi: i32::MAX as i64 });
                    }
                    out.push(v as i32);
                }
                out
            }
            NodeKind::Output => arg(0).clone(),
            other => return Err(EngineError::Unsupported { node: node.id.clone(), kind: other.name() }),
        };
        let wall_ns = start.elapsed().as_nanos() as u64;
        for i in &node.inputs {
            let left = pending.get_mut(i.as_str()).expect("producer has consumers");
            *left -= 1;
            if *left == 0 {
                live.remove(i.as_str());
            }
        }
        let dims = dims_of(node.shape);
        let (min, max) = value.iter().fold((i32::MAX, i32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        let data = keep.wants(&node.id).then(|| IntTensor::new(dims.clone(), value.clone()).expect("dims match"));
        entries.push(TraceEntry {
            id: node.id.clone(),
            kind: node.kind.name().to_owned(),
            dims,
            checksum: format!("{:016x}", fnv1a64(&value)),
            min,
            max,
            wall_ns,
            data,
        });
        if pending.get(node.id.as_str()).copied().unwrap_or(0) > 0 {
            live.insert(node.id.as_str(), value);
        }
    }
    Ok(ExecutionTrace { entries })
}

fn dims_of(s: Shape) -> Vec<usize> {
    vec![s.channels, s.height, s.width]
}
