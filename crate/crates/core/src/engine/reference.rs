use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use super::{EngineError, Keep};
use crate::graph::{ConvAttrs, Graph, NodeKind, Shape, Stage, TensorData};
use crate::qtensor::{dequantize, quantize_value};
use crate::scalar::Scalar;
use crate::tensor::FloatTensor;

/// Float outputs of a reference run, keyed by node id.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceTrace<T> {
    pub order: Vec<String>,
    pub outputs: BTreeMap<String, FloatTensor<T>>,
    pub output_id: String,
}

impl<T: Scalar> ReferenceTrace<T> {
    pub fn get(&self, id: &str) -> Option<&FloatTensor<T>> {
        self.outputs.get(id)
    }

    pub fn output(&self) -> &FloatTensor<T> {
        &self.outputs[&self.output_id]
    }
}

/// Direct convolution on `[C, H, W]` data. Each output accumulates over input
/// channels, then kernel rows, then kernel columns. Output channels are
/// computed in parallel; every element is still summed in that fixed order.
pub fn conv2d<T: Scalar>(x: &[T], src: Shape, w: &[T], a: &ConvAttrs, depthwise: bool, dst: Shape) -> Vec<T> {
    let (k, s, p) = (a.kernel, a.stride, a.padding as isize);
    let per_out = if depthwise { 1 } else { a.in_channels };
    let plane = src.pixels();
    let mut out = vec![T::zero(); dst.numel()];
    out.par_chunks_mut(dst.pixels().max(1)).enumerate().for_each(|(o, acc)| {
        let wo = &w[o * per_out * k * k..(o + 1) * per_out * k * k];
        for il in 0..per_out {
            let ic = if depthwise { o } else { il };
            let xs = &x[ic * plane..(ic + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wo[(il * k + ky) * k + kx];
                    for oy in 0..dst.height {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= src.height as isize {
                            continue;
                        }
                        let row = &xs[iy as usize * src.width..(iy as usize + 1) * src.width];
                        for ox in 0..dst.width {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && (ix as usize) < src.width {
                                acc[oy * dst.width + ox] += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn fake_quant<T: Scalar>(x: &mut [T], scale: T, bits: u8, signed: bool) {
    for v in x.iter_mut() {
        *v = T::from_int(quantize_value(*v, scale, bits, signed) as i64) * scale;
    }
}

fn weights<T: Scalar>(g: &Graph<T>, node: &str, id: &str) -> Result<Vec<T>, EngineError> {
    match g.tensors.get(id) {
        Some(TensorData::Float(t)) => Ok(t.data().to_vec()),
        Some(TensorData::Quant(q)) => Ok(dequantize(q).into_data()),
        _ => Err(EngineError::MissingTensor { node: node.into(), tensor: id.into() }),
    }
}

fn float_params<'a, T: Scalar>(g: &'a Graph<T>, node: &str, id: &str) -> Result<&'a [T], EngineError> {
    g.float_tensor(id)
        .map(|t| t.data())
        .ok_or_else(|| EngineError::MissingTensor { node: node.into(), tensor: id.into() })
}

pub fn run_reference<T: Scalar>(g: &Graph<T>, input: &FloatTensor<T>) -> Result<ReferenceTrace<T>, EngineError> {
    run_reference_with(g, input, &Keep::All)
}

pub fn run_reference_with<T: Scalar>(
    g: &Graph<T>,
    input: &FloatTensor<T>,
    keep: &Keep,
) -> Result<ReferenceTrace<T>, EngineError> {
    run_reference_observed(g, input, keep, &mut |_, _| {})
}

/// Runs a float or quantized graph, emulating every quantizer by
/// quantize-then-dequantize. `observe` sees each node output once; outputs
/// not retained by `keep` are dropped as soon as their consumers ran.
pub fn run_reference_observed<T: Scalar>(
    g: &Graph<T>,
    input: &FloatTensor<T>,
    keep: &Keep,
    observe: &mut dyn FnMut(&str, &[T]),
) -> Result<ReferenceTrace<T>, EngineError> {
    if g.stage() == Stage::Lowered {
        return Err(EngineError::Stage { want: "float or quantized", got: g.stage() });
    }
    let in_shape = g.input_shape();
    let want = vec![in_shape.channels, in_shape.height, in_shape.width];
    if input.dims() != want.as_slice() {
        return Err(EngineError::InputShape { want, got: input.dims().to_vec() });
    }
    let mut pending: HashMap<&str, usize> = g.consumers().into_iter().map(|(k, v)| (k, v.len())).collect();
    let mut live: HashMap<String, Vec<T>> = HashMap::new();
    let mut kept = BTreeMap::new();
    let mut order = Vec::with_capacity(g.nodes.len());
    let output_id = g.output_node().id.clone();

    for node in &g.nodes {
        let arg = |i: usize| -> &Vec<T> { &live[&node.inputs[i]] };
        let value: Vec<T> = match &node.kind {
            NodeKind::Input { quant } => {
                let mut v = input.data().to_vec();
                if let Some(s) = quant.scale {
                    fake_quant(&mut v, s, quant.bits, quant.signed);
                }
                v
            }
            NodeKind::Conv2d(a) | NodeKind::DepthwiseConv2d(a) | NodeKind::PointwiseConv2d(a) => {
                let src = g.node(&node.inputs[0]).expect("validated").shape;
                let w = weights(g, &node.id, &a.weight)?;
                let mut y = conv2d(arg(0), src, &w, a, node.kind.is_depthwise(), node.shape);
                if let Some(aff) = &a.affine {
                    let ab = float_params(g, &node.id, aff)?;
                    let (c, px) = (a.out_channels, node.shape.pixels());
                    for (i, v) in y.iter_mut().enumerate() {
                        let ch = i / px;
                        *v = ab[ch] * *v + ab[c + ch];
                    }
                }
                y
            }
            NodeKind::BatchNorm { params, eps } => {
                let p = float_params(g, &node.id, params)?;
                let (c, px) = (node.shape.channels, node.shape.pixels());
                arg(0)
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let ch = i / px;
                        p[ch] * (x - p[2 * c + ch]) / (p[3 * c + ch] + *eps).sqrt() + p[c + ch]
                    })
                    .collect()
            }
            NodeKind::ActivationQuant(q) => {
                let mut v = arg(0).clone();
                match q.scale {
                    Some(s) => fake_quant(&mut v, s, q.bits, q.signed),
                    None if !q.signed => v.iter_mut().for_each(|x| *x = x.max(T::zero())),
                    None => {}
                }
                v
            }
            NodeKind::ResidualAdd => arg(0).iter().zip(arg(1)).map(|(&a, &b)| a + b).collect(),
            NodeKind::Output => arg(0).clone(),
            other => return Err(EngineError::Unsupported { node: node.id.clone(), kind: other.name() }),
        };
        observe(&node.id, &value);
        for i in &node.inputs {
            let left = pending.get_mut(i.as_str()).expect("producer has consumers");
            *left -= 1;
            if *left == 0 {
                live.remove(i);
            }
        }
        if keep.wants(&node.id) || node.id == output_id {
            let dims = vec![node.shape.channels, node.shape.height, node.shape.width];
            kept.insert(node.id.clone(), FloatTensor::new(dims, value.clone()).expect("finite activations"));
        }
        if pending.get(node.id.as_str()).copied().unwrap_or(0) > 0 {
            live.insert(node.id.clone(), value);
        }
        order.push(node.id.clone());
    }
    Ok(ReferenceTrace { order, outputs: kept, output_id })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ConvKind, GraphBuilder};

    #[test]
    fn identity_pointwise_conv() {
        let mut b = GraphBuilder::<f64>::new(0);
        let x = b.input("input", Shape::new(2, 3, 3), 8).unwrap();
        let w = FloatTensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = b.conv_with_weights("c", ConvKind::Pointwise, &x, w, 1).unwrap();
        b.output("output", &c).unwrap();
        let g = b.finish().unwrap();
        let data: Vec<f64> = (0..18).map(|i| i as f64 * 0.25 - 1.0).collect();
        let x = FloatTensor::new(vec![2, 3, 3], data.clone()).unwrap();
        let t = run_reference(&g, &x).unwrap();
        assert_eq!(t.output().data(), data.as_slice());
    }

    #[test]
    fn delta_kernel_keeps_ramp() {
        let mut b = GraphBuilder::<f64>::new(0);
        let x = b.input("input", Shape::new(1, 4, 4), 8).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let c = b
            .conv_with_weights("c", ConvKind::Standard, &x, FloatTensor::new(vec![1, 1, 3, 3], k).unwrap(), 1)
            .unwrap();
        b.output("output", &c).unwrap();
        let g = b.finish().unwrap();
        let ramp: Vec<f64> = (0..16).map(f64::from).collect();
        let t = run_reference(&g, &FloatTensor::new(vec![1, 4, 4], ramp.clone()).unwrap()).unwrap();
        assert_eq!(t.output().data(), ramp.as_slice());
    }

    #[test]
    fn keep_nothing_retains_output_only() {
        let g = crate::graph::build_backbone::<f64>(32).unwrap();
        let x = FloatTensor::new(vec![3, 32, 32], vec![0.5; 3 * 32 * 32]).unwrap();
        let mut seen = 0;
        let t = run_reference_observed(&g, &x, &Keep::Nothing, &mut |_, _| seen += 1).unwrap();
        assert_eq!(t.outputs.len(), 1);
        assert_eq!(seen, g.nodes.len());
        assert_eq!(t.output().dims(), &[1280, 1, 1]);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let g = crate::graph::build_backbone::<f64>(32).unwrap();
        let x = FloatTensor::zeros(vec![3, 16, 16]);
        assert!(matches!(run_reference(&g, &x), Err(EngineError::InputShape { .. })));
    }
}
