//! Deterministic synthetic data: calibration/evaluation images and random
//! bit-width plans for property tests.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataflow::{divisors, Fold, FoldingPlan};
use crate::graph::{build_network, random_network_spec, Graph, GraphError, NodeKind, Shape};
use crate::lowering::{lower, LowerError};
use crate::quantize::{calibrate, quantize_graph, BitWidthPlan, QuantizeError};
use crate::scalar::Scalar;
use crate::tensor::FloatTensor;

/// Smooth image in `[0, 1]`: a few random plane waves per channel plus mild
/// pixel noise. Same shape and seed give the same image.
pub fn synthetic_image<T: Scalar>(shape: Shape, seed: u64) -> FloatTensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(shape.numel());
    for _ in 0..shape.channels {
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.2..1.0),
                )
            })
            .collect();
        let norm: f64 = waves.iter().map(|w| w.3).sum();
        for y in 0..shape.height {
            for x in 0..shape.width {
                let s: f64 = waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
                let v = 0.5 + 0.45 * s / norm + rng.random_range(-0.05..0.05);
                data.push(T::lit(v.clamp(0.0, 1.0)));
            }
        }
    }
    FloatTensor::new(vec![shape.channels, shape.height, shape.width], data).expect("finite")
}

pub fn synthetic_images<T: Scalar>(shape: Shape, count: usize, seed: u64) -> Vec<FloatTensor<T>> {
    (0..count as u64).map(|i| synthetic_image(shape, seed.wrapping_mul(1_000_003).wrapping_add(i))).collect()
}

/// Random valid plan: weight bits 1..=8 per layer, activation bits 1..=8 per
/// quantizer (at least 2 when signed), input bits 1..=8.
pub fn random_plan<T: Scalar, R: Rng>(g: &Graph<T>, rng: &mut R) -> BitWidthPlan {
    let weight_bits = g.conv_layers().iter().map(|n| (n.id.clone(), rng.random_range(1..=8u8))).collect();
    let mut act_overrides = BTreeMap::new();
    for n in &g.nodes {
        if let NodeKind::ActivationQuant(q) = &n.kind {
            let lo = if q.signed { 2 } else { 1 };
            act_overrides.insert(n.id.clone(), rng.random_range(lo..=8u8));
        }
    }
    BitWidthPlan { weight_bits, act_bits: 8, act_overrides, input_bits: rng.random_range(1..=8) }
}

/// A random network at every stage of the flow.
#[derive(Clone, Debug)]
pub struct RandomModel<T> {
    pub float: Graph<T>,
    pub quantized: Graph<T>,
    pub lowered: Graph<T>,
    pub plan: BitWidthPlan,
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
    #[error(transparent)]
    Lower(#[from] LowerError),
}

/// Random network (at most `max_blocks` blocks and `max_channels` channels),
/// calibrated on two synthetic images, quantized with a random plan and
/// lowered. Fully determined by `seed`.
pub fn random_model<T: Scalar>(seed: u64, max_blocks: usize, max_channels: usize) -> Result<RandomModel<T>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = random_network_spec(&mut rng, max_blocks, max_channels);
    let float: Graph<T> = build_network(&spec, seed, 0.25)?;
    let cal = calibrate(&float, &synthetic_images(spec.input, 2, seed))?;
    let plan = random_plan(&float, &mut rng);
    let quantized = quantize_graph(&float, &plan, &cal)?;
    let lowered = lower(&quantized)?;
    Ok(RandomModel { float, quantized, lowered, plan })
}

/// Random valid folding: uniformly chosen PE and SIMD divisors per node.
pub fn random_folding<T: Scalar, R: Rng>(g: &Graph<T>, rng: &mut R, clock_mhz: f64) -> FoldingPlan {
    let mut plan = FoldingPlan::unfolded(clock_mhz);
    for n in &g.nodes {
        let (pe_n, simd_n) = match &n.kind {
            NodeKind::Matvec(m) => (m.out_channels, m.fold_in),
            NodeKind::Im2col(a) => (1, a.patch_len()),
            NodeKind::Multithreshold(_) | NodeKind::ResidualAdd => (n.shape.channels, 1),
            _ => continue,
        };
        let pick = |rng: &mut R, n: usize| {
            let d = divisors(n);
            d[rng.random_range(0..d.len())]
        };
        let f = Fold { pe: pick(rng, pe_n), simd: pick(rng, simd_n) };
        plan.nodes.insert(n.id.clone(), f);
    }
    plan
}
