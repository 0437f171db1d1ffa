//! Layer-wise weight sensitivity sweep and the rule that turns it into a
//! mixed-precision plan.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::quantize::BitWidthPlan;

use crate::engine::{run_reference_with, EngineError, Keep};
use crate::graph::{count_macs, count_params, Graph, NodeKind};
use crate::pose::{esa_score, OrientationBins, PoseEstimate, PoseSample};
use crate::quantize::{calibrate, quantize_graph, Calibration, QuantizeError};
use crate::scalar::Scalar;
use crate::tensor::FloatTensor;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("evaluation set is empty")]
    EmptyEvalset,
    #[error("incomplete sensitivity records: {0}")]
    Incomplete(String),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error("baseline evaluation failed: {0}")]
    Baseline(String),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("sweep csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Outcome of quantizing one layer to the probe width while everything else
/// stays at the base width. `degradation = binarized - baseline`; a failed
/// evaluation leaves `binarized` and `degradation` NaN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub layer_index: usize,
    pub layer_id: String,
    pub params: usize,
    pub macs: usize,
    pub baseline: f64,
    pub binarized: f64,
    pub degradation: f64,
    #[serde(skip)]
    pub failure: Option<String>,
}

/// Scores the outputs of a quantized model against the float model's
/// outputs on the same images. Lower is better.
pub trait SweepMetric<T>: Sync {
    fn score(&self, outputs: &[FloatTensor<T>], reference: &[FloatTensor<T>]) -> Result<f64, String>;
}

/// Mean squared error against the float outputs, averaged over images.
pub struct OutputMse;

impl<T: Scalar> SweepMetric<T> for OutputMse {
    fn score(&self, outputs: &[FloatTensor<T>], reference: &[FloatTensor<T>]) -> Result<f64, String> {
        let mut total = 0.0;
        for (o, r) in outputs.iter().zip(reference) {
            if o.dims() != r.dims() {
                return Err(format!("output shape {:?} differs from reference {:?}", o.dims(), r.dims()));
            }
            let se: f64 = o.data().iter().zip(r.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
            total += se / o.len().max(1) as f64;
        }
        let v = total / outputs.len().max(1) as f64;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("non-finite output".into())
        }
    }
}

/// ESA score of decoded poses against labels, one label per image.
pub struct PoseEsa<T, F> {
    pub labels: Vec<PoseSample<T>>,
    pub decode: F,
}

impl<T, F> SweepMetric<T> for PoseEsa<T, F>
where
    T: Scalar,
    F: Fn(&FloatTensor<T>) -> Result<PoseEstimate<T>, String> + Sync,
{
    fn score(&self, outputs: &[FloatTensor<T>], _reference: &[FloatTensor<T>]) -> Result<f64, String> {
        if outputs.len() != self.labels.len() {
            return Err(format!("{} outputs for {} labels", outputs.len(), self.labels.len()));
        }
        let pairs = outputs
            .iter()
            .zip(&self.labels)
            .map(|(o, l)| Ok((*l, (self.decode)(o)?)))
            .collect::<Result<Vec<_>, String>>()?;
        esa_score(&pairs).map(|m| m.esa.as_f64()).map_err(|e| e.to_string())
    }
}

/// Toy pose head over a feature map: global average pooling, the first
/// `bins.len()` channels are orientation logits and the next three a
/// translation offset from `(0, 0, z0)`.
#[derive(Clone, Debug)]
pub struct PoseHead<T> {
    pub bins: Vec<crate::pose::Quaternion<T>>,
    pub z0: T,
}

impl<T: Scalar> PoseHead<T> {
    pub fn decode(&self, out: &FloatTensor<T>) -> Result<PoseEstimate<T>, String> {
        let c = out.dims().first().copied().unwrap_or(0);
        let nb = self.bins.len();
        if c < nb + 3 {
            return Err(format!("pose head needs {} channels, output has {c}", nb + 3));
        }
        let px = out.len() / c;
        let pooled: Vec<T> = out.data().chunks(px).map(|ch| ch.iter().copied().sum::<T>() / T::from_int(px as i64)).collect();
        let bins = OrientationBins::from_logits(self.bins.clone(), &pooled[..nb]).map_err(|e| e.to_string())?;
        let q = crate::pose::decode_orientation(&bins).q;
        Ok(PoseEstimate { q, t: [pooled[nb], pooled[nb + 1], self.z0 + pooled[nb + 2]] })
    }
}

/// What a sweep perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepTarget {
    /// Conv weights, one layer at a time.
    Weights,
    /// Activation quantizers, one at a time.
    Activations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub base_bits: u8,
    pub act_bits: u8,
    pub probe_bits: u8,
    pub target: SweepTarget,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { base_bits: 8, act_bits: 8, probe_bits: 1, target: SweepTarget::Weights }
    }
}

fn evaluate<T: Scalar>(
    g: &Graph<T>,
    plan: &BitWidthPlan,
    calib: &Calibration<T>,
    evalset: &[FloatTensor<T>],
    reference: &[FloatTensor<T>],
    metric: &dyn SweepMetric<T>,
) -> Result<f64, String> {
    let q = quantize_graph(g, plan, calib).map_err(|e| e.to_string())?;
    let outs = evalset
        .iter()
        .map(|x| run_reference_with(&q, x, &Keep::Nothing).map(|t| t.output().clone()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    metric.score(&outs, reference)
}

/// Quantizes every layer (or activation) in turn to `probe_bits`, keeping the
/// rest at `base_bits`, and scores each variant with the reference engine.
/// Activation scales come from one calibration pass over the evaluation set.
/// Records come back in layer order; failed evaluations are flagged.
pub fn sensitivity_sweep<T: Scalar>(
    g: &Graph<T>,
    evalset: &[FloatTensor<T>],
    metric: &dyn SweepMetric<T>,
    cfg: &SweepConfig,
) -> Result<Vec<SensitivityRecord>, SweepError> {
    if evalset.is_empty() {
        return Err(SweepError::EmptyEvalset);
    }
    let calib = calibrate(g, evalset)?;
    let reference = evalset
        .iter()
        .map(|x| run_reference_with(g, x, &Keep::Nothing).map(|t| t.output().clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let base = BitWidthPlan::uniform(g, cfg.base_bits, cfg.act_bits);
    base.validate(g)?;
    let baseline = evaluate(g, &base, &calib, evalset, &reference, metric).map_err(SweepError::Baseline)?;
    let params = count_params(g);
    let macs = count_macs(g);
    let targets: Vec<String> = match cfg.target {
        SweepTarget::Weights => g.conv_layers().iter().map(|n| n.id.clone()).collect(),
        SweepTarget::Activations => g
            .nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::ActivationQuant(_)))
            .map(|n| n.id.clone())
            .collect(),
    };
    let records = targets
        .par_iter()
        .enumerate()
        .map(|(i, id)| {
            let mut plan = base.clone();
            match cfg.target {
                SweepTarget::Weights => {
                    plan.weight_bits.insert(id.clone(), cfg.probe_bits);
                }
                SweepTarget::Activations => {
                    plan.act_overrides.insert(id.clone(), cfg.probe_bits);
                }
            }
            let (binarized, failure) = match evaluate(g, &plan, &calib, evalset, &reference, metric) {
                Ok(v) => (v, None),
                Err(e) => (f64::NAN, Some(e)),
            };
            SensitivityRecord {
                layer_index: i,
                layer_id: id.clone(),
                params: params.get(id).copied().unwrap_or(0),
                macs: macs.get(id).copied().unwrap_or(0),
                baseline,
                binarized,
                degradation: binarized - baseline,
                failure,
            }
        })
        .collect();
    Ok(records)
}

/// Writes `sweep.csv`.
pub fn write_sweep_csv<W: Write>(w: W, records: &[SensitivityRecord]) -> Result<(), SweepError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r)?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_sweep_csv<R: std::io::Read>(r: R) -> Result<Vec<SensitivityRecord>, SweepError> {
    Ok(csv::Reader::from_reader(r).deserialize().collect::<Result<_, _>>()?)
}

/// Rule turning sensitivities into bit-widths: the `ladder.len()` most
/// degraded layers get `ladder[0]`, `ladder[1]`, ... bits; all others get
/// `base_bits`; every activation gets `act_bits`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionPolicy {
    pub act_bits: u8,
    pub base_bits: u8,
    #[serde(default)]
    pub ladder: Vec<u8>,
}

impl SelectionPolicy {
    /// 4-bit activations, 3-bit weights, and 6/4/4 bits for the three most
    /// sensitive layers.
    pub fn mixed_3_4() -> Self {
        Self { act_bits: 4, base_bits: 3, ladder: vec![6, 4, 4] }
    }

    pub fn uniform(weight_bits: u8, act_bits: u8) -> Self {
        Self { act_bits, base_bits: weight_bits, ladder: vec![] }
    }
}

/// Ranks layers by degradation (largest first, earlier layer on ties) and
/// applies the policy. Independent of record order.
pub fn select_bitwidths(records: &[SensitivityRecord], policy: &SelectionPolicy) -> Result<BitWidthPlan, SweepError> {
    let bad = |b: u8| !(1..=8).contains(&b);
    if bad(policy.act_bits) || bad(policy.base_bits) || policy.ladder.iter().any(|&b| bad(b)) {
        return Err(SweepError::Policy("bit-widths must be in 1..=8".into()));
    }
    if records.is_empty() {
        return Err(SweepError::Incomplete("no records".into()));
    }
    let mut recs: Vec<&SensitivityRecord> = records.iter().collect();
    recs.sort_by_key(|r| r.layer_index);
    let mut seen = HashSet::new();
    for (i, r) in recs.iter().enumerate() {
        if r.layer_index != i {
            return Err(SweepError::Incomplete(format!("layer index {i} missing")));
        }
        if !seen.insert(&r.layer_id) {
            return Err(SweepError::Incomplete(format!("layer `{}` appears twice", r.layer_id)));
        }
        if !r.degradation.is_finite() {
            return Err(SweepError::Incomplete(format!("layer `{}` has no valid score", r.layer_id)));
        }
    }
    if policy.ladder.len() > recs.len() {
        return Err(SweepError::Policy(format!("ladder has {} steps for {} layers", policy.ladder.len(), recs.len())));
    }
    let mut ranked = recs.clone();
    ranked.sort_by(|a, b| b.degradation.total_cmp(&a.degradation).then(a.layer_index.cmp(&b.layer_index)));
    let mut weight_bits: BTreeMap<String, u8> = recs.iter().map(|r| (r.layer_id.clone(), policy.base_bits)).collect();
    for (r, &bits) in ranked.iter().zip(&policy.ladder) {
        weight_bits.insert(r.layer_id.clone(), bits);
    }
    Ok(BitWidthPlan { weight_bits, act_bits: policy.act_bits, act_overrides: BTreeMap::new(), input_bits: 8 })
}
