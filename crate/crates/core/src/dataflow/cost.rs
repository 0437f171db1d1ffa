use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::DataflowError;
use crate::graph::{Graph, LayerNode, NodeKind, Stage};
use crate::lowering::value_range;
use crate::scalar::Scalar;

/// Parallelism of one node: `pe` output lanes, `simd` input lanes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fold {
    pub pe: usize,
    pub simd: usize,
}

impl Fold {
    pub const ONE: Fold = Fold { pe: 1, simd: 1 };

    pub fn new(pe: usize, simd: usize) -> Self {
        Self { pe, simd }
    }
}

/// Per-node folding; nodes without an entry run fully folded (PE = SIMD = 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldingPlan {
    pub clock_mhz: f64,
    pub nodes: BTreeMap<String, Fold>,
}

impl FoldingPlan {
    pub fn unfolded(clock_mhz: f64) -> Self {
        Self { clock_mhz, nodes: BTreeMap::new() }
    }

    pub fn fold(&self, id: &str) -> Fold {
        self.nodes.get(id).copied().unwrap_or(Fold::ONE)
    }
}

/// Calibration constants of the resource model. These are model parameters,
/// not measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    /// LUTs per matvec lane per weight bit per activation bit.
    pub alpha: f64,
    /// LUTs per threshold comparator per accumulator bit.
    pub beta: f64,
    /// Matvec lanes use DSPs once `weight_bits * act_bits` reaches this.
    pub gamma: u32,
    /// LUTs per im2col lane per activation bit.
    pub im2col_lut: f64,
    /// LUTs per residual-add lane per output bit.
    pub add_lut: f64,
    pub ff_per_lut: f64,
    pub bram_bits: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { alpha: 17.0, beta: 8.5, gamma: 32, im2col_lut: 6.0, add_lut: 2.0, ff_per_lut: 1.4, bram_bits: 18_432 }
    }
}

/// Device budget; BRAMs are counted in 18 Kb units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResourceBudget {
    pub luts: u64,
    pub brams: u64,
    pub dsps: u64,
    pub ffs: u64,
}

impl Default for ResourceBudget {
    /// ZCU104-class device: 230,400 LUTs, 312 BRAM36 (624 BRAM18), 1,728 DSPs.
    fn default() -> Self {
        Self { luts: 230_400, brams: 624, dsps: 1_728, ffs: 460_800 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeResources {
    pub luts: u64,
    pub brams: u64,
    pub dsps: u64,
    pub ffs: u64,
}

impl NodeResources {
    fn add(&mut self, o: &NodeResources) {
        self.luts += o.luts;
        self.brams += o.brams;
        self.dsps += o.dsps;
        self.ffs += o.ffs;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceEstimate {
    pub luts: u64,
    pub brams: u64,
    pub dsps: u64,
    pub ffs: u64,
    pub nodes: BTreeMap<String, NodeResources>,
    /// FIFO BRAMs keyed by edge (`from->to`).
    pub fifos: BTreeMap<String, u64>,
}

impl ResourceEstimate {
    pub fn utilization(&self, budget: &ResourceBudget) -> BTreeMap<&'static str, f64> {
        let pct = |used: u64, have: u64| if have == 0 { 0.0 } else { 100.0 * used as f64 / have as f64 };
        BTreeMap::from([
            ("luts", pct(self.luts, budget.luts)),
            ("brams", pct(self.brams, budget.brams)),
            ("dsps", pct(self.dsps, budget.dsps)),
            ("ffs", pct(self.ffs, budget.ffs)),
        ])
    }
}

/// Smallest two's-complement (or unsigned, when `lo >= 0`) width holding
/// every value in `[lo, hi]`.
pub fn bits_for_range(lo: i64, hi: i64) -> u32 {
    if lo >= 0 {
        (64 - (hi.max(1) as u64).leading_zeros()).max(1)
    } else {
        let need_neg = 64 - ((-(lo + 1)) as u64).leading_zeros() + 1;
        let need_pos = if hi > 0 { 64 - (hi as u64).leading_zeros() + 1 } else { 1 };
        need_neg.max(need_pos)
    }
}

fn divides(d: usize, n: usize) -> bool {
    d >= 1 && n % d == 0
}

pub fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// Which lanes a node folds over: `(pe_extent, simd_extent)`; 1 means the
/// dimension is fixed at 1.
pub(crate) fn fold_extents<T>(node: &LayerNode<T>) -> Option<(usize, usize)> {
    match &node.kind {
        NodeKind::Matvec(m) => Some((m.out_channels, m.fold_in)),
        NodeKind::Im2col(a) => Some((1, a.patch_len())),
        NodeKind::Multithreshold(_) | NodeKind::ResidualAdd => Some((node.shape.channels, 1)),
        _ => None,
    }
}

/// Cycles a node needs per frame under a fold.
///
/// matvec: `(fold_in/SIMD) * (out/PE) * pixels`; im2col: `pixels * patch/SIMD`;
/// multithreshold and add: `pixels * (C/PE)`; input and output stream one
/// pixel per cycle.
pub fn node_cycles<T>(node: &LayerNode<T>, fold: Fold) -> Result<u64, DataflowError> {
    let px = node.shape.pixels() as u64;
    let Some((pe_n, simd_n)) = fold_extents(node) else {
        return Ok(px);
    };
    if !divides(fold.pe, pe_n) || !divides(fold.simd, simd_n) {
        return Err(DataflowError::Fold {
            node: node.id.clone(),
            detail: format!("PE {} must divide {pe_n} and SIMD {} must divide {simd_n}", fold.pe, fold.simd),
        });
    }
    Ok((simd_n / fold.simd) as u64 * (pe_n / fold.pe) as u64 * px)
}

/// Bit-widths the cost model needs for one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeBits {
    pub weight: u32,
    pub input: u32,
    pub output: u32,
    pub acc: u32,
}

pub(crate) fn node_bits<T: Scalar>(g: &Graph<T>, node: &LayerNode<T>) -> Result<NodeBits, DataflowError> {
    let range_bits = |id: &str| -> Result<u32, DataflowError> {
        let (lo, hi) = value_range(g, id)?;
        Ok(bits_for_range(lo, hi))
    };
    let output = range_bits(&node.id)?;
    let input = match node.inputs.first() {
        Some(i) => range_bits(i)?,
        None => output,
    };
    let weight = match &node.kind {
        NodeKind::Matvec(m) => m.weight_bits as u32,
        _ => 0,
    };
    Ok(NodeBits { weight, input, output, acc: input })
}

fn node_cost<T: Scalar>(
    g: &Graph<T>,
    node: &LayerNode<T>,
    fold: Fold,
    model: &CostModel,
) -> Result<NodeResources, DataflowError> {
    let b = node_bits(g, node)?;
    let ceil_div = |a: u64, d: u64| a.div_ceil(d);
    let mut r = NodeResources::default();
    match &node.kind {
        NodeKind::Matvec(m) => {
            let lanes = (fold.pe * fold.simd) as u64;
            r.luts = (model.alpha * lanes as f64 * b.weight as f64 * b.input as f64).ceil() as u64;
            r.brams = ceil_div(m.out_channels as u64 * m.fold_in as u64 * b.weight as u64, model.bram_bits);
            if b.weight * b.input >= model.gamma {
                r.dsps = lanes;
            }
        }
        NodeKind::Multithreshold(t) => {
            let levels = (1u64 << t.out_bits) - 1;
            r.luts = (model.beta * fold.pe as f64 * levels as f64 * b.acc as f64).ceil() as u64;
        }
        NodeKind::Im2col(_) => {
            r.luts = (model.im2col_lut * fold.simd as f64 * b.input as f64).ceil() as u64;
        }
        NodeKind::ResidualAdd => {
            r.luts = (model.add_lut * fold.pe as f64 * b.output as f64).ceil() as u64;
        }
        _ => {}
    }
    r.ffs = (r.luts as f64 * model.ff_per_lut).ceil() as u64;
    Ok(r)
}

/// FIFO storage in BRAMs: `ceil(depth * width_bits / bram_bits)`.
pub fn fifo_brams(depth: usize, width_bits: u64, model: &CostModel) -> u64 {
    (depth as u64 * width_bits).div_ceil(model.bram_bits)
}

/// Parametric LUT/BRAM/DSP/FF estimate of a lowered graph under a folding
/// plan and FIFO depths (edge `from->to` to depth; missing edges cost
/// nothing).
pub fn estimate_resources<T: Scalar>(
    g: &Graph<T>,
    plan: &FoldingPlan,
    fifo_depths: &BTreeMap<String, usize>,
    model: &CostModel,
) -> Result<ResourceEstimate, DataflowError> {
    if g.stage() != Stage::Lowered {
        return Err(DataflowError::Invalid(format!("resource estimation needs a lowered graph, got {:?}", g.stage())));
    }
    let mut est = ResourceEstimate::default();
    let mut total = NodeResources::default();
    for n in &g.nodes {
        let fold = plan.fold(&n.id);
        node_cycles(n, fold)?;
        let r = node_cost(g, n, fold, model)?;
        total.add(&r);
        est.nodes.insert(n.id.clone(), r);
    }
    for n in &g.nodes {
        for i in &n.inputs {
            let key = super::edge_key(i, &n.id);
            let Some(&depth) = fifo_depths.get(&key) else { continue };
            let p = g.node(i).expect("validated");
            let width = p.shape.channels as u64 * node_bits(g, p)?.output as u64;
            let b = fifo_brams(depth, width, model);
            total.brams += b;
            est.fifos.insert(key, b);
        }
    }
    est.luts = total.luts;
    est.brams = total.brams;
    est.dsps = total.dsps;
    est.ffs = total.ffs;
    Ok(est)
}

/// Candidate folds of a node ordered by preference: fewest lanes first, then
/// fewer PEs.
fn candidates<T>(node: &LayerNode<T>) -> Vec<Fold> {
    let Some((pe_n, simd_n)) = fold_extents(node) else {
        return vec![Fold::ONE];
    };
    let mut v: Vec<Fold> = divisors(pe_n)
        .into_iter()
        .flat_map(|pe| divisors(simd_n).into_iter().map(move |simd| Fold { pe, simd }))
        .collect();
    v.sort_by_key(|f| (f.pe * f.simd, f.pe));
    v
}

/// Ordering key of a feasible fold: LUTs, then lanes, then PE.
fn fold_key<T: Scalar>(g: &Graph<T>, node: &LayerNode<T>, f: Fold, model: &CostModel) -> Result<(u64, usize, usize), DataflowError> {
    Ok((node_cost(g, node, f, model)?.luts, f.pe * f.simd, f.pe))
}

/// Chooses, per node, the cheapest fold over its divisor lattice whose
/// cycles fit the latency budget. The LUT model is separable across nodes,
/// so per-node minima form a globally LUT-minimal plan.
pub fn fold_graph<T: Scalar>(
    g: &Graph<T>,
    latency_budget_cycles: u64,
    budget: &ResourceBudget,
    model: &CostModel,
    clock_mhz: f64,
) -> Result<FoldingPlan, DataflowError> {
    if g.stage() != Stage::Lowered {
        return Err(DataflowError::Invalid(format!("folding needs a lowered graph, got {:?}", g.stage())));
    }
    let mut plan = FoldingPlan::unfolded(clock_mhz);
    for n in &g.nodes {
        if fold_extents(n).is_none() {
            let c = node_cycles(n, Fold::ONE)?;
            if c > latency_budget_cycles {
                return Err(DataflowError::LatencyInfeasible { node: n.id.clone(), min_cycles: c, budget: latency_budget_cycles });
            }
            continue;
        }
        let mut best: Option<((u64, usize, usize), Fold)> = None;
        let mut min_cycles = u64::MAX;
        for f in candidates(n) {
            let c = node_cycles(n, f)?;
            min_cycles = min_cycles.min(c);
            if c <= latency_budget_cycles {
                let key = fold_key(g, n, f, model)?;
                if best.is_none_or(|(k, _)| key < k) {
                    best = Some((key, f));
                }
            }
        }
        let Some((_, f)) = best else {
            return Err(DataflowError::LatencyInfeasible { node: n.id.clone(), min_cycles, budget: latency_budget_cycles });
        };
        if f != Fold::ONE {
            plan.nodes.insert(n.id.clone(), f);
        }
    }
    let est = estimate_resources(g, &plan, &BTreeMap::new(), model)?;
    for (resource, need, have) in [("LUT", est.luts, budget.luts), ("BRAM", est.brams, budget.brams), ("DSP", est.dsps, budget.dsps)] {
        if need > have {
            return Err(DataflowError::ResourcesExceeded { resource, need, budget: have });
        }
    }
    Ok(plan)
}

/// Exhaustive search over the joint divisor lattice, for cross-checking
/// `fold_graph` on small graphs. Returns the plan minimizing total LUTs, ties
/// broken by the per-node (lanes, PE) sequence.
pub fn fold_graph_brute_force<T: Scalar>(
    g: &Graph<T>,
    latency_budget_cycles: u64,
    model: &CostModel,
    clock_mhz: f64,
) -> Result<Option<FoldingPlan>, DataflowError> {
    let folded: Vec<&LayerNode<T>> = g.nodes.iter().filter(|n| fold_extents(n).is_some()).collect();
    let options: Vec<Vec<(Fold, u64, (usize, usize))>> = folded
        .iter()
        .map(|n| {
            candidates(n)
                .into_iter()
                .filter(|f| node_cycles(n, *f).is_ok_and(|c| c <= latency_budget_cycles))
                .map(|f| Ok((f, node_cost(g, n, f, model)?.luts, (f.pe * f.simd, f.pe))))
                .collect::<Result<Vec<_>, DataflowError>>()
        })
        .collect::<Result<_, _>>()?;
    if options.iter().any(Vec::is_empty) {
        return Ok(None);
    }
    let mut idx = vec![0usize; options.len()];
    let mut best: Option<(u64, Vec<(usize, usize)>, Vec<Fold>)> = None;
    loop {
        let luts: u64 = idx.iter().zip(&options).map(|(&i, o)| o[i].1).sum();
        let ties: Vec<(usize, usize)> = idx.iter().zip(&options).map(|(&i, o)| o[i].2).collect();
        if best.as_ref().is_none_or(|(l, t, _)| (luts, &ties) < (*l, t)) {
            best = Some((luts, ties, idx.iter().zip(&options).map(|(&i, o)| o[i].0).collect()));
        }
        let mut k = 0;
        loop {
            if k == idx.len() {
                let (_, _, folds) = best.expect("at least one plan");
                let mut plan = FoldingPlan::unfolded(clock_mhz);
                for (n, f) in folded.iter().zip(folds) {
                    if f != Fold::ONE {
                        plan.nodes.insert(n.id.clone(), f);
                    }
                }
                return Ok(Some(plan));
            }
            idx[k] += 1;
            if idx[k] < options[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}
