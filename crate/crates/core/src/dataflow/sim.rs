use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use super::pipeline::{edge_key, need_table, Pipeline};
use super::{energy_metrics, DataflowError};

/// FIFO depth per edge (`from->to`), in tokens (one pixel vector each).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FifoConfig {
    pub depths: BTreeMap<String, usize>,
}

/// Named FIFO sizing rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FifoPreset {
    /// One full producer tensor per edge.
    Deep,
    /// `max(2, one producer output row)`, grown where that deadlocks.
    Default,
    /// Smallest depths that do not deadlock, starting from 1.
    Starved,
}

impl FifoConfig {
    pub fn uniform(p: &Pipeline, depth: usize) -> Self {
        Self { depths: p.edge_keys().into_iter().map(|k| (k, depth)).collect() }
    }

    pub fn deep(p: &Pipeline) -> Self {
        Self::sized(p, |s| s.tokens)
    }

    fn sized(p: &Pipeline, f: impl Fn(&super::PipelineStage) -> usize) -> Self {
        let depths = p
            .edges()
            .into_iter()
            .map(|(a, b, _)| (edge_key(&p.stages[a].id, &p.stages[b].id), f(&p.stages[a])))
            .collect();
        Self { depths }
    }

    pub fn preset(p: &Pipeline, preset: FifoPreset) -> Result<Self, DataflowError> {
        match preset {
            FifoPreset::Deep => Ok(Self::deep(p)),
            FifoPreset::Default => {
                let cfg = Self::sized(p, |s| s.row_tokens.max(2));
                Ok(repair_deadlocks(p, cfg, false)?.0)
            }
            FifoPreset::Starved => Ok(repair_deadlocks(p, Self::uniform(p, 1), true)?.0),
        }
    }

    pub fn validate(&self, p: &Pipeline) -> Result<(), DataflowError> {
        for k in p.edge_keys() {
            match self.depths.get(&k) {
                None => return Err(DataflowError::Invalid(format!("no FIFO depth for edge `{k}`"))),
                Some(0) => return Err(DataflowError::Invalid(format!("FIFO `{k}` has depth 0"))),
                _ => {}
            }
        }
        if let Some(k) = self.depths.keys().find(|k| !p.edge_keys().contains(k)) {
            return Err(DataflowError::UnknownEdge(k.clone()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub clock_mhz: f64,
    pub frames: usize,
    pub warmup_frames: usize,
    /// Whether per-frame completion intervals settled into a periodic pattern.
    pub converged: bool,
    pub steady_state_fps: f64,
    /// Measured cycles between consecutive frames in steady state.
    pub cycles_per_frame: f64,
    pub closed_form_fps: f64,
    pub bottleneck_node: String,
    pub bottleneck_cycles: u64,
    /// Completion cycle of the first frame.
    pub first_frame_latency: u64,
    /// Latency in units of the bottleneck interval, rounded up.
    pub pipeline_depth: usize,
    /// Cycles each node spent waiting for input or blocked on a full output.
    pub stall_cycles: BTreeMap<String, u64>,
    pub frame_done: Vec<u64>,
    /// Tokens each node emitted over the whole run.
    pub produced: BTreeMap<String, u64>,
    /// Tokens each consumer pulled from each FIFO over the whole run.
    pub consumed: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_watts: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps_per_watt: Option<f64>,
}

impl SimReport {
    pub fn with_power(mut self, watts: f64) -> Result<Self, DataflowError> {
        self.fps_per_watt = Some(energy_metrics(self.steady_state_fps, watts)?);
        self.power_watts = Some(watts);
        Ok(self)
    }
}

struct Edge {
    from: usize,
    to: usize,
    depth: usize,
    count: usize,
}

#[derive(Default)]
struct StageState {
    busy: bool,
    pending: bool,
    started: u64,
    pushed: u64,
    consumed: Vec<u64>,
    free_since: u64,
    blocked_since: u64,
    stall: u64,
}

/// Raw outcome of one run: completion cycle of every frame plus stalls.
pub(crate) struct RawRun {
    pub frame_done: Vec<u64>,
    pub stall: Vec<u64>,
    pub produced: Vec<u64>,
    pub consumed: Vec<Vec<u64>>,
}

struct Sim<'a> {
    p: &'a Pipeline,
    needs: Vec<Vec<Vec<usize>>>,
    edges: Vec<Edge>,
    in_edges: Vec<Vec<usize>>,
    out_edges: Vec<Vec<usize>>,
    st: Vec<StageState>,
    total: Vec<u64>,
    heap: BinaryHeap<Reverse<(u64, usize)>>,
    work: VecDeque<usize>,
    queued: Vec<bool>,
    frame_done: Vec<u64>,
}

impl<'a> Sim<'a> {
    fn new(p: &'a Pipeline, fifos: &FifoConfig, frames: usize) -> Self {
        let n = p.stages.len();
        let mut edges = Vec::new();
        let mut in_edges = vec![Vec::new(); n];
        let mut out_edges = vec![Vec::new(); n];
        for (from, to, _) in p.edges() {
            let depth = fifos.depths[&edge_key(&p.stages[from].id, &p.stages[to].id)];
            in_edges[to].push(edges.len());
            out_edges[from].push(edges.len());
            edges.push(Edge { from, to, depth, count: 0 });
        }
        let needs = p
            .stages
            .iter()
            .map(|s| s.inputs.iter().map(|i| need_table(&i.window, p.stages[i.from].tokens, s.tokens)).collect())
            .collect();
        let st = p
            .stages
            .iter()
            .map(|s| StageState { consumed: vec![0; s.inputs.len()], ..Default::default() })
            .collect();
        Sim {
            p,
            needs,
            edges,
            in_edges,
            out_edges,
            st,
            total: p.stages.iter().map(|s| s.tokens as u64 * frames as u64).collect(),
            heap: BinaryHeap::new(),
            work: VecDeque::new(),
            queued: vec![false; n],
            frame_done: Vec::with_capacity(frames),
        }
    }

    fn wake(&mut self, s: usize) {
        if !self.queued[s] {
            self.queued[s] = true;
            self.work.push_back(s);
        }
    }

    /// Input tokens on `slot` needed before output `g` of stage `s` may start.
    fn need(&self, s: usize, slot: usize, g: u64) -> u64 {
        let n = self.p.stages[s].tokens as u64;
        let src = self.p.stages[self.p.stages[s].inputs[slot].from].tokens as u64;
        (g / n) * src + self.needs[s][slot][(g % n) as usize] as u64
    }

    /// Service time of output `g`: frame cycles spread uniformly over outputs.
    fn service(&self, s: usize, g: u64) -> u64 {
        let st = &self.p.stages[s];
        let (c, n, k) = (st.cycles as u128, st.tokens as u128, (g % st.tokens as u64) as u128);
        (((k + 1) * c) / n - (k * c) / n) as u64
    }

    fn progress(&mut self, s: usize, t: u64) {
        loop {
            let mut changed = false;
            if self.st[s].pending && self.out_edges[s].iter().all(|&e| self.edges[e].count < self.edges[e].depth) {
                for i in 0..self.out_edges[s].len() {
                    let e = self.out_edges[s][i];
                    self.edges[e].count += 1;
                    let to = self.edges[e].to;
                    self.wake(to);
                }
                let st = &mut self.st[s];
                st.pending = false;
                st.pushed += 1;
                st.stall += t - st.blocked_since;
                st.free_since = t;
                if self.out_edges[s].is_empty() && st.pushed % self.p.stages[s].tokens as u64 == 0 {
                    self.frame_done.push(t);
                }
                changed = true;
            }
            let next = self.st[s].started;
            if next < self.total[s] {
                for slot in 0..self.in_edges[s].len() {
                    let e = self.in_edges[s][slot];
                    let want = self.need(s, slot, next) - self.st[s].consumed[slot];
                    let take = want.min(self.edges[e].count as u64);
                    if take > 0 {
                        self.edges[e].count -= take as usize;
                        self.st[s].consumed[slot] += take;
                        let from = self.edges[e].from;
                        self.wake(from);
                    }
                }
                let ready = (0..self.in_edges[s].len()).all(|slot| self.st[s].consumed[slot] >= self.need(s, slot, next));
                if ready && !self.st[s].busy && !self.st[s].pending {
                    let d = self.service(s, next);
                    let st = &mut self.st[s];
                    st.busy = true;
                    st.started += 1;
                    st.stall += t - st.free_since;
                    self.heap.push(Reverse((t + d, s)));
                    changed = true;
                }
            }
            if !changed {
                return;
            }
        }
    }

    fn drain(&mut self, t: u64) {
        while let Some(s) = self.work.pop_front() {
            self.queued[s] = false;
            self.progress(s, t);
        }
    }

    fn run(mut self) -> Result<RawRun, DataflowError> {
        for s in 0..self.p.stages.len() {
            self.wake(s);
        }
        self.drain(0);
        let mut now = 0;
        while let Some(Reverse((t, s))) = self.heap.pop() {
            now = t;
            let st = &mut self.st[s];
            st.busy = false;
            st.pending = true;
            st.blocked_since = t;
            self.wake(s);
            while let Some(&Reverse((t2, s2))) = self.heap.peek() {
                if t2 != t {
                    break;
                }
                self.heap.pop();
                let st = &mut self.st[s2];
                st.busy = false;
                st.pending = true;
                st.blocked_since = t;
                self.wake(s2);
            }
            self.drain(t);
        }
        let sink = self.p.stages.len() - 1;
        if self.st[sink].pushed < self.total[sink] {
            return Err(self.blame(now));
        }
        Ok(RawRun {
            frame_done: self.frame_done,
            stall: self.st.iter().map(|s| s.stall).collect(),
            produced: self.st.iter().map(|s| s.pushed).collect(),
            consumed: self.st.iter().map(|s| s.consumed.clone()).collect(),
        })
    }

    /// Picks the full FIFO that holds up a consumer starving on another input,
    /// falling back to any full FIFO.
    fn blame(&self, time: u64) -> DataflowError {
        let full = |e: &Edge| e.count >= e.depth;
        let waiting_elsewhere = |e: &Edge| {
            let c = e.to;
            let st = &self.st[c];
            !st.busy
                && !st.pending
                && self.in_edges[c].iter().enumerate().any(|(slot, &o)| {
                    let oe = &self.edges[o];
                    oe.from != e.from && st.consumed[slot] < self.need(c, slot, st.started)
                })
        };
        let pick = self
            .edges
            .iter()
            .find(|e| full(e) && waiting_elsewhere(e))
            .or_else(|| self.edges.iter().find(|e| full(e)))
            .unwrap_or(&self.edges[0]);
        DataflowError::Deadlock {
            edge: edge_key(&self.p.stages[pick.from].id, &self.p.stages[pick.to].id),
            depth: pick.depth,
            cycle: time,
        }
    }
}

pub(crate) fn run_raw(p: &Pipeline, fifos: &FifoConfig, frames: usize) -> Result<RawRun, DataflowError> {
    fifos.validate(p)?;
    if frames == 0 {
        return Err(DataflowError::Invalid("at least one frame is needed".into()));
    }
    Sim::new(p, fifos, frames).run()
}

/// Start frame and period of the periodic tail of the frame-completion
/// intervals, if one spanning at least two periods (and three intervals)
/// exists.
fn periodic_tail(done: &[u64]) -> Option<(usize, usize)> {
    let n = done.len();
    if n < 4 {
        return None;
    }
    let d: Vec<u64> = done.windows(2).map(|w| w[1] - w[0]).collect();
    for p in 1..=d.len() / 3 {
        let last_bad = (p..d.len()).rev().find(|&i| d[i] != d[i - p]);
        let s = last_bad.map_or(0, |i| i + 1 - p);
        let tail = d.len() - s;
        if tail >= 2 * p && tail >= 3 {
            return Some((s, p));
        }
    }
    None
}

const MAX_AUTO_FRAMES: usize = 512;

/// Discrete-event simulation of the pipeline for `frames` frames (or, with
/// `None`, as many as it takes to reach a periodic steady state).
///
/// Each stage emits its outputs at a uniform rate (`cycles / tokens` per
/// token, rounded so every frame sums to exactly `cycles`), pulls input
/// tokens as soon as an upcoming output needs them and blocks while any
/// downstream FIFO is full.
pub fn simulate_pipeline(p: &Pipeline, fifos: &FifoConfig, frames: Option<usize>) -> Result<SimReport, DataflowError> {
    p.validate()?;
    let (_, bottleneck) = p.bottleneck();
    let mut n = frames.unwrap_or(8);
    loop {
        let raw = run_raw(p, fifos, n)?;
        let latency = raw.frame_done[0];
        let depth = latency.div_ceil(bottleneck) as usize;
        let tail = periodic_tail(&raw.frame_done);
        match frames {
            Some(given) if given < 3 * depth => return Err(DataflowError::FramesTooFew { given, need: 3 * depth }),
            None if (n < 3 * depth || tail.is_none()) && n < MAX_AUTO_FRAMES => {
                n = (2 * n).max(3 * depth).min(MAX_AUTO_FRAMES);
                continue;
            }
            _ => {}
        }
        return Ok(report(p, &raw, depth, tail));
    }
}

fn report(p: &Pipeline, raw: &RawRun, depth: usize, tail: Option<(usize, usize)>) -> SimReport {
    let t = &raw.frame_done;
    let n = t.len();
    let clock_hz = p.clock_mhz * 1e6;
    let (warmup, end) = match tail {
        Some((s, per)) => {
            let a = s.max(depth.min(n - 1 - per));
            let a = a.min(n - 1 - per);
            (a, a + (n - 1 - a) / per * per)
        }
        None => (depth.min(n.saturating_sub(2)), n - 1),
    };
    let cycles_per_frame =
        if end > warmup { (t[end] - t[warmup]) as f64 / (end - warmup) as f64 } else { t[n - 1] as f64 / n as f64 };
    let (b, bc) = p.bottleneck();
    SimReport {
        clock_mhz: p.clock_mhz,
        frames: n,
        warmup_frames: warmup,
        converged: tail.is_some(),
        steady_state_fps: clock_hz / cycles_per_frame,
        cycles_per_frame,
        closed_form_fps: p.closed_form_fps(),
        bottleneck_node: p.stages[b].id.clone(),
        bottleneck_cycles: bc,
        first_frame_latency: t[0],
        pipeline_depth: depth,
        stall_cycles: p.stages.iter().zip(&raw.stall).map(|(s, &c)| (s.id.clone(), c)).collect(),
        frame_done: t.clone(),
        produced: p.stages.iter().zip(&raw.produced).map(|(s, &c)| (s.id.clone(), c)).collect(),
        consumed: p
            .edges()
            .into_iter()
            .map(|(a, b, slot)| (edge_key(&p.stages[a].id, &p.stages[b].id), raw.consumed[b][slot]))
            .collect(),
        power_watts: None,
        fps_per_watt: None,
    }
}

const REPAIR_FRAMES: usize = 3;

/// Grows FIFOs blamed for deadlocks (doubling) until a short run completes.
/// With `minimize`, each grown FIFO is then shrunk back to the smallest
/// depth that still completes. Returns the config and the grown edges.
pub fn repair_deadlocks(p: &Pipeline, mut cfg: FifoConfig, minimize: bool) -> Result<(FifoConfig, Vec<String>), DataflowError> {
    let cap: BTreeMap<String, usize> = FifoConfig::deep(p).depths.into_iter().map(|(k, d)| (k, 2 * d)).collect();
    let mut grown: Vec<(String, usize)> = Vec::new();
    loop {
        match run_raw(p, &cfg, REPAIR_FRAMES) {
            Ok(_) => break,
            Err(DataflowError::Deadlock { edge, depth, cycle }) => {
                if depth >= cap[&edge] {
                    return Err(DataflowError::Deadlock { edge, depth, cycle });
                }
                if !grown.iter().any(|(k, _)| *k == edge) {
                    grown.push((edge.clone(), depth));
                }
                cfg.depths.insert(edge.clone(), (depth * 2).min(cap[&edge]));
            }
            Err(e) => return Err(e),
        }
    }
    if minimize {
        for (edge, start) in &grown {
            let (mut lo, mut hi) = (*start, cfg.depths[edge]);
            while lo < hi {
                let mid = lo + (hi - lo) / 2;
                let mut trial = cfg.clone();
                trial.depths.insert(edge.clone(), mid);
                if run_raw(p, &trial, REPAIR_FRAMES).is_ok() {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            cfg.depths.insert(edge.clone(), hi);
        }
    }
    Ok((cfg, grown.into_iter().map(|(k, _)| k).collect()))
}
