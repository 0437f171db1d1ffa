use serde::{Deserialize, Serialize};

use super::cost::{node_bits, node_cycles};
use super::{DataflowError, FoldingPlan};
use crate::graph::{Graph, NodeKind, Stage};
use crate::scalar::Scalar;

/// How many input tokens an output needs before it can start.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Window {
    /// Output `k` needs input tokens `0..=k`.
    Elementwise,
    /// Sliding `kernel`x`kernel` window over a raster-ordered `in_h`x`in_w`
    /// input, producing `out_h`x`out_w` outputs.
    Sliding { in_h: usize, in_w: usize, kernel: usize, stride: usize, padding: usize, out_h: usize, out_w: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageInput {
    /// Index of the producing stage.
    pub from: usize,
    pub window: Window,
}

/// One pipeline stage. A token is one pixel vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineStage {
    pub id: String,
    pub cycles: u64,
    pub tokens: usize,
    /// Tokens in one output row (the default FIFO depth unit).
    pub row_tokens: usize,
    /// Bits of one token on the outgoing stream.
    pub token_bits: u64,
    pub inputs: Vec<StageInput>,
}

/// Stages in topological order; the first stage is the only source and the
/// last one the only sink.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub clock_mhz: f64,
    pub stages: Vec<PipelineStage>,
}

/// Edge identifier used in FIFO configs and reports.
pub fn edge_key(from: &str, to: &str) -> String {
    format!("{from}->{to}")
}

impl Pipeline {
    /// Builds the stage list of a lowered graph under a folding plan.
    pub fn from_graph<T: Scalar>(g: &Graph<T>, plan: &FoldingPlan) -> Result<Self, DataflowError> {
        if g.stage() != Stage::Lowered {
            return Err(DataflowError::Invalid(format!("simulation needs a lowered graph, got {:?}", g.stage())));
        }
        let mut stages = Vec::with_capacity(g.nodes.len());
        for n in &g.nodes {
            let cycles = node_cycles(n, plan.fold(&n.id))?;
            let token_bits = n.shape.channels as u64 * node_bits(g, n)?.output as u64;
            let mut inputs = Vec::new();
            for i in &n.inputs {
                let from = g.index_of(i).expect("validated");
                let window = match &n.kind {
                    NodeKind::Im2col(a) => Window::Sliding {
                        in_h: a.in_height,
                        in_w: a.in_width,
                        kernel: a.kernel,
                        stride: a.stride,
                        padding: a.padding,
                        out_h: n.shape.height,
                        out_w: n.shape.width,
                    },
                    _ => Window::Elementwise,
                };
                inputs.push(StageInput { from, window });
            }
            stages.push(PipelineStage {
                id: n.id.clone(),
                cycles,
                tokens: n.shape.pixels(),
                row_tokens: n.shape.width,
                token_bits,
                inputs,
            });
        }
        let p = Pipeline { clock_mhz: plan.clock_mhz, stages };
        p.validate()?;
        Ok(p)
    }

    /// Linear chain of elementwise stages with the given cycle counts, all
    /// streaming `tokens` tokens per frame.
    pub fn chain(cycles: &[u64], tokens: usize, clock_mhz: f64) -> Result<Self, DataflowError> {
        let stages = cycles
            .iter()
            .enumerate()
            .map(|(i, &c)| PipelineStage {
                id: format!("s{i}"),
                cycles: c,
                tokens,
                row_tokens: tokens,
                token_bits: 8,
                inputs: if i == 0 { vec![] } else { vec![StageInput { from: i - 1, window: Window::Elementwise }] },
            })
            .collect();
        let p = Pipeline { clock_mhz, stages };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), DataflowError> {
        let bad = |m: String| Err(DataflowError::Invalid(m));
        if self.stages.len() < 2 {
            return bad("a pipeline needs a source and a sink".into());
        }
        if !(self.clock_mhz > 0.0) {
            return bad(format!("clock must be positive, got {} MHz", self.clock_mhz));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.tokens == 0 || s.cycles < s.tokens as u64 {
                return bad(format!("stage `{}` needs at least one cycle per token", s.id));
            }
            if (i == 0) != s.inputs.is_empty() {
                return bad(format!("stage `{}`: only the first stage may be a source", s.id));
            }
            for inp in &s.inputs {
                if inp.from >= i {
                    return bad(format!("stage `{}` is not in topological order", s.id));
                }
                let src = self.stages[inp.from].tokens;
                let ok = match &inp.window {
                    Window::Elementwise => src == s.tokens,
                    Window::Sliding { in_h, in_w, out_h, out_w, .. } => src == in_h * in_w && s.tokens == out_h * out_w,
                };
                if !ok {
                    return bad(format!("token counts of `{}` -> `{}` do not match", self.stages[inp.from].id, s.id));
                }
            }
        }
        let last = self.stages.len() - 1;
        for (i, _) in self.stages.iter().enumerate().take(last) {
            if !self.stages.iter().any(|s| s.inputs.iter().any(|e| e.from == i)) {
                return bad(format!("stage `{}` has no consumer", self.stages[i].id));
            }
        }
        Ok(())
    }

    /// `(producer, consumer, input slot)` for every edge, in consumer order.
    pub fn edges(&self) -> Vec<(usize, usize, usize)> {
        let mut v = Vec::new();
        for (c, s) in self.stages.iter().enumerate() {
            for (slot, e) in s.inputs.iter().enumerate() {
                v.push((e.from, c, slot));
            }
        }
        v
    }

    pub fn edge_keys(&self) -> Vec<String> {
        self.edges().iter().map(|&(p, c, _)| edge_key(&self.stages[p].id, &self.stages[c].id)).collect()
    }

    /// Slowest stage and its cycles per frame.
    pub fn bottleneck(&self) -> (usize, u64) {
        self.stages.iter().enumerate().map(|(i, s)| (i, s.cycles)).fold((0, 0), |b, x| if x.1 > b.1 { x } else { b })
    }

    /// Closed-form steady-state throughput: `clock_hz / max_node_cycles`.
    pub fn closed_form_fps(&self) -> f64 {
        self.clock_mhz * 1e6 / self.bottleneck().1 as f64
    }
}

/// Cumulative count of input tokens output `k` needs, for every `k`.
pub(crate) fn need_table(w: &Window, in_tokens: usize, out_tokens: usize) -> Vec<usize> {
    match *w {
        Window::Elementwise => (1..=out_tokens).collect(),
        Window::Sliding { in_h, in_w, kernel, stride, padding, out_h, out_w } => {
            let mut v = Vec::with_capacity(out_h * out_w);
            let mut run = 0;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let r = (oy * stride + kernel - 1).saturating_sub(padding).min(in_h - 1);
                    let c = (ox * stride + kernel - 1).saturating_sub(padding).min(in_w - 1);
                    run = usize::max(run, r * in_w + c + 1);
                    v.push(run);
                }
            }
            if let Some(last) = v.last_mut() {
                *last = in_tokens;
            }
            v
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sliding_need_is_monotone_and_complete() {
        let w = Window::Sliding { in_h: 5, in_w: 4, kernel: 3, stride: 2, padding: 1, out_h: 3, out_w: 2 };
        let t = need_table(&w, 20, 6);
        assert_eq!(t.len(), 6);
        assert!(t.windows(2).all(|p| p[0] <= p[1]));
        assert_eq!(t[0], 4 + 2);
        assert_eq!(*t.last().unwrap(), 20);
        assert_eq!(need_table(&Window::Elementwise, 3, 3), vec![1, 2, 3]);
    }

    #[test]
    fn chain_validation() {
        assert!(Pipeline::chain(&[10, 40, 20], 10, 100.0).is_ok());
        assert!(Pipeline::chain(&[10, 5], 10, 100.0).is_err());
        assert!(Pipeline::chain(&[10], 10, 100.0).is_err());
    }
}
