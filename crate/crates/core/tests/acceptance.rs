//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use quantflow::bitwidth::{select_bitwidths, SelectionPolicy, SensitivityRecord};
use quantflow::dataflow::*;
use quantflow::engine::verify;
use quantflow::graph::{build_backbone, build_network, count_params, BlockSpec, NetworkSpec, NodeKind, Shape, StemSpec};
use quantflow::lowering::{
    absorb_quantizers, align_residual_scales, fold_batchnorm, lower, lower_conv_to_im2col_matvec, matvec_channel_ranges,
    threshold_eval,
};
use quantflow::pose::{esa_score, orientation_error, synthetic_poses, PoseEstimate, PoseSample};
use quantflow::quantize::{calibrate, quantize_graph};
use quantflow::synth::{random_folding, random_model, random_plan, synthetic_image, synthetic_images};
use quantflow::{Graph, Quaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed < Duration::from_secs(limit_s), || format!("took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64()))
}

fn bit_exact_equivalence() -> Outcome {
    let t0 = Instant::now();
    let results: Vec<Result<(usize, f64), String>> = (0..200u64)
        .into_par_iter()
        .map(|seed| {
            let m = random_model::<f64>(seed, 4, 16).map_err(|e| format!("seed {seed}: {e}"))?;
            let x = synthetic_image(m.float.input_shape(), 50_000 + seed);
            let r = verify(&m.quantized, &m.lowered, &x).map_err(|e| format!("seed {seed}: {e}"))?;
            ensure(r.bit_exact, || format!("seed {seed} mismatched at {:?}", r.nodes.iter().find(|n| n.mismatches > 0)))?;
            Ok((r.compared_nodes, r.max_mse))
        })
        .collect();
    let mut nodes = 0;
    let mut max_mse = 0.0f64;
    for r in results {
        let (n, m) = r?;
        nodes += n;
        max_mse = max_mse.max(m);
    }
    ensure(max_mse == 0.0, || format!("max MSE {max_mse}"))?;
    within(t0.elapsed(), 120)?;
    Ok(format!("200 models, {nodes} node comparisons, max MSE {max_mse}, {:.1} s", t0.elapsed().as_secs_f64()))
}

/// Narrow symmetric range for signed outputs.
fn int_range(bits: u8, signed: bool) -> (i64, i64) {
    if signed {
        (-((1i64 << (bits - 1)) - 1), (1i64 << (bits - 1)) - 1)
    } else {
        (0, (1i64 << bits) - 1)
    }
}

/// Scans every reachable accumulator of every threshold unit of one graph.
/// Returns (units, points, mismatches).
fn scan_thresholds(g: &Graph) -> Result<(usize, u64, u64), String> {
    let mut units = 0;
    let mut points = 0u64;
    let mut bad = 0u64;
    for n in &g.nodes {
        let NodeKind::Multithreshold(t) = &n.kind else { continue };
        let d = t.derivation.as_ref().ok_or_else(|| format!("{} lost its derivation", n.id))?;
        let unit = g.threshold_unit(&t.thresholds).ok_or("missing unit")?;
        let aff = g.float_tensor(&d.affine).ok_or("missing affine")?.data();
        let ws = g.float_tensor(&d.weight_scale).ok_or("missing weight scales")?.data();
        let ranges = matvec_channel_ranges(g, &n.inputs[0]).map_err(|e| e.to_string())?;
        let c = ws.len();
        let (lo, hi) = int_range(t.out_bits, t.out_signed);
        let (p, b) = ranges
            .par_iter()
            .enumerate()
            .map(|(ch, &(acc_lo, acc_hi))| {
                let a_int = aff[ch] * ws[ch] * d.in_scale / d.out_scale;
                let b_int = aff[c + ch] / d.out_scale;
                let mut wrong = 0u64;
                for acc in acc_lo..=acc_hi {
                    let want = ((a_int * acc as f64 + b_int).round_ties_even() as i64).clamp(lo, hi);
                    if threshold_eval(&unit.thresholds[ch], acc, lo as i32, hi as i32) as i64 != want {
                        wrong += 1;
                    }
                }
                ((acc_hi - acc_lo + 1) as u64, wrong)
            })
            .reduce(|| (0, 0), |x, y| (x.0 + y.0, x.1 + y.1));
        units += 1;
        points += p;
        bad += b;
    }
    Ok((units, points, bad))
}

fn threshold_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut units = 0;
    let mut points = 0u64;
    let mut graphs: Vec<Graph> = Vec::new();
    for seed in 0..200u64 {
        let m = random_model::<f64>(seed, 4, 16).map_err(|e| e.to_string())?;
        graphs.push(m.quantized);
    }
    let mut backbone_plan_graph = {
        let f: Graph = build_backbone(64).map_err(|e| e.to_string())?;
        let cal = calibrate(&f, &synthetic_images(f.input_shape(), 2, 3)).map_err(|e| e.to_string())?;
        let plan = select_bitwidths(&fixture_records(&f), &SelectionPolicy::mixed_3_4()).map_err(|e| e.to_string())?;
        vec![quantize_graph(&f, &plan, &cal).map_err(|e| e.to_string())?]
    };
    graphs.append(&mut backbone_plan_graph);
    for (gi, q) in graphs.iter().enumerate() {
        let g = fold_batchnorm(q)
            .and_then(|g| lower_conv_to_im2col_matvec(&g))
            .and_then(|g| absorb_quantizers(&g))
            .and_then(|g| align_residual_scales(&g))
            .map_err(|e| e.to_string())?;
        let (u, p, bad) = scan_thresholds(&g)?;
        ensure(bad == 0, || format!("{bad} of {p} accumulator points disagree in graph {gi}"))?;
        units += u;
        points += p;
    }
    within(t0.elapsed(), 60)?;
    Ok(format!("{units} units, {points} accumulator points, 100% match, {:.1} s", t0.elapsed().as_secs_f64()))
}

fn bottleneck_arithmetic() -> Outcome {
    let g: Graph = demo_graph(1).map_err(|e| e.to_string())?;
    let p = Pipeline::from_graph(&g, &demo_folding(&g).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let (slowest, cycles) = p.bottleneck();
    ensure(cycles == 750_000, || format!("bottleneck {slowest} takes {cycles} cycles"))?;
    ensure(p.clock_mhz == 187.5, || format!("clock {}", p.clock_mhz))?;
    let r = simulate_pipeline(&p, &FifoConfig::deep(&p), None).map_err(|e| e.to_string())?;
    ensure(r.steady_state_fps == 250.0, || format!("demo simulated at {} FPS", r.steady_state_fps))?;
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let m = random_model::<f64>(1000 + seed, 4, 16).map_err(|e| e.to_string())?;
        let plan = random_folding(&m.lowered, &mut ChaCha8Rng::seed_from_u64(seed), 150.0);
        let p = Pipeline::from_graph(&m.lowered, &plan).map_err(|e| e.to_string())?;
        let sim = simulate_pipeline(&p, &FifoConfig::deep(&p), None).map_err(|e| e.to_string())?;
        let rel = (sim.steady_state_fps - p.closed_form_fps()).abs() / p.closed_form_fps();
        worst = worst.max(rel);
    }
    ensure(worst <= 1e-3, || format!("worst closed-form disagreement {:.4}%", worst * 100.0))?;
    Ok(format!("demo 250 FPS exactly ({}, 750000 cycles at 187.5 MHz); 50 random graphs, worst deviation {:.2e}", p.stages[slowest].id, worst))
}

fn fifo_degradation() -> Outcome {
    let g: Graph = demo_graph(1).map_err(|e| e.to_string())?;
    let p = Pipeline::from_graph(&g, &demo_folding(&g).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let deep = simulate_pipeline(&p, &FifoConfig::deep(&p), None).map_err(|e| e.to_string())?;
    let starved_cfg = FifoConfig::preset(&p, FifoPreset::Starved).map_err(|e| e.to_string())?;
    let starved = simulate_pipeline(&p, &starved_cfg, None).map_err(|e| e.to_string())?;
    ensure(deep.steady_state_fps == 250.0, || format!("deep FIFOs give {} FPS", deep.steady_state_fps))?;
    ensure(starved.steady_state_fps <= 62.5, || format!("starved FIFOs give {} FPS", starved.steady_state_fps))?;
    let configs: Vec<Result<(), String>> = (0..100u64)
        .into_par_iter()
        .map(|seed| {
            let m = random_model::<f64>(2000 + seed, 4, 12).map_err(|e| e.to_string())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = random_folding(&m.lowered, &mut rng, 100.0);
            let p = Pipeline::from_graph(&m.lowered, &plan).map_err(|e| e.to_string())?;
            let base = FifoConfig::preset(&p, FifoPreset::Starved).map_err(|e| e.to_string())?;
            let mut deeper = base.clone();
            for d in deeper.depths.values_mut() {
                if rng.random_bool(0.5) {
                    *d += rng.random_range(1..=32);
                }
            }
            let a = simulate_pipeline(&p, &base, None).map_err(|e| e.to_string())?.steady_state_fps;
            let b = simulate_pipeline(&p, &deeper, None).map_err(|e| e.to_string())?.steady_state_fps;
            let c = simulate_pipeline(&p, &FifoConfig::deep(&p), None).map_err(|e| e.to_string())?.steady_state_fps;
            ensure(b >= a * (1.0 - 1e-12) && c >= b * (1.0 - 1e-12), || format!("config {seed}: {a} -> {b} -> {c} FPS"))
        })
        .collect();
    configs.into_iter().collect::<Result<Vec<()>, String>>()?;
    Ok(format!(
        "demo {} -> {:.2} FPS ({:.2}x drop); monotone on 100 random configs",
        deep.steady_state_fps,
        starved.steady_state_fps,
        deep.steady_state_fps / starved.steady_state_fps
    ))
}

fn energy_arithmetic() -> Outcome {
    let cases = [(58.7, 0.865, 67.9), (250.0, 3.83, 65.3), (7.66, 2.2, 3.48), (6.58, 3.7, 1.78)];
    let mut got = Vec::new();
    for (fps, w, want) in cases {
        let v = energy_metrics(fps, w).map_err(|e| e.to_string())?;
        ensure((v - want).abs() <= 0.05, || format!("{fps} FPS at {w} W gives {v}, want {want}"))?;
        got.push(format!("{v:.2}"));
    }
    Ok(format!("FPS/W = {}", got.join(", ")))
}

fn topology() -> Outcome {
    let g: Graph = build_backbone(240).map_err(|e| e.to_string())?;
    let convs = g.conv_layers().len();
    let blocks = g.nodes.iter().filter(|n| n.id.starts_with('b') && n.id.ends_with("_dw")).count();
    let params = count_params(&g);
    ensure(convs == 52, || format!("{convs} conv layers"))?;
    ensure(blocks == 17, || format!("{blocks} blocks"))?;
    ensure(g.node("b1_expand").is_none() && g.node("b2_expand").is_some(), || "expansion layout".into())?;
    let dw = g.nodes.iter().find(|n| n.kind.is_depthwise()).ok_or("no depthwise conv")?;
    ensure(dw.id == "b1_dw" && params[&dw.id] == 288, || format!("first depthwise {} has {} params", dw.id, params[&dw.id]))?;
    Ok(format!("52 convs, 17 blocks, b1 without expansion, {} = 288 params", dw.id))
}

fn fixture_records(g: &Graph) -> Vec<SensitivityRecord> {
    let params = count_params(g);
    g.conv_layers()
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let d = 1.0 / params[&n.id] as f64;
            SensitivityRecord {
                layer_index: i,
                layer_id: n.id.clone(),
                params: params[&n.id],
                macs: 0,
                baseline: 0.0,
                binarized: d,
                degradation: d,
                failure: None,
            }
        })
        .collect()
}

fn bitwidth_fixture() -> Outcome {
    let g: Graph = build_backbone(240).map_err(|e| e.to_string())?;
    let plan = select_bitwidths(&fixture_records(&g), &SelectionPolicy::mixed_3_4()).map_err(|e| e.to_string())?;
    plan.validate(&g).map_err(|e| e.to_string())?;
    let mut want: BTreeMap<String, u8> = g.conv_layers().iter().map(|n| (n.id.clone(), 3)).collect();
    want.insert("conv0".into(), 4);
    want.insert("b1_dw".into(), 6);
    want.insert("b1_project".into(), 4);
    ensure(plan.weight_bits == want, || format!("{:?}", plan.weight_bits.iter().filter(|(_, &b)| b != 3).collect::<Vec<_>>()))?;
    ensure(plan.act_bits == 4 && plan.act_overrides.is_empty(), || format!("activations {}", plan.act_bits))?;
    Ok("conv0:4, b1_dw:6, b1_project:4, 49 others:3, activations:4".into())
}

fn tiny_spec(rng: &mut ChaCha8Rng) -> NetworkSpec {
    let c0 = rng.random_range(1..=4);
    let c1 = rng.random_range(1..=4);
    let blocks = if rng.random_bool(0.6) {
        vec![BlockSpec { expansion: 1, out_channels: c1, stride: 1, kernel: rng.random_range(0..2) * 2 + 1 }]
    } else {
        vec![]
    };
    NetworkSpec {
        input: Shape::new(rng.random_range(1..=2), rng.random_range(2..=5), rng.random_range(2..=5)),
        stem: Some(StemSpec { out_channels: c0, kernel: rng.random_range(0..2) * 2 + 1, stride: 1 }),
        blocks,
        head: rng.random_bool(0.5).then(|| rng.random_range(1..=4)),
    }
}

fn lattice_size(g: &Graph) -> usize {
    g.nodes
        .iter()
        .map(|n| {
            let (pe, simd) = match &n.kind {
                NodeKind::Matvec(m) => (m.out_channels, m.fold_in),
                NodeKind::Im2col(a) => (1, a.patch_len()),
                NodeKind::Multithreshold(_) | NodeKind::ResidualAdd => (n.shape.channels, 1),
                _ => return 1,
            };
            divisors(pe).len() * divisors(simd).len()
        })
        .product()
}

fn folding_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = CostModel::default();
    let (mut graphs, mut budgets, mut infeasible) = (0, 0, 0);
    let mut attempts = 0;
    while graphs < 60 {
        attempts += 1;
        if attempts > 20_000 {
            return Err(format!("only {graphs} qualifying graphs generated"));
        }
        let spec = tiny_spec(&mut rng);
        let f: Graph = build_network(&spec, attempts, 0.25).map_err(|e| e.to_string())?;
        let cal = calibrate(&f, &synthetic_images(spec.input, 1, attempts)).map_err(|e| e.to_string())?;
        let plan = random_plan(&f, &mut rng);
        let g = lower(&quantize_graph(&f, &plan, &cal).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let matvecs = g.nodes.iter().filter(|n| matches!(n.kind, NodeKind::Matvec(_))).count();
        if matvecs > 4 || lattice_size(&g) > 64 {
            continue;
        }
        graphs += 1;
        let mut cycle_values = BTreeSet::new();
        for n in &g.nodes {
            let (pe, simd) = match &n.kind {
                NodeKind::Matvec(m) => (m.out_channels, m.fold_in),
                NodeKind::Im2col(a) => (1, a.patch_len()),
                NodeKind::Multithreshold(_) | NodeKind::ResidualAdd => (n.shape.channels, 1),
                _ => continue,
            };
            for p in divisors(pe) {
                for s in divisors(simd) {
                    cycle_values.insert(node_cycles(n, Fold::new(p, s)).map_err(|e| e.to_string())?);
                }
            }
        }
        let min_feasible = g.nodes.iter().map(|n| node_cycles(n, Fold::ONE).unwrap_or(0)).max().unwrap_or(0);
        cycle_values.insert(min_feasible.saturating_sub(1).max(1));
        for budget in cycle_values.into_iter().chain([min_feasible]) {
            budgets += 1;
            let brute = fold_graph_brute_force(&g, budget, &model, 100.0).map_err(|e| e.to_string())?;
            let greedy = fold_graph(&g, budget, &ResourceBudget::default(), &model, 100.0);
            match (brute, greedy) {
                (Some(b), Ok(p)) => ensure(b == p, || format!("budget {budget}: brute {:?} vs {:?}", b.nodes, p.nodes))?,
                (None, Err(DataflowError::LatencyInfeasible { .. })) => infeasible += 1,
                (b, p) => return Err(format!("budget {budget}: brute {b:?} vs {p:?}")),
            }
        }
    }
    Ok(format!("{graphs} graphs, {budgets} latency budgets ({infeasible} infeasible), all plans identical"))
}

fn pose_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let q = Quaternion::random(&mut rng);
        let e = orientation_error(&q, &-q).map_err(|e| e.to_string())?;
        ensure(e == 0.0 || e < 1e-9, || format!("error(q, -q) = {e}"))?;
        let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0f64)];
        for deg in [1.0f64, 10.0, 90.0] {
            let r = q * Quaternion::from_axis_angle(axis, deg.to_radians());
            let e = orientation_error(&q, &r).map_err(|e| e.to_string())?;
            worst = worst.max((e - deg).abs());
        }
    }
    ensure(worst < 1e-9, || format!("rotation angle error {worst:e}"))?;
    let samples = synthetic_poses::<f64>(64, 20.0, 0.1, 3);
    let perfect: Vec<(PoseSample<f64>, PoseEstimate<f64>)> =
        samples.iter().map(|(g, _)| (*g, PoseEstimate { q: g.q_gt, t: g.t_gt })).collect();
    let zero = esa_score(&perfect).map_err(|e| e.to_string())?.esa;
    ensure(zero.abs() < 1e-12, || format!("perfect ESA {zero}"))?;
    let base = esa_score(&samples).map_err(|e| e.to_string())?.esa;
    let mut reversed = samples.clone();
    reversed.reverse();
    let rev = esa_score(&reversed).map_err(|e| e.to_string())?.esa;
    ensure((rev - base).abs() < 1e-12, || format!("order changed ESA {base} -> {rev}"))?;
    Ok(format!("worst angle deviation {worst:.1e}, perfect ESA {zero}, order-invariant ESA {base:.4}"))
}

fn not_reproducible() -> Outcome {
    Ok("absolute ESA scores (0.296 / 0.307 / 0.411) need a trained network on the SPEED dataset and are replaced by \
        criteria 1, 2 and 9; the measured on-board 58.7 FPS is replaced by the simulated >= 4x FIFO-starvation drop \
        of criterion 4"
        .into())
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "bit-exact equivalence", bit_exact_equivalence),
        (2, "threshold oracle", threshold_oracle),
        (3, "pipeline bottleneck arithmetic", bottleneck_arithmetic),
        (4, "FIFO degradation", fifo_degradation),
        (5, "energy arithmetic", energy_arithmetic),
        (6, "topology facts", topology),
        (7, "bit-width plan fixture", bitwidth_fixture),
        (8, "folding optimality", folding_optimality),
        (9, "pose metric properties", pose_properties),
        (10, "not reproducible at desk scale", not_reproducible),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {id} ({name}): {detail} [{secs:.1} s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {why} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
