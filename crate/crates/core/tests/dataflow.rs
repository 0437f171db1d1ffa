use std::collections::BTreeMap;

use proptest::prelude::*;
use quantflow::dataflow::*;
use quantflow::graph::{build_network, NetworkSpec, NodeKind, Shape, StemSpec};
use quantflow::lowering::{lower, value_range};
use quantflow::quantize::{calibrate, quantize_graph, BitWidthPlan};
use quantflow::synth::{random_folding, random_model, synthetic_images};
use quantflow::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lowered(spec: &NetworkSpec, wbits: u8, abits: u8) -> Graph {
    let f: Graph = build_network(spec, 1, 0.0).unwrap();
    let cal = calibrate(&f, &synthetic_images(spec.input, 1, 1)).unwrap();
    lower(&quantize_graph(&f, &BitWidthPlan::uniform(&f, wbits, abits), &cal).unwrap()).unwrap()
}

fn stem_only() -> Graph {
    let spec = NetworkSpec {
        input: Shape::new(3, 240, 240),
        stem: Some(StemSpec { out_channels: 32, kernel: 3, stride: 2 }),
        blocks: vec![],
        head: None,
    };
    lowered(&spec, 4, 4)
}

#[test]
fn first_conv_folding_matches_divisor_search() {
    let g = stem_only();
    let NodeKind::Matvec(m) = &g.node("conv0").unwrap().kind else { panic!() };
    let px = g.node("conv0").unwrap().shape.pixels() as u64;
    assert_eq!(m.fold_in as u64 * m.out_channels as u64 * px, 12_441_600);
    let plan = fold_graph(&g, 750_000, &ResourceBudget::default(), &CostModel::default(), 187.5).unwrap();
    let mut best: Option<(usize, usize, usize)> = None;
    for pe in (1..=m.out_channels).filter(|d| m.out_channels % d == 0) {
        for simd in (1..=m.fold_in).filter(|d| m.fold_in % d == 0) {
            let cycles = (m.fold_in / simd) as u64 * (m.out_channels / pe) as u64 * px;
            if cycles <= 750_000 && best.is_none_or(|b| (pe * simd, pe) < (b.0, b.1)) {
                best = Some((pe * simd, pe, simd));
            }
        }
    }
    let (lanes, pe, simd) = best.unwrap();
    assert_eq!(lanes, 18);
    assert_eq!(plan.fold("conv0"), Fold::new(pe, simd));
    assert!(g.nodes.iter().all(|n| node_cycles(n, plan.fold(&n.id)).unwrap() <= 750_000));
}

#[test]
fn lazy_and_infeasible_budgets() {
    let g = stem_only();
    let plan = fold_graph(&g, 12_441_600, &ResourceBudget::default(), &CostModel::default(), 187.5).unwrap();
    assert!(plan.nodes.is_empty());
    let err = fold_graph(&g, 14_399, &ResourceBudget::default(), &CostModel::default(), 187.5).unwrap_err();
    assert!(matches!(err, DataflowError::LatencyInfeasible { .. }), "{err}");
    let tiny = ResourceBudget { luts: 10, ..Default::default() };
    let err = fold_graph(&g, 750_000, &tiny, &CostModel::default(), 187.5).unwrap_err();
    assert!(matches!(err, DataflowError::ResourcesExceeded { resource: "LUT", .. }), "{err}");
}

fn bits(lo: i64, hi: i64) -> u64 {
    (1..=64).find(|&b| if lo >= 0 { hi < (1i64 << b) } else { lo >= -(1i64 << (b - 1)) && hi < (1i64 << (b - 1)) }).unwrap()
}

#[test]
fn resource_formulas_match_independent_arithmetic() {
    let m = CostModel::default();
    for seed in 0..20 {
        let g = random_model::<f64>(seed, 3, 12).unwrap().lowered;
        let plan = random_folding(&g, &mut ChaCha8Rng::seed_from_u64(seed), 100.0);
        let est = estimate_resources(&g, &plan, &BTreeMap::new(), &m).unwrap();
        let (mut luts, mut brams, mut dsps) = (0, 0, 0);
        for n in &g.nodes {
            let f = plan.fold(&n.id);
            let r = &est.nodes[&n.id];
            let bits_of = |id: &str| {
                let (lo, hi) = value_range(&g, id).unwrap();
                bits(lo, hi)
            };
            match &n.kind {
                NodeKind::Matvec(mv) => {
                    let (bw, ba) = (mv.weight_bits as u64, bits_of(&n.inputs[0]));
                    assert_eq!(r.luts, (m.alpha * (f.pe * f.simd) as f64 * (bw * ba) as f64).ceil() as u64);
                    assert_eq!(r.brams, (mv.out_channels as u64 * mv.fold_in as u64 * bw).div_ceil(18_432));
                    assert_eq!(r.dsps, if bw * ba >= m.gamma as u64 { (f.pe * f.simd) as u64 } else { 0 });
                }
                NodeKind::Multithreshold(t) => {
                    let levels = (1u64 << t.out_bits) - 1;
                    assert_eq!(r.luts, (m.beta * (f.pe as u64 * levels * bits_of(&n.inputs[0])) as f64).ceil() as u64);
                }
                _ => {}
            }
            luts += r.luts;
            brams += r.brams;
            dsps += r.dsps;
        }
        assert_eq!((est.luts, est.brams, est.dsps), (luts, brams, dsps));
    }
}

#[test]
fn wider_activations_cost_more_threshold_luts() {
    let spec = NetworkSpec {
        input: Shape::new(3, 8, 8),
        stem: Some(StemSpec { out_channels: 8, kernel: 1, stride: 1 }),
        blocks: vec![],
        head: None,
    };
    let m = CostModel::default();
    let thr = |abits: u8| {
        let g = lowered(&spec, 4, abits);
        let n = g.node("conv0_act").unwrap();
        let acc = value_range(&g, &n.inputs[0]).unwrap();
        let est = estimate_resources(&g, &FoldingPlan::unfolded(100.0), &BTreeMap::new(), &m).unwrap();
        (est.nodes["conv0_act"].luts as f64, bits(acc.0, acc.1) as f64)
    };
    let (l2, a2) = thr(2);
    let (l4, a4) = thr(4);
    assert!(l4 > 2.0 * l2);
    assert!(((l4 / a4) / (l2 / a2) - 5.0).abs() < 0.05);
}

#[test]
fn fifo_memory() {
    let g = lowered(&demo_spec(), 4, 4);
    let p = Pipeline::from_graph(&g, &FoldingPlan::unfolded(100.0)).unwrap();
    let zero: BTreeMap<String, usize> = p.edge_keys().into_iter().map(|k| (k, 0)).collect();
    let est = estimate_resources(&g, &FoldingPlan::unfolded(100.0), &zero, &CostModel::default()).unwrap();
    assert!(est.fifos.values().all(|&b| b == 0));
    let deep = FifoConfig::deep(&p);
    let est2 = estimate_resources(&g, &FoldingPlan::unfolded(100.0), &deep.depths, &CostModel::default()).unwrap();
    assert!(est2.brams > est.brams);
    assert_eq!(est2.brams - est.brams, est2.fifos.values().sum::<u64>());
}

#[test]
fn demo_reaches_bottleneck_rate_with_deep_fifos() {
    let g: Graph = demo_graph(1).unwrap();
    let plan = demo_folding(&g).unwrap();
    let p = Pipeline::from_graph(&g, &plan).unwrap();
    assert_eq!(p.bottleneck().1, 750_000);
    let r = simulate_pipeline(&p, &FifoConfig::deep(&p), None).unwrap();
    assert_eq!(r.steady_state_fps, 250.0);
    assert_eq!(r.cycles_per_frame, 750_000.0);
    let r = r.with_power(3.83).unwrap();
    assert!((r.fps_per_watt.unwrap() - 65.3).abs() < 0.05);
    assert!(r.clone().with_power(0.0).is_err());
}

#[test]
fn deadlock_is_reported_with_the_skip_edge() {
    let g: Graph = demo_graph(1).unwrap();
    let p = Pipeline::from_graph(&g, &demo_folding(&g).unwrap()).unwrap();
    let err = simulate_pipeline(&p, &FifoConfig::uniform(&p, 1), None).unwrap_err();
    match err {
        DataflowError::Deadlock { edge, depth, .. } => {
            assert_eq!(edge, "conv0_act->b1_add");
            assert_eq!(depth, 1);
        }
        e => panic!("{e}"),
    }
}

#[test]
fn default_preset_keeps_full_rate_on_demo() {
    let g: Graph = demo_graph(1).unwrap();
    let p = Pipeline::from_graph(&g, &demo_folding(&g).unwrap()).unwrap();
    let cfg = FifoConfig::preset(&p, FifoPreset::Default).unwrap();
    assert!(cfg.depths.values().all(|&d| d >= 2));
    let r = simulate_pipeline(&p, &cfg, None).unwrap();
    assert_eq!(r.steady_state_fps, 250.0);
}

#[test]
fn simulation_is_deterministic_and_conserves_tokens() {
    let m = random_model::<f64>(3, 4, 12).unwrap();
    let plan = random_folding(&m.lowered, &mut ChaCha8Rng::seed_from_u64(3), 100.0);
    let p = Pipeline::from_graph(&m.lowered, &plan).unwrap();
    let cfg = FifoConfig::preset(&p, FifoPreset::Default).unwrap();
    let a = simulate_pipeline(&p, &cfg, None).unwrap();
    let b = simulate_pipeline(&p, &cfg, None).unwrap();
    assert_eq!(a, b);
    for s in &p.stages {
        assert_eq!(a.produced[&s.id], (s.tokens * a.frames) as u64);
        for i in &s.inputs {
            let src = &p.stages[i.from];
            assert_eq!(a.consumed[&edge_key(&src.id, &s.id)], (src.tokens * a.frames) as u64);
        }
    }
}

#[test]
fn random_graphs_hit_the_throughput_ceiling() {
    for seed in 0..15u64 {
        let m = random_model::<f64>(seed, 4, 12).unwrap();
        let plan = random_folding(&m.lowered, &mut ChaCha8Rng::seed_from_u64(seed), 150.0);
        let p = Pipeline::from_graph(&m.lowered, &plan).unwrap();
        let ceiling = p.closed_form_fps();
        let deep = simulate_pipeline(&p, &FifoConfig::deep(&p), None).unwrap();
        assert!((deep.steady_state_fps - ceiling).abs() <= 1e-3 * ceiling, "seed {seed}");
        let starved = simulate_pipeline(&p, &FifoConfig::preset(&p, FifoPreset::Starved).unwrap(), None).unwrap();
        assert!(starved.steady_state_fps <= ceiling * (1.0 + 1e-12), "seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn deeper_fifos_never_reduce_throughput(seed in 0u64..1000, grow in proptest::collection::vec(0usize..40, 64)) {
        let m = random_model::<f64>(seed, 4, 10).unwrap();
        let plan = random_folding(&m.lowered, &mut ChaCha8Rng::seed_from_u64(seed), 100.0);
        let p = Pipeline::from_graph(&m.lowered, &plan).unwrap();
        let base = FifoConfig::preset(&p, FifoPreset::Starved).unwrap();
        let mut deeper = base.clone();
        for (d, g) in deeper.depths.values_mut().zip(grow.iter().cycle()) {
            *d += g;
        }
        let a = simulate_pipeline(&p, &base, None).unwrap();
        let b = simulate_pipeline(&p, &deeper, None).unwrap();
        prop_assert!(b.steady_state_fps >= a.steady_state_fps * (1.0 - 1e-12));
    }

    #[test]
    fn chains_match_closed_form(cycles in proptest::collection::vec(1u64..50, 2..7), tokens in 1usize..20, depth in 1usize..4) {
        let c: Vec<u64> = cycles.iter().map(|c| c * tokens as u64).collect();
        let p = Pipeline::chain(&c, tokens, 200.0).unwrap();
        let r = simulate_pipeline(&p, &FifoConfig::uniform(&p, depth), None).unwrap();
        prop_assert!(r.converged);
        prop_assert_eq!(r.cycles_per_frame, *c.iter().max().unwrap() as f64);
    }
}
