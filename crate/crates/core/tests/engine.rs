use quantflow::engine::{quantize_input, run_int, verify};
use quantflow::graph::NodeKind;
use quantflow::lowering::lower;
use quantflow::quantize::{calibrate, quantize_graph, BitWidthPlan};
use quantflow::synth::{synthetic_image, synthetic_images};
use quantflow::Graph;

fn random_model(seed: u64) -> (Graph, Graph, Graph) {
    let m = quantflow::synth::random_model(seed, 4, 16).unwrap();
    (m.float, m.quantized, m.lowered)
}

#[test]
fn random_models_are_bit_exact() {
    for seed in 0..60 {
        let (_, q, l) = random_model(seed);
        let x = synthetic_image(q.input_shape(), 10_000 + seed);
        let r = verify(&q, &l, &x).unwrap();
        assert!(r.bit_exact, "seed {seed}: {:?}", r.nodes.iter().find(|n| n.mismatches > 0));
        assert_eq!(r.max_mse, 0.0);
        assert!(r.compared_nodes >= 4);
    }
}

#[test]
fn traces_are_deterministic() {
    let (_, q, l) = random_model(7);
    let x = synthetic_image(q.input_shape(), 3);
    let qi = quantize_input(&l, &x).unwrap();
    let a = run_int(&l, &qi).unwrap();
    let b = std::thread::spawn({
        let (l, qi) = (l.clone(), qi.clone());
        move || run_int(&l, &qi).unwrap()
    })
    .join()
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(a.entries.len(), l.nodes.len());
}

#[test]
fn zero_input_gives_threshold_floor_at_zero_accumulator() {
    let (float, q, l) = random_model(11);
    let x = quantflow::FloatTensor::zeros(vec![float.input_shape().channels, float.input_shape().height, float.input_shape().width]);
    let t = run_int(&l, &quantize_input(&l, &x).unwrap()).unwrap();
    let first_mv = l.nodes.iter().find(|n| matches!(n.kind, NodeKind::Matvec(_))).unwrap();
    let e = t.get(&first_mv.id).unwrap();
    assert_eq!((e.min, e.max), (0, 0));
    assert!(verify(&q, &l, &x).unwrap().bit_exact);
}

#[test]
fn eight_bit_backbone_is_bit_exact() {
    let float: Graph = quantflow::graph::build_backbone(64).unwrap();
    let cal = calibrate(&float, &synthetic_images(float.input_shape(), 2, 5)).unwrap();
    let q = quantize_graph(&float, &BitWidthPlan::uniform(&float, 8, 8), &cal).unwrap();
    let l = lower(&q).unwrap();
    let r = verify(&q, &l, &synthetic_image(float.input_shape(), 77)).unwrap();
    assert!(r.bit_exact);
    assert_eq!(r.compared_nodes, l.nodes.len() - 52);
}
