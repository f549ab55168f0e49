use shapeblend_core::grad::check::{catalog, composite_case, primitive_cases};
use shapeblend_core::grad::{seeded_rng, Graph, Tensor};

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-6;

#[test]
fn every_primitive_matches_finite_differences() {
    for (k, prim) in catalog().iter().enumerate() {
        let cases = primitive_cases(prim, 20, 1000 + k as u64).unwrap();
        assert!(cases.len() >= 20);
        for (t, case) in cases.iter().enumerate() {
            let err = case.max_relative_error(STEP).unwrap();
            assert!(err <= TOL, "{} trial {t}: relative error {err:e}", prim.name());
        }
    }
}

#[test]
fn three_layer_composition_matches_finite_differences() {
    let mut rng = seeded_rng(7);
    for _ in 0..20 {
        let case = composite_case(&mut rng).unwrap();
        let err = case.max_relative_error(STEP).unwrap();
        assert!(err <= TOL, "composite: {err:e}");
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    use rand::Rng;
    let mut rng = seeded_rng(11);
    for _ in 0..10 {
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let wt = Tensor::new(&[4, 3], w).unwrap().with_grad();
        let xt = Tensor::new(&[3, 4], x).unwrap();

        let losses = |g: &mut Graph<f64>| {
            let wi = g.leaf(&wt);
            let xi = g.constant(&xt);
            let y = g.matmul(wi, xi).unwrap();
            let t = g.tanh(y).unwrap();
            let l1 = g.mean(t, None).unwrap();
            let e = g.exp(wi).unwrap();
            let l2 = g.mean(e, None).unwrap();
            (wi, l1, l2)
        };
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let (wi, l1, l2) = losses(&mut g);
            let l = match which {
                1 => l1,
                2 => l2,
                _ => {
                    let s1 = g.scale(l1, a).unwrap();
                    let s2 = g.scale(l2, b).unwrap();
                    g.add(s1, s2).unwrap()
                }
            };
            g.backward(l).unwrap().get(wi).unwrap().to_vec()
        };
        let (g1, g2, gc) = (grad_of(1), grad_of(2), grad_of(0));
        for i in 0..gc.len() {
            assert!((gc[i] - (a * g1[i] + b * g2[i])).abs() <= 1e-9);
        }
    }
}

#[test]
fn identical_graphs_are_bit_identical() {
    let run = || {
        let case = composite_case(&mut seeded_rng(99)).unwrap();
        let mut g = Graph::new();
        let ids: Vec<_> = case.inputs.iter().map(|t| g.leaf(&t.clone().with_grad())).collect();
        let a = g.linear(ids[0], ids[1], ids[2]).unwrap();
        let a = g.tanh(a).unwrap();
        let l = g.mean(a, None).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(l).to_vec(), grads.get(ids[1]).unwrap().to_vec())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), v2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
