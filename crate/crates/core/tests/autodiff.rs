use proptest::prelude::*;
use speechstyle::autodiff::gradcheck::{self, DEFAULT_TOLERANCE};
use speechstyle::{Graph, Precision, Tensor};

#[test]
fn every_operator_passes_finite_differences() {
    for seed in [1, 2, 3] {
        for c in gradcheck::operator_suite(seed).unwrap() {
            assert!(
                c.report.passes(DEFAULT_TOLERANCE),
                "{} seed {seed}: {:?}",
                c.name,
                c.report
            );
        }
    }
}

fn build(g: &mut Graph, x: speechstyle::NodeId, which: usize) -> speechstyle::NodeId {
    match which {
        0 => {
            let s = g.square(x).unwrap();
            g.sum_all(s).unwrap()
        }
        _ => {
            let e = g.exp(x).unwrap();
            let r = g.relu(x).unwrap();
            let p = g.mul(e, r).unwrap();
            g.sum_all(p).unwrap()
        }
    }
}

proptest! {
    #[test]
    fn backward_is_linear(data in prop::collection::vec(-2.0f64..2.0, 6), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let x0 = Tensor::new(vec![2, 3], data).unwrap();
        let grad_of = |weights: (f64, f64)| {
            let mut g = Graph::new(Precision::High);
            let x = g.variable(x0.clone());
            let l1 = build(&mut g, x, 0);
            let l2 = build(&mut g, x, 1);
            let a = g.mul_scalar(l1, weights.0).unwrap();
            let b = g.mul_scalar(l2, weights.1).unwrap();
            let l = g.add(a, b).unwrap();
            g.backward(l).unwrap().get(x)
        };
        let combined = grad_of((alpha, beta));
        let g1 = grad_of((1.0, 0.0));
        let g2 = grad_of((0.0, 1.0));
        for i in 0..6 {
            let expect = alpha * g1.data()[i] + beta * g2.data()[i];
            prop_assert!((combined.data()[i] - expect).abs() <= 1e-10 * (1.0 + expect.abs()));
        }
    }
}

#[test]
fn reevaluation_is_bit_identical() {
    let mut g = Graph::new(Precision::High);
    let x = g.variable(Tensor::new(vec![6, 4, 2], (0..48).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
    let k = g.constant(Tensor::new(vec![3, 3, 2, 3], (0..54).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap());
    let c = g.conv2d(x, k).unwrap();
    let p = g.maxpool2d(c, 2, 2).unwrap();
    let s = g.sum_all(p).unwrap();
    let before = g.value(s).clone();
    let x_val = g.value(x).clone();
    g.reevaluate(&[(x, x_val)]).unwrap();
    assert_eq!(g.value(s).data()[0].to_bits(), before.data()[0].to_bits());
}
