mod common;

use proptest::prelude::*;
use tdciv::diffmath::{grad_check, Adam, AdamConfig, DiffError, Shape, Tape, Tensor};

use common::{compose, composition_points};

#[test]
fn forward_examples() {
    let mut tape = Tape::new();
    let z = tape.scalar(0.0);
    let s = tape.sigmoid(z);
    let t = tape.tanh(z);
    assert_eq!(tape.value(s).item(), 0.5);
    assert_eq!(tape.value(t).item(), 0.0);
    let a = tape.leaf(Tensor::zeros(2, 3));
    let v = tape.leaf(Tensor::column(vec![1.0, -2.0, 3.5]));
    let p = tape.matmul(a, v).unwrap();
    assert_eq!(tape.value(p), &Tensor::zeros(2, 1));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.scalar(3.0);
    let sq = tape.square(x);
    assert_eq!(tape.backward(sq).unwrap().wrt(x).item(), 6.0);

    let mut tape = Tape::new();
    let x = tape.scalar(0.0);
    let s = tape.sigmoid(x);
    assert_eq!(tape.backward(s).unwrap().wrt(x).item(), 0.25);

    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::row(vec![1.0, 2.0]));
    let b = tape.leaf(Tensor::row(vec![3.0, 4.0]));
    let p = tape.mul(a, b).unwrap();
    let f = tape.sum(p);
    let g = tape.backward(f).unwrap();
    assert_eq!(g.wrt(a).data(), &[3.0, 4.0]);
    assert_eq!(g.wrt(b).data(), &[1.0, 2.0]);
}

#[test]
fn root_gradient_is_one_and_unreachable_nodes_are_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::row(vec![1.0, 2.0]));
    let unused = tape.leaf(Tensor::zeros(3, 2));
    let f = tape.sum(x);
    let g = tape.backward(f).unwrap();
    assert_eq!(g.wrt(f).item(), 1.0);
    assert_eq!(g.wrt(unused), Tensor::zeros(3, 2));
    assert!(g.get(unused).is_none());
}

#[test]
fn errors_name_the_operation() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(2, 3));
    let b = tape.leaf(Tensor::zeros(3, 2));
    match tape.add(a, b) {
        Err(DiffError::ShapeMismatch { op, lhs, rhs }) => {
            assert_eq!((op, lhs, rhs), ("add", Shape(2, 3), Shape(3, 2)));
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(tape.matmul(a, a), Err(DiffError::ShapeMismatch { op: "matmul", .. })));
    let neg = tape.leaf(Tensor::row(vec![1.0, -1.0]));
    assert!(matches!(tape.log(neg), Err(DiffError::Domain { op: "log", .. })));
    assert!(matches!(tape.backward(a), Err(DiffError::NonScalarRoot { shape: Shape(2, 3) })));
}

#[test]
fn grad_check_examples() {
    let cube = |tape: &mut Tape, v: &[tdciv::diffmath::Var]| -> Result<_, DiffError> {
        let sq = tape.square(v[0]);
        tape.mul(sq, v[0])
    };
    let r = grad_check(cube, &[Tensor::scalar(2.0)], 1e-5).unwrap();
    assert!(r.max_relative_error <= 1e-6, "{r:?}");
    assert_eq!(r.checked, 1);

    let abs = |tape: &mut Tape, v: &[tdciv::diffmath::Var]| Ok(tape.abs(v[0]));
    let r = grad_check(abs, &[Tensor::scalar(0.0)], 1e-5).unwrap();
    assert_eq!(r.non_smooth, vec![(0, 0)]);
    assert_eq!(r.checked, 0);

    let bad = |tape: &mut Tape, v: &[tdciv::diffmath::Var]| tape.log(v[0]);
    assert!(matches!(grad_check(bad, &[Tensor::scalar(1e-7)], 1e-5), Err(DiffError::Probe { tensor: 0, coordinate: 0 })));
    assert!(matches!(grad_check(abs, &[Tensor::scalar(1.0)], 0.0), Err(DiffError::BadPerturbation(_))));
}

#[test]
fn adam_examples() {
    let mut p = vec![Tensor::scalar(0.0)];
    let mut adam = Adam::new(AdamConfig::default(), &p);
    adam.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
    // m = 0.1, v = 0.001; bias-corrected m/sqrt(v) = 1.
    let want = -1e-3 * 1.0 / (1.0 + 1e-8);
    assert!((p[0].item() - want).abs() < 1e-15);
    assert_eq!(adam.step_count(), 1);

    let mut q = vec![Tensor::row(vec![0.5, -0.5])];
    let mut adam = Adam::new(AdamConfig::default(), &q);
    adam.step(&mut q, &[Tensor::zeros(1, 2)]).unwrap();
    assert_eq!(q[0].data(), &[0.5, -0.5]);
    assert_eq!(adam.step_count(), 1);

    let nan = adam.step(&mut q, &[Tensor::row(vec![f64::NAN, 0.0])]);
    assert!(matches!(nan, Err(DiffError::NonFiniteGradient { index: 0 })));
    assert!(nan.unwrap_err().to_string().contains("non-finite gradient"));
}

fn run_composition(ops: &[u8], reduce: u8, seed: u64) -> (f64, Vec<Tensor>) {
    let points = composition_points(seed);
    let mut tape = Tape::new();
    let vars: Vec<_> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = compose(&mut tape, &vars, ops, reduce).unwrap();
    let g = tape.backward(root).unwrap();
    (tape.value(root).item(), vars.iter().map(|v| g.wrt(*v)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn random_compositions_match_finite_differences(
        ops in prop::collection::vec(0u8..16, 1..9),
        reduce in 0u8..3,
        seed in 0u64..10_000,
    ) {
        let f = |tape: &mut Tape, v: &[tdciv::diffmath::Var]| compose(tape, v, &ops, reduce);
        let r = grad_check(f, &composition_points(seed), 1e-5).unwrap();
        prop_assert!(r.max_relative_error <= 1e-4, "{:?}", r);
    }

    #[test]
    fn backward_is_linear_in_the_root(
        ops in prop::collection::vec(0u8..16, 1..9),
        reduce in 0u8..3,
        seed in 0u64..10_000,
        c in -4.0..4.0f64,
    ) {
        let points = composition_points(seed);
        let mut tape = Tape::new();
        let vars: Vec<_> = points.iter().map(|p| tape.leaf(p.clone())).collect();
        let root = compose(&mut tape, &vars, &ops, reduce).unwrap();
        let scaled = tape.scale(root, c);
        let g = tape.backward(root).unwrap();
        let gs = tape.backward(scaled).unwrap();
        for v in &vars {
            let (a, b) = (g.wrt(*v), gs.wrt(*v));
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((c * x - y).abs() <= 1e-12 * (1.0 + (c * x).abs()));
            }
        }
    }

    #[test]
    fn evaluation_is_bit_deterministic(
        ops in prop::collection::vec(0u8..16, 1..9),
        reduce in 0u8..3,
        seed in 0u64..10_000,
    ) {
        let a = run_composition(&ops, reduce, seed);
        let b = run_composition(&ops, reduce, seed);
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert_eq!(a.1, b.1);
    }
}
