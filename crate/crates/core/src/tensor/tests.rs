use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    out
}

#[test]
fn identity_matmul_returns_operand() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 5], &mut rng);
    let tape = Tape::new();
    let out = tape.constant(Tensor::eye(3)).matmul(tape.constant(a.clone())).unwrap();
    assert_eq!(out.value(), a);
}

#[test]
fn adding_zero_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[4, 3], &mut rng);
    let tape = Tape::new();
    let out = tape.constant(x.clone()).add(tape.constant(Tensor::zeros([4, 3]))).unwrap();
    assert_eq!(out.value(), x);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 3], &mut rng);
    let b = random(&[3, 2], &mut rng);
    let tape = Tape::new();
    let out = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
    let expected = naive_matmul(&a, &b);
    for (x, y) in out.value().data().iter().zip(&expected) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn batched_transposed_matmul_matches_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // a^T b per batch, with a: [2, 4, 3] and b: [2, 4, 5]
    let a = random(&[2, 4, 3], &mut rng);
    let b = random(&[2, 4, 5], &mut rng);
    let tape = Tape::new();
    let out = tape.constant(a.clone()).matmul_tn(tape.constant(b.clone())).unwrap().value();
    assert_eq!(out.shape(), &[2, 3, 5]);
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|p| a.at(&[bi, p, i]) * b.at(&[bi, p, j])).sum();
                assert!((out.at(&[bi, i, j]) - want).abs() < 1e-12);
            }
        }
    }
    // a b^T with a shared right operand
    let c = random(&[5, 3], &mut rng);
    let out = tape.constant(a.clone()).matmul_nt(tape.constant(c.clone())).unwrap().value();
    assert_eq!(out.shape(), &[2, 4, 5]);
    for bi in 0..2 {
        for i in 0..4 {
            for j in 0..5 {
                let want: f64 = (0..3).map(|p| a.at(&[bi, i, p]) * c.at(&[j, p])).sum();
                assert!((out.at(&[bi, i, j]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    match a.matmul(b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let c = tape.constant(Tensor::zeros([4]));
    assert!(matches!(a.add(c), Err(Error::Shape { .. })));
    let d = tape.constant(Tensor::zeros([2, 2]));
    assert!(matches!(Var::concat(&[a, d], 0), Err(Error::Shape { .. })));
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let s = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0])).softmax(0).unwrap().value();
    for &v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let s = tape.constant(Tensor::vector(vec![1000.0, 0.0])).softmax(0).unwrap().value();
    assert!((s.data()[0] - 1.0).abs() < 1e-12);
    assert!(s.data()[1].abs() < 1e-12);
    // reference computed at 40 significant digits
    let s = tape.constant(Tensor::vector(vec![0.5, 1.5, -0.3])).softmax(0).unwrap().value();
    let want = [0.239_945_630_667_166_03, 0.652_239_847_660_702_8, 0.107_814_521_672_131_15];
    for (v, w) in s.data().iter().zip(want) {
        assert!((v - w).abs() < 1e-15, "{v} vs {w}");
    }
}

#[test]
fn softmax_rejects_non_finite() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, f64::NAN]));
    assert!(matches!(x.softmax(0), Err(Error::NonFinite { index: 1, .. })));
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let ones = tape.constant(Tensor::full([3], 1.0));
    let zeros = tape.constant(Tensor::zeros([3]));
    let out = tape.constant(Tensor::full([1, 3], 7.5)).layer_norm(ones, zeros, 1e-5).unwrap().value();
    assert!(out.data().iter().all(|v| v.abs() < 1e-12));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 3], &mut rng);
    let bias = Tensor::vector(vec![0.3, -0.1, 2.0]);
    let out = tape.constant(x.clone()).layer_norm(zeros, tape.constant(bias.clone()), 1e-5).unwrap().value();
    for r in 0..2 {
        for k in 0..3 {
            assert_eq!(out.at(&[r, k]), bias.data()[k]);
        }
    }
}

#[test]
fn layer_norm_matches_two_pass_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 7;
    let x = random(&[1, d], &mut rng);
    let tape = Tape::new();
    let out = tape
        .constant(x.clone())
        .layer_norm(tape.constant(Tensor::full([d], 1.0)), tape.constant(Tensor::zeros([d])), 1e-5)
        .unwrap()
        .value();
    // two-pass oracle
    let row = x.data();
    let mean = row.iter().sum::<f64>() / d as f64;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    for k in 0..d {
        let want = (row[k] - mean) / (var + 1e-5).sqrt();
        assert!((out.data()[k] - want).abs() < 1e-10);
    }
    let m = out.data().iter().sum::<f64>() / d as f64;
    let v = out.data().iter().map(|o| (o - m).powi(2)).sum::<f64>() / d as f64;
    assert!(m.abs() < 1e-10);
    // eps shrinks the variance slightly below one
    assert!((v - var / (var + 1e-5)).abs() < 1e-10);
}

#[test]
fn layer_norm_rejects_single_feature() {
    let tape = Tape::new();
    let one = tape.constant(Tensor::full([1], 1.0));
    let x = tape.constant(Tensor::zeros([3, 1]));
    assert!(matches!(x.layer_norm(one, one, 1e-5), Err(Error::InvalidArgument { .. })));
}

#[test]
fn huber_examples() {
    let tape = Tape::new();
    let h = |d: f64| tape.constant(Tensor::vector(vec![d])).huber(1.0).unwrap().item();
    assert_eq!(h(0.0), 0.0);
    assert_eq!(h(0.5), 0.125);
    assert_eq!(h(2.0), 1.5);
    assert_eq!(h(-2.0), 1.5);
}

#[test]
fn backward_square_and_huber_at_zero() {
    let tape = Tape::new();
    let x = tape.var(Tensor::scalar(3.0));
    let y = x.mul(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).item(), 6.0);

    let tape = Tape::new();
    let r = tape.var(Tensor::vector(vec![0.0, 0.0]));
    let g = tape.backward(r.huber(1.0).unwrap()).unwrap();
    assert_eq!(g.wrt(r).data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.var(Tensor::zeros([2]));
    assert!(matches!(tape.backward(x), Err(Error::InvalidArgument { .. })));
}

#[test]
fn unreachable_leaves_get_zero_gradient() {
    let tape = Tape::new();
    let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
    let unused = tape.var(Tensor::vector(vec![5.0]));
    let g = tape.backward(x.sum()).unwrap();
    assert_eq!(g.wrt(unused).data(), &[0.0]);
    assert_eq!(g.wrt(x).data(), &[1.0, 1.0]);
}

#[test]
fn three_layer_composite_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pts = vec![
        random(&[2, 4], &mut rng),
        random(&[4, 5], &mut rng),
        random(&[5], &mut rng),
        random(&[5, 3], &mut rng),
        random(&[3, 1], &mut rng),
    ];
    let report = grad_check_multi(
        |_, v| {
            let h = v[0].matmul(v[1])?.add(v[2])?.gelu();
            let h = h.matmul(v[3])?.tanh();
            Ok(h.matmul(v[4])?.square().mean())
        },
        &pts,
        1e-6,
    )
    .unwrap();
    assert!(report.flagged.is_empty());
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn grad_check_linear_is_exact() {
    let w = Tensor::vector(vec![0.5, -2.0, 3.0]);
    let report = grad_check(|tape, x| Ok(x.mul(tape.constant(w.clone()))?.sum()), &Tensor::vector(vec![1.0, 2.0, 3.0]), 1e-6).unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn grad_check_softmax_cross_entropy() {
    let target = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
    let logits = Tensor::from_rows(&[vec![0.2, -1.0, 0.7], vec![1.5, 0.3, -0.4]]).unwrap();
    let report = grad_check(|tape, x| Ok(x.log_softmax(1)?.mul(tape.constant(target.clone()))?.sum().neg()), &logits, 1e-6).unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn grad_check_flags_relu_kink() {
    let report = grad_check(|_, x| Ok(x.relu().sum()), &Tensor::vector(vec![0.0, 0.7, -0.4]), 1e-6).unwrap();
    assert_eq!(report.flagged, vec![0]);
    assert!(report.max_rel_error < 1e-8);
}

#[test]
fn grad_check_reports_non_finite_coordinate() {
    let err = grad_check(|_, x| Ok(x.log().sum()), &Tensor::vector(vec![1.0, 1e-9]), 1e-6).unwrap_err();
    assert!(matches!(err, Error::NonFinite { index: 1, .. }));
}

/// Every differentiable primitive at 10 random points.
#[test]
fn every_primitive_passes_grad_check() {
    fn run<F>(name: &str, shapes: &[Vec<usize>], f: F, rng: &mut ChaCha8Rng)
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> crate::Result<Var<'t>>,
    {
        for _ in 0..10 {
            let pts: Vec<Tensor> = shapes.iter().map(|s| random(s, rng)).collect();
            let r = grad_check_multi(&f, &pts, 1e-6).unwrap();
            assert!(r.max_rel_error < 1e-5, "{name}: {r:?}");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // weight every output by a fixed pattern so the scalar depends on all entries
    fn probe<'t>(v: Var<'t>) -> crate::Result<Var<'t>> {
        let n: usize = v.shape().iter().product();
        let pattern: Vec<f64> = (0..n).map(|i| 0.3 + (i as f64 * 0.7).sin()).collect();
        let p = v.tape().constant(Tensor::new(v.shape(), pattern)?);
        Ok(v.mul(p)?.sum())
    }
    run("matmul", &[vec![3, 4], vec![4, 2]], |_, v| probe(v[0].matmul(v[1])?), &mut rng);
    run("matmul_batched", &[vec![2, 3, 4], vec![2, 2, 4]], |_, v| probe(v[0].matmul_nt(v[1])?), &mut rng);
    run(
        "matmul_tn",
        &[vec![2, 4, 3], vec![4, 2]],
        |_, v| probe(v[0].matmul_tn(v[1].reshape(&[1, 4, 2])?.index_select(0, &[0, 0])?)?),
        &mut rng,
    );
    run("add", &[vec![2, 3], vec![3]], |_, v| probe(v[0].add(v[1])?), &mut rng);
    run("sub", &[vec![2, 1], vec![1, 3]], |_, v| probe(v[0].sub(v[1])?), &mut rng);
    run("mul", &[vec![2, 3], vec![2, 1]], |_, v| probe(v[0].mul(v[1])?), &mut rng);
    run("div", &[vec![2, 3], vec![3]], |_, v| probe(v[0].div(v[1].square().add_scalar(0.5))?), &mut rng);
    run("scale", &[vec![4]], |_, v| probe(v[0].scale(-1.7)), &mut rng);
    run("exp", &[vec![4]], |_, v| probe(v[0].exp()), &mut rng);
    run("log", &[vec![4]], |_, v| probe(v[0].square().add_scalar(0.1).log()), &mut rng);
    run("sqrt", &[vec![4]], |_, v| probe(v[0].square().add_scalar(0.2).sqrt()), &mut rng);
    run("tanh", &[vec![4]], |_, v| probe(v[0].tanh()), &mut rng);
    run("gelu", &[vec![5]], |_, v| probe(v[0].scale(3.0).gelu()), &mut rng);
    run("sum", &[vec![3, 2]], |_, v| Ok(v[0].sum().square()), &mut rng);
    run("mean", &[vec![3, 2]], |_, v| Ok(v[0].mean().square()), &mut rng);
    run("sum_axis", &[vec![2, 3, 2]], |_, v| probe(v[0].sum_axis(1)?), &mut rng);
    run("softmax", &[vec![2, 4]], |_, v| probe(v[0].scale(2.0).softmax(1)?), &mut rng);
    run("softmax_axis0", &[vec![3, 2]], |_, v| probe(v[0].softmax(0)?), &mut rng);
    run("log_softmax", &[vec![2, 4]], |_, v| probe(v[0].log_softmax(1)?), &mut rng);
    run("layer_norm", &[vec![2, 5], vec![5], vec![5]], |_, v| probe(v[0].layer_norm(v[1], v[2], 1e-5)?), &mut rng);
    run("huber", &[vec![6]], |_, v| v[0].scale(2.0).huber(1.0), &mut rng);
    run("concat", &[vec![2, 2], vec![2, 3]], |_, v| probe(Var::concat(&[v[0], v[1]], 1)?), &mut rng);
    run("slice", &[vec![3, 4]], |_, v| probe(v[0].slice(1, 1, 2)?), &mut rng);
    run("reshape", &[vec![2, 3]], |_, v| probe(v[0].reshape(&[3, 2])?), &mut rng);
    run("permute", &[vec![2, 3, 4]], |_, v| probe(v[0].permute(&[2, 0, 1])?), &mut rng);
    run("transpose", &[vec![2, 3]], |_, v| probe(v[0].transpose()?), &mut rng);
    run("index_select", &[vec![3, 2]], |_, v| probe(v[0].index_select(0, &[2, 0, 2])?), &mut rng);
    run("norm_last", &[vec![3, 3]], |_, v| probe(v[0].norm_last()?), &mut rng);
}

#[test]
fn adjoint_is_linear_over_subgraphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xv = random(&[3, 3], &mut rng);
    fn f<'t>(x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let a = x.matmul(x).unwrap().tanh().sum();
        let b = x.softmax(1).unwrap().square().mean();
        (a, b)
    }
    let grad_of = |which: u8| {
        let tape = Tape::new();
        let x = tape.var(xv.clone());
        let (a, b) = f(x);
        let out = match which {
            0 => a,
            1 => b,
            _ => a.add(b).unwrap(),
        };
        tape.backward(out).unwrap().wrt(x)
    };
    let (ga, gb, gab) = (grad_of(0), grad_of(1), grad_of(2));
    for ((a, b), ab) in ga.data().iter().zip(gb.data()).zip(gab.data()) {
        assert!((a + b - ab).abs() < 1e-14);
    }
}

#[test]
fn identical_inputs_give_bit_identical_gradients() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&[4, 6], &mut rng);
        let w = random(&[6, 3], &mut rng);
        let tape = Tape::new();
        let (xv, wv) = (tape.var(x), tape.var(w));
        let y = xv.matmul(wv).unwrap().gelu().softmax(1).unwrap().log().mean();
        let g = tape.backward(y).unwrap();
        (y.item().to_bits(), g.wrt(wv).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn apply_primitive_dispatches_by_kind() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::eye(2));
    let b = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let out = apply_primitive(&tape, &Primitive::MatMul, &[a, b]).unwrap();
    assert_eq!(out.value(), b.value());
    let s = apply_primitive(&tape, &Primitive::Sum, &[b]).unwrap();
    assert_eq!(s.item(), 10.0);
    let t = apply_primitive(&tape, &Primitive::Transpose, &[b]).unwrap();
    assert_eq!(t.value().at(&[0, 1]), 3.0);
    assert!(apply_primitive(&tape, &Primitive::Add, &[a]).is_err());
}

#[test]
fn only_recorded_nodes_with_tracked_inputs_require_grad() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::scalar(2.0));
    let v = tape.var(Tensor::scalar(1.0));
    assert!(!c.square().requires_grad());
    assert!(c.mul(v).unwrap().requires_grad());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 12), axis in 0usize..2) {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], values).unwrap());
        let s = x.softmax(axis).unwrap().sum_axis(axis).unwrap().value();
        for v in s.data() {
            prop_assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_json_round_trip(values in prop::collection::vec(-1e6f64..1e6, 6)) {
        let t = Tensor::new(vec![2, 3], values).unwrap();
        let back: Tensor = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        prop_assert_eq!(back, t);
    }
}
