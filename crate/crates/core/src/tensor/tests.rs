use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Weights the output by fixed random coefficients so every output coordinate
/// contributes a distinct gradient.
fn weighted_sum(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y), 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn softplus_at_zero_is_ln2() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.softplus(x);
    assert!((g.value(y).item() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn identity_matmul_returns_operand() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let i = g.constant(Tensor::eye(2));
    let m = rand_tensor(&mut rng, &[2, 5], 3.0);
    let mm = g.constant(m.clone());
    let y = g.matmul(i, mm).unwrap();
    assert_eq!(g.value(y), &m);
}

#[test]
fn layernorm_of_constant_row_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![5.0, 5.0, 5.0]));
    let s = g.constant(Tensor::full(vec![3], 1.0));
    let b = g.constant(Tensor::zeros(vec![3]));
    let y = g.layer_norm(x, s, b).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn causal_conv_one_step_delay() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
    let k = g.constant(Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap());
    let y = g.causal_conv(x, k).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0]);
}

#[test]
fn backward_square() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 6.0);
}

#[test]
fn backward_softplus_at_zero() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(0.0));
    let y = g.softplus(x);
    g.backward(y).unwrap();
    assert!((g.grad(x).unwrap().item() - 0.5).abs() < 1e-15);
}

#[test]
fn backward_accumulates_until_reset() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 12.0);
    g.reset_grads();
    assert!(g.grad(x).is_none());
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 6.0);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
    let y = g.exp(x);
    assert!(matches!(g.backward(y), Err(Error::Contract(_))));
}

#[test]
fn shape_mismatch_names_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 4]));
    match g.matmul(a, b) {
        Err(Error::Dimension { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2, 3]") && detail.contains("[2, 4]"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(g.add(a, b), Err(Error::Dimension { op: "add", .. })));
}

#[test]
fn layernorm_rejects_rank0() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(1.0));
    let s = g.constant(Tensor::scalar(1.0));
    assert!(matches!(g.layer_norm(x, s, s), Err(Error::InvalidInput { op: "layernorm", .. })));
}

#[test]
fn zero_extent_tensor_rejected() {
    assert!(matches!(Tensor::new(vec![2, 0], vec![]), Err(Error::InvalidInput { .. })));
    assert!(matches!(Tensor::new(vec![2, 2], vec![1.0]), Err(Error::Dimension { .. })));
}

#[test]
fn apply_dispatches_by_kind() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
    let y = g.apply(OpKind::Add, &[a, b]).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 6.0]);
    assert!(matches!(g.apply(OpKind::Exp, &[a, b]), Err(Error::Contract(_))));
    let c = g.apply(OpKind::Concat { axis: 0 }, &[a, b]).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn fd_check_linear_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = rand_tensor(&mut rng, &[4, 3], 1.0);
    let x = rand_tensor(&mut rng, &[5, 4], 1.0);
    let report = finite_diff_check(
        |g, p| {
            let xc = g.constant(x.clone());
            let y = g.matmul(xc, p[0])?;
            Ok(g.sum(y))
        },
        &[w],
        H,
        1e-10,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
    assert!(report.worst_error() <= 1e-10);
}

#[test]
fn fd_check_softplus_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = rand_tensor(&mut rng, &[4, 3], 1.0);
    let x = rand_tensor(&mut rng, &[5, 4], 1.0);
    let report = finite_diff_check(
        |g, p| {
            let xc = g.constant(x.clone());
            let y = g.matmul(xc, p[0])?;
            let z = g.softplus(y);
            Ok(g.sum(z))
        },
        &[w],
        H,
        TOL,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
}

#[test]
fn fd_check_flags_hard_argmax() {
    // Selecting the argmax at a tie: the analytic gradient follows one branch,
    // the central difference straddles the switch.
    let x = Tensor::vector(vec![1.0, 1.0]);
    let report = finite_diff_check(
        |g, p| {
            let v = g.value(p[0]).data();
            let idx = if v[1] > v[0] { 1 } else { 0 };
            let pick = g.gather(p[0], 0, &[idx])?;
            Ok(g.sum(pick))
        },
        &[x],
        H,
        TOL,
    )
    .unwrap();
    assert!(!report.pass);
    assert!(report.worst_error() > TOL);
}

#[test]
fn fd_check_reports_non_finite() {
    let x = Tensor::vector(vec![700.0]);
    let err = finite_diff_check(
        |g, p| {
            let e = g.exp(p[0]);
            let e2 = g.exp(e);
            Ok(g.sum(e2))
        },
        &[x],
        H,
        TOL,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Evaluation { .. }));
}

/// One closure per differentiable primitive; each gets random operands.
type Case = (&'static str, Vec<Vec<usize>>, fn(&mut Graph, &[NodeId]) -> Result<NodeId>);

fn primitive_cases() -> Vec<Case> {
    vec![
        ("add", vec![vec![3, 4], vec![4]], |g, p| g.add(p[0], p[1])),
        ("sub", vec![vec![2, 3, 4], vec![3, 4]], |g, p| g.sub(p[0], p[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |g, p| g.mul(p[0], p[1])),
        ("mul_self", vec![vec![5]], |g, p| g.mul(p[0], p[0])),
        ("scale", vec![vec![3, 2]], |g, p| Ok(g.scale(p[0], -1.7))),
        ("matmul", vec![vec![2, 3, 4], vec![4, 5]], |g, p| g.matmul(p[0], p[1])),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 2]], |g, p| g.matmul(p[0], p[1])),
        ("exp", vec![vec![3, 3]], |g, p| Ok(g.exp(p[0]))),
        ("softplus", vec![vec![3, 3]], |g, p| Ok(g.softplus(p[0]))),
        ("sigmoid", vec![vec![3, 3]], |g, p| Ok(g.sigmoid(p[0]))),
        ("silu", vec![vec![3, 3]], |g, p| Ok(g.silu(p[0]))),
        ("softmax", vec![vec![3, 5]], |g, p| Ok(g.softmax(p[0]))),
        ("layernorm", vec![vec![4, 6], vec![6], vec![6]], |g, p| g.layer_norm(p[0], p[1], p[2])),
        ("conv1d_causal_depthwise", vec![vec![2, 6, 3], vec![3, 3]], |g, p| g.causal_conv(p[0], p[1])),
        ("concat", vec![vec![2, 3], vec![2, 2]], |g, p| g.concat(&[p[0], p[1]], 1)),
        ("slice", vec![vec![3, 5, 2]], |g, p| g.slice(p[0], 1, 1, 3)),
        ("gather", vec![vec![3, 4]], |g, p| g.gather(p[0], 1, &[3, 0, 2, 1])),
        ("transpose", vec![vec![2, 3, 4]], |g, p| g.transpose(p[0], 0, 2)),
        ("reshape", vec![vec![2, 6]], |g, p| g.reshape(p[0], &[3, 4])),
        ("flatten", vec![vec![2, 3, 2]], |g, p| g.flatten(p[0], 1)),
        ("mean", vec![vec![3, 4]], |g, p| Ok(g.mean(p[0]))),
        ("sum", vec![vec![3, 4]], |g, p| Ok(g.sum(p[0]))),
        ("selective_scan", vec![vec![2, 4, 2], vec![2, 4, 2], vec![2, 3], vec![2, 4, 3], vec![2, 4, 3]], |g, p| {
            // Positive steps and strictly negative poles, as produced upstream.
            let delta = g.softplus(p[1]);
            let ea = g.exp(p[2]);
            let a = g.scale(ea, -1.0);
            g.selective_scan(p[0], delta, a, p[3], p[4])
        }),
    ]
}

#[test]
fn every_primitive_passes_gradient_check() {
    for (name, shapes, op) in primitive_cases() {
        for instance in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + instance);
            let params: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s, 1.0)).collect();
            let report = finite_diff_check(
                |g, p| {
                    let y = op(g, p)?;
                    weighted_sum(g, y, 77 + instance)
                },
                &params,
                H,
                TOL,
            )
            .unwrap();
            assert!(report.pass, "{name} instance {instance}: {report:?}");
        }
    }
}

#[test]
fn conv_output_ignores_future_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[7, 3], 1.0);
    let k = rand_tensor(&mut rng, &[3, 3], 1.0);
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let ki = g.constant(k.clone());
        let y = g.causal_conv(xi, ki).unwrap();
        g.value(y).clone()
    };
    let base = run(&x);
    for t in 0..7 {
        let mut xp = x.clone();
        for tp in t + 1..7 {
            for c in 0..3 {
                xp.set(&[tp, c], xp.get(&[tp, c]) + 10.0);
            }
        }
        let y = run(&xp);
        for tt in 0..=t {
            for c in 0..3 {
                assert_eq!(y.get(&[tt, c]), base.get(&[tt, c]));
            }
        }
    }
}

#[test]
fn forward_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[4, 8], 2.0);
    let w = rand_tensor(&mut rng, &[8, 8], 1.0);
    let run = || {
        let mut g = Graph::new();
        let xi = g.constant(x.clone());
        let wi = g.constant(w.clone());
        let y = g.matmul(xi, wi).unwrap();
        let s = g.softmax(y);
        let m = g.mean(s);
        g.value(m).item().to_bits()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    // With eps = 1e-5 the normalized variance is var/(var + eps); inputs are
    // drawn with spread large enough that the shortfall stays below 1e-6.
    #[test]
    fn layernorm_standardizes(vals in proptest::collection::vec(-100.0f64..100.0, 2..32)) {
        let n = vals.len();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        prop_assume!(var >= 10.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vals));
        let s = g.constant(Tensor::full(vec![n], 1.0));
        let b = g.constant(Tensor::zeros(vec![n]));
        let y = g.layer_norm(x, s, b).unwrap();
        let out = g.value(y).data();
        let m = out.iter().sum::<f64>() / n as f64;
        let v = out.iter().map(|o| (o - m).powi(2)).sum::<f64>() / n as f64;
        prop_assert!(m.abs() <= 1e-10);
        prop_assert!((v - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn transpose_twice_is_identity(a in 1usize..4, b in 1usize..4, c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64((a * 16 + b * 4 + c) as u64);
        let t = rand_tensor(&mut rng, &[a, b, c], 1.0);
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = g.transpose(x, 0, 2).unwrap();
        prop_assert_eq!(g.shape(y), &[c, b, a][..]);
        let z = g.transpose(y, 2, 0).unwrap();
        prop_assert_eq!(g.value(z), &t);
    }
}
