use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stflow_tensor::{
    finite_diff_grad, read_tensor, relative_error, write_tensor, DType, Graph, Tensor, TensorError,
    Unary, Var,
};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn eval_unary(u: Unary, x: f64) -> f64 {
    let mut g = Graph::no_grad();
    let v = g.constant(Tensor::scalar(x));
    let y = g.unary(u, v).unwrap();
    g.value(y).item()
}

#[test]
fn elementwise_examples() {
    assert_eq!(eval_unary(Unary::Sigmoid, 0.0), 0.5);
    assert_eq!(eval_unary(Unary::Tanh, 0.0), 0.0);
    let y = eval_unary(Unary::Exp, eval_unary(Unary::Log, 2.5));
    assert!((y - 2.5).abs() < 1e-12);
}

#[test]
fn elementwise_errors() {
    let mut g = Graph::no_grad();
    let x = g.constant(t(&[2], &[1.0, -1.0]));
    assert!(matches!(g.log(x), Err(TensorError::LogDomain(_))));
    let zero = g.constant(t(&[2], &[0.0, 1.0]));
    assert!(matches!(g.div(x, zero), Err(TensorError::NonFinite { .. })));
    let wrong = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    assert!(matches!(
        g.add(x, wrong),
        Err(TensorError::ShapeMismatch { .. })
    ));
}

#[test]
fn broadcast_only_over_singleton_dims() {
    let mut g = Graph::no_grad();
    let a = g.constant(Tensor::zeros(&[2, 3, 2, 2]));
    let per_channel = g.constant(t(&[3, 1, 1], &[1.0, 2.0, 3.0]));
    let y = g.add(a, per_channel).unwrap();
    assert_eq!(g.value(y).data()[4], 2.0);
    let bad = g.constant(Tensor::zeros(&[2, 1, 1]));
    assert!(g.add(a, bad).is_err());
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::no_grad();
    // zero input -> bias everywhere
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.constant(Tensor::from_fn(&[3, 2, 3, 3], |i| i as f64 * 0.1));
    let b = g.constant(t(&[3], &[0.5, -1.0, 2.0]));
    let y = g.conv2d(x, k, Some(b), 1, 1).unwrap();
    let yv = g.value(y);
    assert_eq!(yv.shape(), &[1, 3, 4, 4]);
    for c in 0..3 {
        let expected = [0.5, -1.0, 2.0][c];
        assert!(yv.data()[c * 16..(c + 1) * 16]
            .iter()
            .all(|&v| v == expected));
    }

    // 1×1 kernel [[2]]
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
    let k = g.constant(t(&[1, 1, 1, 1], &[2.0]));
    let b = g.constant(t(&[1], &[0.0]));
    let y = g.conv2d(x, k, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 6.0, 10.0, 14.0]);

    // 3×3 identity kernel with padding 1
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xv = random(&mut rng, &[1, 1, 5, 6], -1.0, 1.0);
    let x = g.constant(xv.clone());
    let mut kd = vec![0.0; 9];
    kd[4] = 1.0;
    let k = g.constant(t(&[1, 1, 3, 3], &kd));
    let y = g.conv2d(x, k, None, 1, 1).unwrap();
    assert_eq!(g.value(y), &xv);
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
        let xv = random(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
        let kv = random(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
        let mut g = Graph::no_grad();
        let x = g.constant(xv.clone());
        let k = g.constant(kv.clone());
        let y = g.conv2d(x, k, None, stride, pad).unwrap();
        let yv = g.value(y);
        let (_, _, ho, wo) = yv.dims4().unwrap();
        for n in 0..2 {
            for co in 0..4 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 5 {
                                        continue;
                                    }
                                    s += xv.data()
                                        [((n * 3 + ci) * 5 + iy as usize) * 5 + ix as usize]
                                        * kv.data()[((co * 3 + ci) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                        let got = yv.data()[((n * 4 + co) * ho + oy) * wo + ox];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn conv2d_rejects_non_integral_output() {
    let mut g = Graph::no_grad();
    let x = g.constant(Tensor::zeros(&[1, 1, 4, 4]));
    let k = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(g.conv2d(x, k, None, 2, 0).is_err());
    let even = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(g.conv2d(x, even, None, 1, 0).is_err());
}

#[test]
fn backward_examples() {
    // sum(2x)
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
    let y = g.mul_scalar(x, 2.0).unwrap();
    let l = g.sum(y).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    // non-leaf grads are discarded
    assert!(grads.get(y).is_none());
    // a second backward is refused
    assert!(matches!(g.backward(l), Err(TensorError::BackwardTwice)));

    // sum(x⊙x)
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[1.0, -2.0, 3.0]), true);
    let y = g.mul(x, x).unwrap();
    let l = g.sum(y).unwrap();
    assert_eq!(
        g.backward(l).unwrap().get(x).unwrap().data(),
        &[2.0, -4.0, 6.0]
    );

    // sum(sigmoid(x)) at 0
    let mut g = Graph::new();
    let x = g.leaf(t(&[1], &[0.0]), true);
    let y = g.sigmoid(x).unwrap();
    let l = g.sum(y).unwrap();
    assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[0.25]);

    // non-scalar loss
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[0.0, 1.0]), true);
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn finite_diff_examples() {
    let sq = |x: &Tensor| Ok(x.data().iter().map(|v| v * v).sum());
    let g = finite_diff_grad(sq, &t(&[1], &[3.0]), 1e-5).unwrap();
    assert!((g.data()[0] - 6.0).abs() < 1e-6);
    let ex = |x: &Tensor| Ok(x.data().iter().map(|v| v.exp()).sum());
    let g = finite_diff_grad(ex, &t(&[1], &[0.0]), 1e-5).unwrap();
    assert!((g.data()[0] - 1.0).abs() < 1e-6);
    let bad = |_: &Tensor| Ok(f64::NAN);
    assert!(finite_diff_grad(bad, &t(&[1], &[0.0]), 1e-5).is_err());
}

#[test]
fn concat_split_examples() {
    let mut g = Graph::no_grad();
    let x = g.constant(t(&[1, 4, 1, 1], &[1.0, 2.0, 3.0, 4.0]));
    let (a, b) = g.split(x, 1, 2).unwrap();
    assert_eq!(g.value(a).data(), &[1.0, 2.0]);
    assert_eq!(g.value(b).data(), &[3.0, 4.0]);
    let back = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.value(back), g.value(x));

    let y = g.constant(t(&[1, 3, 1, 1], &[1.0, 2.0, 3.0]));
    let (a, b) = g.split(y, 1, 2).unwrap();
    assert_eq!(g.value(a).shape()[1], 2);
    assert_eq!(g.value(b).shape()[1], 1);
    assert!(g.split(y, 1, 3).is_err());
}

#[test]
fn squeeze_examples() {
    let mut g = Graph::no_grad();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let s = g.space_to_depth(x).unwrap();
    assert_eq!(g.value(s).shape(), &[1, 4, 1, 1]);
    assert_eq!(g.value(s).data(), &[1.0, 2.0, 3.0, 4.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xv = random(&mut rng, &[2, 3, 4, 6], -1.0, 1.0);
    let x = g.constant(xv.clone());
    let s = g.space_to_depth(x).unwrap();
    assert_eq!(g.value(s).shape(), &[2, 12, 2, 3]);
    let u = g.depth_to_space(s).unwrap();
    assert_eq!(g.value(u), &xv);

    let odd = g.constant(Tensor::zeros(&[1, 1, 3, 2]));
    assert!(g.space_to_depth(odd).is_err());
}

/// Compares tape gradients with central differences for a scalar function
/// built from `build`, over every input leaf.
fn check_grad(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = build(&mut g, &vars).unwrap();
    let loss = g.sum(out).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap();
        let f = |probe: &Tensor| {
            let mut g = Graph::no_grad();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| g.constant(if j == k { probe.clone() } else { t.clone() }))
                .collect();
            let out = build(&mut g, &vars)?;
            Ok(g.value(out).sum())
        };
        let numeric = finite_diff_grad(f, x, 1e-5).unwrap();
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            worst = worst.max(relative_error(*a, *n, 1e-3));
        }
    }
    worst
}

#[test]
fn every_differentiable_op_matches_finite_differences() {
    type Build = fn(&mut Graph, &[Var]) -> Result<Var, TensorError>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v| {
            g.add(v[0], v[1])
        }),
        ("sub_bcast", vec![vec![2, 3, 2], vec![3, 1]], |g, v| {
            g.sub(v[0], v[1])
        }),
        ("mul_bcast", vec![vec![2, 3, 2], vec![3, 1]], |g, v| {
            g.mul(v[0], v[1])
        }),
        ("div", vec![vec![2, 3], vec![2, 3]], |g, v| {
            let d = g.exp(v[1])?;
            g.div(v[0], d)
        }),
        ("exp", vec![vec![4]], |g, v| g.exp(v[0])),
        ("log", vec![vec![4]], |g, v| {
            let p = g.exp(v[0])?;
            let p = g.add_scalar(p, 0.5)?;
            g.log(p)
        }),
        ("tanh", vec![vec![4]], |g, v| g.tanh(v[0])),
        ("sigmoid", vec![vec![4]], |g, v| g.sigmoid(v[0])),
        ("log_sigmoid", vec![vec![4]], |g, v| g.log_sigmoid(v[0])),
        ("relu_sq", vec![vec![6]], |g, v| {
            let r = g.relu(v[0])?;
            g.mul(r, r)
        }),
        ("neg", vec![vec![3]], |g, v| {
            let n = g.neg(v[0])?;
            g.mul(n, v[0])
        }),
        (
            "conv2d",
            vec![vec![2, 2, 4, 4], vec![3, 2, 3, 3], vec![3]],
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                g.mul(y, y)
            },
        ),
        (
            "conv2d_strided",
            vec![vec![1, 2, 5, 5], vec![2, 2, 3, 3]],
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, 2, 1)?;
                g.tanh(y)
            },
        ),
        (
            "conv1x1",
            vec![vec![2, 3, 2, 2], vec![2, 3, 1, 1]],
            |g, v| {
                let y = g.conv2d(v[0], v[1], None, 1, 0)?;
                g.mul(y, y)
            },
        ),
        (
            "concat_narrow",
            vec![vec![1, 2, 2, 2], vec![1, 3, 2, 2]],
            |g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                let n = g.narrow(c, 1, 1, 3)?;
                g.mul(n, n)
            },
        ),
        ("squeeze", vec![vec![1, 2, 4, 4]], |g, v| {
            let s = g.space_to_depth(v[0])?;
            let w = g.constant(Tensor::from_fn(&[1, 8, 2, 2], |i| i as f64));
            let s = g.mul(s, w)?;
            let u = g.depth_to_space(s)?;
            g.mul(u, v[0])
        }),
        ("avg_pool", vec![vec![1, 2, 4, 4]], |g, v| {
            let p = g.avg_pool(v[0], 2)?;
            g.mul(p, p)
        }),
        ("sum_per_example", vec![vec![3, 2, 2]], |g, v| {
            let s = g.sum_per_example(v[0])?;
            g.mul(s, s)
        }),
        ("matmul", vec![vec![2, 3], vec![3, 4]], |g, v| {
            let m = g.matmul(v[0], v[1])?;
            g.mul(m, m)
        }),
        ("reshape_mean", vec![vec![2, 6]], |g, v| {
            let r = g.reshape(v[0], &[3, 4])?;
            let r = g.mul(r, r)?;
            g.mean(r)
        }),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(20240);
    for (name, shapes, build) in cases {
        for trial in 0..20 {
            let inputs: Vec<Tensor> = shapes
                .iter()
                .map(|s| random(&mut rng, s, -1.5, 1.5))
                .collect();
            let err = check_grad(&inputs, build);
            assert!(err < 1e-4, "{name} trial {trial}: relative error {err:e}");
        }
    }
}

#[test]
fn reused_tensor_accumulates_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2], &[1.5, -0.5]), true);
    let a = g.mul_scalar(x, 3.0).unwrap();
    let b = g.add(a, x).unwrap();
    let l = g.sum(b).unwrap();
    assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[4.0, 4.0]);
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xv = random(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
    let kv = random(&mut rng, &[5, 3, 3, 3], -1.0, 1.0);
    let run = || {
        let mut g = Graph::no_grad();
        let x = g.constant(xv.clone());
        let k = g.constant(kv.clone());
        let y = g.conv2d(x, k, None, 1, 1).unwrap();
        let y = g.tanh(y).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn serialization_layout() {
    let x = t(&[2, 1], &[1.5, -2.0]);
    let mut buf = Vec::new();
    write_tensor(&mut buf, &x, DType::F64).unwrap();
    assert_eq!(buf.len(), 1 + 4 + 2 * 4 + 2 * 8);
    assert_eq!(buf[0], 1);
    assert_eq!(&buf[1..5], &2u32.to_le_bytes());
    let (back, dtype) = read_tensor(buf.as_slice()).unwrap();
    assert_eq!(dtype, DType::F64);
    assert_eq!(back, x);

    let mut buf = Vec::new();
    write_tensor(&mut buf, &x, DType::F32).unwrap();
    assert_eq!(buf[0], 0);
    let (back, _) = read_tensor(buf.as_slice()).unwrap();
    assert_eq!(back, x);

    let err = read_tensor(&buf[..buf.len() - 1]).unwrap_err();
    assert!(matches!(err, TensorError::Format { .. }), "{err}");
    let mut bad = buf.clone();
    bad[0] = 7;
    assert!(read_tensor(bad.as_slice()).is_err());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f64_serialization_round_trips(values in prop::collection::vec(-1e6f64..1e6, 1..40)) {
            let n = values.len();
            let x = Tensor::new(vec![n], values).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &x, DType::F64).unwrap();
            let (back, _) = read_tensor(buf.as_slice()).unwrap();
            prop_assert_eq!(back, x);
        }

        #[test]
        fn concat_then_split_is_identity(a in 1usize..4, b in 1usize..4, hw in 1usize..4) {
            let x = Tensor::from_fn(&[2, a + b, hw, hw], |i| i as f64);
            let (l, r) = x.split_at(1, a).unwrap();
            let back = Tensor::concat(&[&l, &r], 1).unwrap();
            prop_assert_eq!(back, x);
        }
    }
}
