use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stflow_core::flow::{
    affine_forward, affine_inverse, gaussian_logprob, squeeze, unsqueeze, ActNorm,
    ConditionalPrior, Coupling, Inv1x1, SplitPrior, HALF_LN_2PI, SCALE_SHIFT,
};
use stflow_core::verify::perturb_params;
use stflow_core::{Ctx, ParamStore};
use stflow_tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.sample::<f64, _>(rand_distr::StandardNormal))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Runs `f` on a fresh evaluation context.
fn eval<T>(store: &ParamStore, f: impl FnOnce(&mut Ctx) -> T) -> T {
    let mut ctx = Ctx::eval(store);
    f(&mut ctx)
}

fn coupling_setup(c: usize, hc: usize, seed: u64) -> (Coupling, ParamStore) {
    let mut store = ParamStore::new();
    let layer = Coupling::new(&mut store, "cp", c, hc, 8, &mut rng(seed)).unwrap();
    (layer, store)
}

#[test]
fn zero_initialized_coupling_scales_first_half_by_sigmoid_two() {
    let (layer, store) = coupling_setup(4, 3, 1);
    let mut r = rng(2);
    let z = normal(&[2, 4, 3, 3], &mut r);
    let h = normal(&[2, 3, 3, 3], &mut r);
    let (y, logdet) = eval(&store, |ctx| {
        let (zv, hv) = (ctx.constant(z.clone()), ctx.constant(h.clone()));
        let (y, ld) = layer.forward(ctx, zv, hv).unwrap();
        (ctx.value(y).clone(), ctx.value(ld).clone())
    });
    let s = sigmoid(SCALE_SHIFT);
    for n in 0..2 {
        for c in 0..4 {
            for p in 0..9 {
                let k = (n * 4 + c) * 9 + p;
                let expected = if c < 2 { s * z.data()[k] } else { z.data()[k] };
                assert!((y.data()[k] - expected).abs() < 1e-15);
            }
        }
    }
    let expected = 9.0 * 2.0 * s.ln();
    for &v in logdet.data() {
        assert!((v - expected).abs() < 1e-12);
    }
}

#[test]
fn forced_scale_and_shift() {
    let store = ParamStore::new();
    let mut ctx = Ctx::eval(&store);
    let z0 = ctx.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
    let log_s = ctx.constant(Tensor::full(&[1, 1, 1, 1], 3f64.ln()));
    let t = ctx.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let (y0, ld) = affine_forward(&mut ctx, z0, log_s, t).unwrap();
    assert!((ctx.value(y0).item() - 7.0).abs() < 1e-14);
    assert!((ctx.value(ld).item() - 3f64.ln()).abs() < 1e-15);
    let y = ctx.constant(Tensor::full(&[1, 1, 1, 1], 7.0));
    let back = affine_inverse(&mut ctx, y, log_s, t).unwrap();
    assert!((ctx.value(back).item() - 2.0).abs() < 1e-14);

    let zero = ctx.constant(Tensor::zeros(&[1, 1, 1, 1]));
    let y = ctx.constant(Tensor::full(&[1, 1, 1, 1], 6.0));
    let back = affine_inverse(&mut ctx, y, log_s, zero).unwrap();
    assert!((ctx.value(back).item() - 2.0).abs() < 1e-14);
}

#[test]
fn coupling_round_trip_with_random_parameters() {
    let (layer, mut store) = coupling_setup(4, 2, 3);
    perturb_params(&mut store, 0.2, 4);
    let mut r = rng(5);
    let z = normal(&[1, 4, 8, 8], &mut r);
    let h = normal(&[1, 2, 8, 8], &mut r);
    let back = eval(&store, |ctx| {
        let (zv, hv) = (ctx.constant(z.clone()), ctx.constant(h.clone()));
        let (y, _) = layer.forward(ctx, zv, hv).unwrap();
        let x = layer.inverse(ctx, y, hv).unwrap();
        ctx.value(x).clone()
    });
    assert!(back.max_abs_diff(&z) < 1e-10);
}

fn inv_parts(store: &mut ParamStore, w: &[f64], c: usize) -> Inv1x1 {
    // W = L·U with no pivoting for the small matrices used here.
    let m = DMatrix::from_row_slice(c, c, w);
    let lu = m.lu();
    assert!(lu.p().is_empty(), "test matrix needs pivoting");
    let (l, u) = (lu.l(), lu.u());
    Inv1x1::from_parts(
        store,
        "w",
        Tensor::from_fn(&[c, c], |k| if k / c == k % c { 1.0 } else { 0.0 }),
        Tensor::from_fn(&[c, c], |k| {
            if k / c > k % c {
                l[(k / c, k % c)]
            } else {
                0.0
            }
        }),
        Tensor::from_fn(&[c, c], |k| {
            if k / c < k % c {
                u[(k / c, k % c)]
            } else {
                0.0
            }
        }),
        Tensor::from_fn(&[c], |i| u[(i, i)].abs().ln()),
        Tensor::from_fn(&[c], |i| u[(i, i)].signum()),
    )
}

#[test]
fn identity_inv1x1() {
    let mut store = ParamStore::new();
    let layer = Inv1x1::identity(&mut store, "id", 3);
    let z = normal(&[2, 3, 2, 2], &mut rng(1));
    let (y, ld, back) = eval(&store, |ctx| {
        let zv = ctx.constant(z.clone());
        let (y, ld) = layer.forward(ctx, zv).unwrap();
        let back = layer.inverse(ctx, y).unwrap();
        (
            ctx.value(y).clone(),
            ctx.value(ld).clone(),
            ctx.value(back).clone(),
        )
    });
    assert_eq!(y.data(), z.data());
    assert!(ld.data().iter().all(|&v| v == 0.0));
    assert_eq!(back.data(), z.data());
}

#[test]
fn scalar_inv1x1_doubles_and_logs_four_ln_two() {
    let mut store = ParamStore::new();
    let layer = inv_parts(&mut store, &[2.0], 1);
    let z = normal(&[1, 1, 2, 2], &mut rng(9));
    let (y, ld) = eval(&store, |ctx| {
        let zv = ctx.constant(z.clone());
        let (y, ld) = layer.forward(ctx, zv).unwrap();
        (ctx.value(y).clone(), ctx.value(ld).clone())
    });
    for (a, b) in y.data().iter().zip(z.data()) {
        assert!((a - 2.0 * b).abs() < 1e-15);
    }
    // The Jacobian is 2·I₄.
    let brute = DMatrix::<f64>::from_diagonal_element(4, 4, 2.0)
        .determinant()
        .ln();
    let ld = ld.data()[0];
    assert!((ld - 4.0 * 2f64.ln()).abs() < 1e-12);
    assert!((ld - brute).abs() < 1e-12);
    let back = eval(&store, |ctx| {
        let yv = ctx.constant(y.clone());
        let x = layer.inverse(ctx, yv).unwrap();
        ctx.value(x).clone()
    });
    for (a, b) in back.data().iter().zip(y.data()) {
        assert!((a - b / 2.0).abs() < 1e-15);
    }
}

#[test]
fn random_inv1x1_logdet_matches_numeric_jacobian() {
    let mut store = ParamStore::new();
    let layer = Inv1x1::new(&mut store, "w", 4, &mut rng(12));
    perturb_params(&mut store, 0.1, 13);
    let z = normal(&[1, 4, 3, 3], &mut rng(14));
    let apply = |x: &Tensor| {
        eval(&store, |ctx| {
            let xv = ctx.constant(x.clone());
            let (y, ld) = layer.forward(ctx, xv).unwrap();
            (ctx.value(y).clone(), ctx.value(ld).data()[0])
        })
    };
    let (y, analytic) = apply(&z);
    let n = z.len();
    let eps = 1e-6;
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut p = z.clone();
        p.data_mut()[j] += eps;
        let mut m = z.clone();
        m.data_mut()[j] -= eps;
        let (yp, _) = apply(&p);
        let (ym, _) = apply(&m);
        for i in 0..n {
            jac[(i, j)] = (yp.data()[i] - ym.data()[i]) / (2.0 * eps);
        }
    }
    let numeric = jac.determinant().abs().ln();
    assert!((analytic - numeric).abs() < 1e-6, "{analytic} vs {numeric}");
    let back = eval(&store, |ctx| {
        let yv = ctx.constant(y.clone());
        let x = layer.inverse(ctx, yv).unwrap();
        ctx.value(x).clone()
    });
    assert!(back.max_abs_diff(&z) < 1e-10);
}

#[test]
fn squeeze_orders_each_block_row_major() {
    let store = ParamStore::new();
    let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let (y, back) = eval(&store, |ctx| {
        let xv = ctx.constant(x.clone());
        let y = squeeze(ctx, xv).unwrap();
        let back = unsqueeze(ctx, y).unwrap();
        (ctx.value(y).clone(), ctx.value(back).clone())
    });
    assert_eq!(y.shape(), &[1, 4, 1, 1]);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(back.data(), x.data());

    let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
    let y = eval(&store, |ctx| {
        let xv = ctx.constant(x.clone());
        let y = squeeze(ctx, xv).unwrap();
        ctx.value(y).clone()
    });
    assert_eq!(y.shape(), &[1, 4, 2, 2]);
    // Channel 0 holds the top-left element of every 2×2 block.
    assert_eq!(&y.data()[..4], &[0.0, 2.0, 8.0, 10.0]);
}

#[test]
fn gaussian_logprob_examples() {
    let mu = Tensor::from_fn(&[5], |i| i as f64 * 0.3);
    let zero = Tensor::zeros(&[5]);
    let lp = gaussian_logprob(&mu, &mu, &zero).unwrap();
    assert!((lp + 0.918_938_5 * 5.0).abs() < 1e-6);

    let sigma: f64 = 1.7;
    let ls = Tensor::full(&[1], sigma.ln());
    let m = Tensor::full(&[1], 0.4);
    let z = Tensor::full(&[1], 0.4 + sigma);
    let lp = gaussian_logprob(&z, &m, &ls).unwrap();
    assert!((lp - (-HALF_LN_2PI - sigma.ln() - 0.5)).abs() < 1e-12);

    // Trapezoid quadrature over [−8, 8].
    let n = 16_000;
    let dx = 16.0 / n as f64;
    let mut total = 0.0;
    for k in 0..=n {
        let x = Tensor::full(&[1], -8.0 + k as f64 * dx);
        let w = if k == 0 || k == n { 0.5 } else { 1.0 };
        total += w * gaussian_logprob(&x, &Tensor::zeros(&[1]), &Tensor::zeros(&[1]))
            .unwrap()
            .exp();
    }
    assert!((total * dx - 1.0).abs() < 1e-6);
}

#[test]
fn zero_initialized_priors_are_standard_normal() {
    let mut store = ParamStore::new();
    let split = SplitPrior::new(&mut store, "split", 4, 3, 8, &mut rng(1)).unwrap();
    let prior = ConditionalPrior::new(&mut store, "prior", 2, 3, 8, &mut rng(2));
    let mut r = rng(3);
    let z = normal(&[1, 4, 3, 3], &mut r);
    let h = normal(&[1, 3, 3, 3], &mut r);
    let z_last = normal(&[1, 2, 3, 3], &mut r);
    let (lp_split, lp_prior, z0, z1) = eval(&store, |ctx| {
        let (zv, hv) = (ctx.constant(z.clone()), ctx.constant(h.clone()));
        let (z0, z1, lp) = split.forward(ctx, zv, hv).unwrap();
        let zl = ctx.constant(z_last.clone());
        let lp2 = prior.logprob(ctx, zl, hv).unwrap();
        (
            ctx.value(lp).item(),
            ctx.value(lp2).item(),
            ctx.value(z0).clone(),
            ctx.value(z1).clone(),
        )
    });
    let std = |t: &Tensor| {
        gaussian_logprob(t, &Tensor::zeros(t.shape()), &Tensor::zeros(t.shape())).unwrap()
    };
    assert!((lp_split - std(&z1)).abs() < 1e-12);
    assert!((lp_prior - std(&z_last)).abs() < 1e-12);
    assert_eq!(z0.shape(), &[1, 2, 3, 3]);

    let mu = Tensor::zeros(&[1, 2, 3, 3]);
    let at_mean = eval(&store, |ctx| {
        let (m, hv) = (ctx.constant(mu.clone()), ctx.constant(h.clone()));
        let lp = prior.logprob(ctx, m, hv).unwrap();
        ctx.value(lp).item()
    });
    assert!((at_mean + HALF_LN_2PI * 18.0).abs() < 1e-9);
}

fn trained_split(seed: u64) -> (SplitPrior, ConditionalPrior, ParamStore) {
    let mut store = ParamStore::new();
    let split = SplitPrior::new(&mut store, "split", 4, 2, 6, &mut rng(seed)).unwrap();
    let prior = ConditionalPrior::new(&mut store, "prior", 2, 2, 6, &mut rng(seed + 1));
    perturb_params(&mut store, 0.3, seed + 2);
    (split, prior, store)
}

#[test]
fn split_prior_temperature_and_reconstruction() {
    let (split, prior, store) = trained_split(20);
    let mut r = rng(21);
    let z = normal(&[1, 4, 2, 2], &mut r);
    let h = normal(&[1, 2, 2, 2], &mut r);
    let (back, cold, mu) = eval(&store, |ctx| {
        let (zv, hv) = (ctx.constant(z.clone()), ctx.constant(h.clone()));
        let (z0, z1, _) = split.forward(ctx, zv, hv).unwrap();
        let back = split
            .inverse(ctx, z0, hv, Some(z1), 1.0, &mut rng(0))
            .unwrap();
        let cold = split.inverse(ctx, z0, hv, None, 0.0, &mut rng(0)).unwrap();
        let mu = prior.sample(ctx, hv, 0.0, &mut rng(0)).unwrap();
        let (pm, _) = prior.params(ctx, hv).unwrap();
        assert_eq!(ctx.value(mu).data(), ctx.value(pm).data());
        (
            ctx.value(back).clone(),
            ctx.value(cold).clone(),
            ctx.value(mu).clone(),
        )
    });
    assert_eq!(back.data(), z.data());
    assert_eq!(&cold.data()[..8], &z.data()[..8]);
    assert!(mu.is_finite());

    let draw = |seed| {
        eval(&store, |ctx| {
            let (zv, hv) = (ctx.constant(z.clone()), ctx.constant(h.clone()));
            let (z0, _, _) = split.forward(ctx, zv, hv).unwrap();
            let s = split
                .inverse(ctx, z0, hv, None, 1.0, &mut rng(seed))
                .unwrap();
            ctx.value(s).clone()
        })
    };
    assert_eq!(draw(5).data(), draw(5).data());
    assert_ne!(draw(5).data(), draw(6).data());
}

#[test]
fn split_prior_sample_spread_matches_sigma() {
    let (split, _, store) = trained_split(30);
    let mut r = rng(31);
    let z0 = normal(&[1, 2, 1, 1], &mut r);
    let h = normal(&[1, 2, 1, 1], &mut r);
    let n = 10_000;
    let (samples, sigma) = eval(&store, |ctx| {
        let z0v = ctx.constant(z0.repeat_batch(n).unwrap());
        let hv = ctx.constant(h.repeat_batch(n).unwrap());
        let s = split
            .inverse(ctx, z0v, hv, None, 1.0, &mut rng(32))
            .unwrap();
        // σ from the log-density curvature: log p(μ) − log p(μ + 1) = 1/(2σ²).
        let z0v = ctx.constant(z0.clone());
        let hv = ctx.constant(h.clone());
        let probe = |ctx: &mut Ctx, z1: Tensor| {
            let z1v = ctx.constant(z1);
            let full = ctx.g.concat(&[z0v, z1v], 1).unwrap();
            let (_, _, lp) = split.forward(ctx, full, hv).unwrap();
            ctx.value(lp).item()
        };
        let cold = split.inverse(ctx, z0v, hv, None, 0.0, &mut rng(0)).unwrap();
        let mu = ctx.value(cold).narrow(1, 2, 2).unwrap();
        let base = probe(ctx, mu.clone());
        let mut sig = Vec::new();
        for c in 0..2 {
            let mut shifted = mu.clone();
            shifted.data_mut()[c] += 1.0;
            let drop = base - probe(ctx, shifted);
            sig.push((0.5 / drop).sqrt());
        }
        (ctx.value(s).clone(), sig)
    });
    for c in 0..2 {
        let vals: Vec<f64> = (0..n).map(|i| samples.data()[i * 4 + 2 + c]).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(
            (sd / sigma[c] - 1.0).abs() < 0.03,
            "channel {c}: {sd} vs {}",
            sigma[c]
        );
    }
}

#[test]
fn actnorm_initialization_normalizes_channels() {
    let mut store = ParamStore::new();
    let layer = ActNorm::new(&mut store, "an", 3);
    let x = Tensor::from_fn(&[4, 3, 2, 2], |i| {
        ((i * 7) % 5) as f64 * (1 + (i / 4) % 3) as f64 + 2.0
    });
    let (y, updates) = eval(&store, |ctx| {
        let xv = ctx.constant(x.clone());
        let (y, _, updates) = layer.forward_init(ctx, xv).unwrap();
        (ctx.value(y).clone(), updates)
    });
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| (0..4).map(move |p| (n * 3 + c) * 4 + p))
            .map(|k| y.data()[k])
            .collect();
        let mean = vals.iter().sum::<f64>() / 16.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }
    for (id, v) in updates {
        store.set(id, v);
    }
    let (y2, ld) = eval(&store, |ctx| {
        let xv = ctx.constant(x.clone());
        let (y, ld) = layer.forward(ctx, xv).unwrap();
        (ctx.value(y).clone(), ctx.value(ld).item())
    });
    assert!(y2.max_abs_diff(&y) < 1e-12);
    let ls: f64 = store.get(layer.log_scale).data().iter().sum();
    assert!((ld - 4.0 * ls).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn layers_are_bijective(seed in 0u64..10_000, shape in prop::sample::select(vec![(2usize, 8usize), (4, 8), (4, 16)])) {
        let (c, size) = shape;
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let an = ActNorm::new(&mut store, "an", c);
        let w = Inv1x1::new(&mut store, "w", c, &mut r);
        let cp = Coupling::new(&mut store, "cp", c, 2, 6, &mut r).unwrap();
        perturb_params(&mut store, 0.2, seed + 1);
        let z = normal(&[1, c, size, size], &mut r);
        let h = normal(&[1, 2, size, size], &mut r);
        let errs = eval(&store, |ctx| {
            let (zv, hv) = (ctx.constant(z.clone()), ctx.constant(h.clone()));
            let (a, _) = an.forward(ctx, zv).unwrap();
            let a_back = an.inverse(ctx, a).unwrap();
            let (b, _) = w.forward(ctx, zv).unwrap();
            let b_back = w.inverse(ctx, b).unwrap();
            let (d, _) = cp.forward(ctx, zv, hv).unwrap();
            let d_back = cp.inverse(ctx, d, hv).unwrap();
            let sq = squeeze(ctx, zv).unwrap();
            let sq_back = unsqueeze(ctx, sq).unwrap();
            [a_back, b_back, d_back, sq_back].map(|v| ctx.value(v).max_abs_diff(&z))
        });
        for e in errs {
            prop_assert!(e < 1e-10, "round-trip error {e}");
        }
    }

    #[test]
    fn squeeze_preserves_values(seed in 0u64..1000, c in 1usize..4, half in 1usize..5) {
        let store = ParamStore::new();
        let x = normal(&[2, c, 2 * half, 2 * half], &mut rng(seed));
        let y = eval(&store, |ctx| {
            let xv = ctx.constant(x.clone());
            let y = squeeze(ctx, xv).unwrap();
            ctx.value(y).clone()
        });
        prop_assert_eq!(y.shape(), &[2, 4 * c, half, half]);
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }
}
