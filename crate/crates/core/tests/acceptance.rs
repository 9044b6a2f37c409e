//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stflow_core::data::{self, GridSequence};
use stflow_core::metrics::{self, psnr, rmse, ssim};
use stflow_core::train::{evaluate, forecast_cases, ForecastSettings, Trainer};
use stflow_core::verify::perturb_params;
use stflow_core::{Checkpoint, Ctx, ModelConfig, RunConfig, StFlow};
use stflow_tensor::{Tensor, Var};

fn report(n: u32, name: &str, pass: bool, detail: String, elapsed: Duration) {
    let status = if pass { "PASS" } else { "FAIL" };
    println!(
        "criterion {n:>2} [{name}] {status}: {detail} ({:.1}s)",
        elapsed.as_secs_f64()
    );
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}

fn desk_model(levels: usize, steps: usize) -> ModelConfig {
    ModelConfig {
        levels,
        steps,
        ..ModelConfig::default()
    }
}

#[test]
fn criterion_01_bijectivity() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (i, (l, k)) in [(1, 2), (2, 2), (2, 4), (3, 4)].into_iter().enumerate() {
        let config = desk_model(l, k);
        let (model, mut store) = StFlow::build(&config, 100 + i as u64).unwrap();
        perturb_params(&mut store, 0.05, 7 + i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let context = vec![
            uniform(&[2, 1, 16, 16], &mut rng),
            uniform(&[2, 1, 16, 16], &mut rng),
        ];
        let x = uniform(&[2, 1, 16, 16], &mut rng);
        let memory = model.encode_context(&store, &context).unwrap();
        let (_, state) = model.forward_nll(&store, &x, &memory).unwrap();
        let back = model.reconstruct(&store, &state, &memory).unwrap();
        let err = back.max_abs_diff(&x);
        println!("  L={l} K={k}: max round-trip error {err:.3e}");
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-8 && elapsed < Duration::from_secs(10);
    report(
        1,
        "bijectivity",
        pass,
        format!("max error {worst:.3e} (< 1e-8)"),
        elapsed,
    );
    assert!(pass);
}

/// Final latent followed by factored latents of a single example.
fn flat_latent(
    model: &StFlow,
    store: &stflow_core::ParamStore,
    x: &Tensor,
    memory: &stflow_core::MemoryState,
) -> Vec<f64> {
    let (_, state) = model.forward_nll(store, x, memory).unwrap();
    let mut v = state.z.data().to_vec();
    for (_, t) in &state.factored {
        v.extend_from_slice(t.data());
    }
    v
}

#[test]
fn criterion_02_logdet_exactness() {
    let start = Instant::now();
    let config = ModelConfig {
        levels: 1,
        steps: 2,
        height: 4,
        width: 4,
        hidden_channels: 4,
        coupling_hidden: 8,
        gated_hidden: 4,
        gated_layers: 2,
        ..ModelConfig::default()
    };
    let (model, mut store) = StFlow::build(&config, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let context = vec![
        uniform(&[1, 1, 4, 4], &mut rng),
        uniform(&[1, 1, 4, 4], &mut rng),
    ];
    let x = uniform(&[1, 1, 4, 4], &mut rng);
    model.initialize_actnorm(&mut store, &context, &x).unwrap();
    perturb_params(&mut store, 0.1, 22);
    let memory = model.encode_context(&store, &context).unwrap();
    let (_, state) = model.forward_nll(&store, &x, &memory).unwrap();
    let analytic = state.logdet[0];

    let eps = 1e-6;
    let n = x.len();
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut plus = x.clone();
        plus.data_mut()[j] += eps;
        let mut minus = x.clone();
        minus.data_mut()[j] -= eps;
        let fp = flat_latent(&model, &store, &plus, &memory);
        let fm = flat_latent(&model, &store, &minus, &memory);
        assert_eq!(fp.len(), n);
        for i in 0..n {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * eps);
        }
    }
    let numeric = jac.determinant().abs().ln();
    let gap = (analytic - numeric).abs();
    let elapsed = start.elapsed();
    let pass = gap < 1e-4 && elapsed < Duration::from_secs(30);
    report(
        2,
        "log-det exactness",
        pass,
        format!("analytic {analytic:.10} vs log|det J| {numeric:.10}, gap {gap:.3e} (< 1e-4)"),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_03_gradient_integrity() {
    let start = Instant::now();
    let config = ModelConfig {
        levels: 1,
        steps: 2,
        height: 4,
        width: 4,
        hidden_channels: 2,
        coupling_hidden: 4,
        gated_hidden: 4,
        gated_layers: 2,
        ..ModelConfig::default()
    };
    let (model, mut store) = StFlow::build(&config, 31).unwrap();
    let trainable: usize = store
        .ids()
        .filter(|&id| store.is_trainable(id))
        .map(|id| store.get(id).len())
        .sum();
    assert!(trainable <= 5000, "{trainable} parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let context = vec![
        uniform(&[2, 1, 4, 4], &mut rng),
        uniform(&[2, 1, 4, 4], &mut rng),
    ];
    let target = uniform(&[2, 1, 4, 4], &mut rng);
    model
        .initialize_actnorm(&mut store, &context, &target)
        .unwrap();
    perturb_params(&mut store, 0.1, 32);

    let analytic = {
        let mut ctx = Ctx::train(&store);
        let frames: Vec<Var> = context.iter().map(|f| ctx.constant(f.clone())).collect();
        let t = ctx.constant(target.clone());
        let (nll, _) = model.nll_var(&mut ctx, &frames, t, None).unwrap();
        let loss = ctx.g.mean(nll).unwrap();
        ctx.param_grads(loss).unwrap()
    };
    let loss_at = |s: &stflow_core::ParamStore| {
        let memory = model.encode_context(s, &context).unwrap();
        let (nll, _) = model.forward_nll(s, &target, &memory).unwrap();
        nll.iter().sum::<f64>() / nll.len() as f64
    };
    let eps = 1e-5;
    let floor = 1e-4;
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for id in store
        .ids()
        .filter(|&id| store.is_trainable(id))
        .collect::<Vec<_>>()
    {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + eps;
            let up = loss_at(&probe);
            probe.get_mut(id).data_mut()[k] = orig - eps;
            let down = loss_at(&probe);
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[id.index()].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(120);
    report(
        3,
        "gradient integrity",
        pass,
        format!("{trainable} parameters, max relative error {worst:.3e} (< 1e-4, denominator floor {floor:e})"),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_04_density_normalization() {
    let start = Instant::now();
    let config = ModelConfig {
        levels: 1,
        steps: 2,
        in_channels: 2,
        height: 1,
        width: 1,
        hidden_channels: 4,
        coupling_hidden: 8,
        gated_hidden: 4,
        gated_layers: 2,
        squeeze: false,
        ..ModelConfig::default()
    };
    let (model, mut store) = StFlow::build(&config, 41).unwrap();
    perturb_params(&mut store, 0.3, 42);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let context = vec![
        uniform(&[1, 2, 1, 1], &mut rng),
        uniform(&[1, 2, 1, 1], &mut rng),
    ];
    let memory = model.encode_context(&store, &context).unwrap();

    let draws = 5000;
    let samples = model
        .sample(&store, &memory.repeat(draws).unwrap(), 1.0, &mut rng)
        .unwrap();
    let mut lo = [0.0; 2];
    let mut width = [0.0; 2];
    for d in 0..2 {
        let v: Vec<f64> = samples.data().iter().skip(d).step_by(2).copied().collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        lo[d] = mean - 6.0 * sd;
        width[d] = 12.0 * sd;
    }
    let grid = 300;
    let (dx, dy) = (width[0] / grid as f64, width[1] / grid as f64);
    let batch_memory = memory.repeat(grid).unwrap();
    let mut mass = 0.0;
    for i in 0..grid {
        let a = lo[0] + (i as f64 + 0.5) * dx;
        let x = Tensor::from_fn(&[grid, 2, 1, 1], |k| {
            if k % 2 == 0 {
                a
            } else {
                lo[1] + ((k / 2) as f64 + 0.5) * dy
            }
        });
        let (nll, _) = model.forward_nll(&store, &x, &batch_memory).unwrap();
        mass += nll.iter().map(|v| (-v).exp()).sum::<f64>() * dx * dy;
    }
    let elapsed = start.elapsed();
    let pass = (mass - 1.0).abs() < 0.01 && elapsed < Duration::from_secs(60);
    report(
        4,
        "density normalization",
        pass,
        format!("integral {mass:.6} (within 1% of 1)"),
        elapsed,
    );
    assert!(pass);
}

fn advection() -> Vec<GridSequence> {
    data::synth_advection(16, 16, 40, 8, (1.0, 0.0), 3).unwrap()
}

/// Desk-scale model used by the training criteria.
fn training_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.model.hidden_channels = 8;
    c.model.gated_hidden = 8;
    c.model.coupling_hidden = 16;
    c.model.gated_layers = 6;
    c.train.batch = 8;
    c.train.log_every = 50;
    c.train.val_every = 100;
    c.train.val_windows = 0;
    c.seed = 11;
    c
}

#[test]
fn criterion_05_learning() {
    let start = Instant::now();
    let mut config = training_config();
    config.optim.lr = 2e-4;
    assert_eq!((config.optim.beta1, config.optim.beta2), (0.9, 0.99));
    let mut trainer = Trainer::new(config, advection()).unwrap();
    trainer.run(500, None).unwrap();
    for rec in &trainer.log {
        println!("  {}", rec.to_line());
    }
    let curve = trainer.val_curve();
    let (first, last) = (curve[0], *curve.last().unwrap());
    assert_eq!((first.0, last.0), (0, 500));
    let reduction = (first.1 - last.1) / first.1.abs();
    let elapsed = start.elapsed();
    let pass = reduction >= 0.2 && elapsed < Duration::from_secs(600);
    report(
        5,
        "learning",
        pass,
        format!(
            "validation bpd {:.4} -> {:.4}, reduction {:.1}% (>= 20%)",
            first.1,
            last.1,
            100.0 * reduction
        ),
        elapsed,
    );
    assert!(pass);
}

/// Model trained for 2000 steps on deterministic advection, shared by the
/// forecast and extrapolation criteria.
fn forecaster() -> &'static (Trainer, Duration) {
    static CELL: OnceLock<(Trainer, Duration)> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let mut config = training_config();
        config.model.hidden_channels = 16;
        config.model.gated_hidden = 16;
        config.model.coupling_hidden = 32;
        config.model.jitter = 1e-3;
        config.optim.lr = 1e-3;
        config.train.val_every = 500;
        config.train.log_every = 250;
        config.train.val_windows = 32;
        let mut trainer = Trainer::new(config, advection()).unwrap();
        trainer.run(2000, None).unwrap();
        (trainer, start.elapsed())
    })
}

#[test]
fn criterion_06_forecast_skill() {
    let start = Instant::now();
    let (trainer, _) = forecaster();
    let test: Vec<_> = trainer
        .splits
        .test
        .iter()
        .map(|&i| trainer.windows[i])
        .collect();
    let cases = forecast_cases(&trainer.dataset, &test, 2, 10).unwrap();
    let ema = trainer.optim.ema_params(&trainer.params);
    let settings = ForecastSettings {
        steps: 10,
        trajectories: 4,
        temperature: 1.0,
        seed: 5,
    };
    let ev = evaluate(&trainer.model, &ema, &cases, trainer.meta(), &settings).unwrap();
    println!("  cases {}", ev.cases);
    println!("  flow rmse        {:.4?}", ev.flow.rmse);
    println!("  persistence rmse {:.4?}", ev.persistence.rmse);
    let skill = ev.flow.rmse[0] < ev.persistence.rmse[0];
    let monotone = ev.flow.rmse.windows(2).all(|w| w[1] >= w[0]);
    let elapsed = start.elapsed();
    let pass = skill && monotone && elapsed < Duration::from_secs(1800);
    report(
        6,
        "forecast skill",
        pass,
        format!(
            "step-1 rmse {:.4} vs persistence {:.4}, curve non-decreasing: {monotone}",
            ev.flow.rmse[0], ev.persistence.rmse[0]
        ),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_07_stochasticity() {
    let start = Instant::now();
    let dataset = data::synth_stochastic(16, 16, 24, 6, 0.02, 17).unwrap();
    let mut config = training_config();
    config.seed = 17;
    config.train.val_every = 0;
    let mut trainer = Trainer::new(config, dataset).unwrap();
    trainer.run(200, None).unwrap();
    let ema = trainer.optim.ema_params(&trainer.params);
    let w = trainer.windows[trainer.splits.test[0]];
    let case = &forecast_cases(&trainer.dataset, &[w], 2, 5).unwrap()[0];
    let frames = stflow_core::train::context_frames(&case.context).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let hot = trainer
        .model
        .rollout(&ema, &frames, 5, 4, 1.0, &mut rng)
        .unwrap();
    let cold = trainer
        .model
        .rollout(&ema, &frames, 5, 4, 0.0, &mut rng)
        .unwrap();
    let (_, hot_std) = metrics::ensemble_stats(&hot).unwrap();
    let (_, cold_std) = metrics::ensemble_stats(&cold).unwrap();
    let pixels = 256;
    let lead5 = &hot_std.data()[4 * pixels..5 * pixels];
    let spread = lead5.iter().filter(|&&s| s > 0.0).count() as f64 / pixels as f64;
    let cold_zero = cold_std.data().iter().all(|&s| s == 0.0);
    let elapsed = start.elapsed();
    let pass = spread >= 0.5 && cold_zero && elapsed < Duration::from_secs(300);
    report(
        7,
        "stochasticity",
        pass,
        format!(
            "{:.1}% of pixels with std > 0 at lead 5 (>= 50%), temperature 0 std all zero: {cold_zero}",
            100.0 * spread
        ),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_08_extrapolation() {
    let (trainer, _) = forecaster();
    let start = Instant::now();
    assert_eq!(trainer.config.data.context, 2);
    let test: Vec<_> = trainer
        .splits
        .test
        .iter()
        .map(|&i| trainer.windows[i])
        .collect();
    let cases = forecast_cases(&trainer.dataset, &test, 2, 15).unwrap();
    let ema = trainer.optim.ema_params(&trainer.params);
    let settings = ForecastSettings {
        steps: 15,
        trajectories: 2,
        temperature: 1.0,
        seed: 8,
    };
    let ev = evaluate(&trainer.model, &ema, &cases, trainer.meta(), &settings).unwrap();
    let r = &ev.flow;
    let finite = r.steps() == 15
        && (0..15).all(|i| {
            r.rmse[i].is_finite()
                && r.ssim[i].is_finite()
                && r.psnr[i].is_finite()
                && r.ens_std_mean[i].is_finite()
        });
    println!("  cases {} rmse by lead {:.4?}", ev.cases, r.rmse);
    let elapsed = start.elapsed();
    let pass = finite && ev.cases > 0 && elapsed < Duration::from_secs(300);
    report(
        8,
        "extrapolation",
        pass,
        format!(
            "15-step rollouts over {} cases, all metrics finite: {finite}",
            ev.cases
        ),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_09_determinism() {
    let start = Instant::now();
    let mut config = training_config();
    config.model.gated_layers = 2;
    config.train.log_every = 1;
    config.train.val_every = 10;
    config.train.checkpoint_every = 20;
    config.train.val_windows = 8;
    let dataset = data::synth_advection(16, 16, 20, 3, (1.0, 0.0), 9).unwrap();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();

    for dir in &dirs[..2] {
        let mut t = Trainer::new(config.clone(), dataset.clone()).unwrap();
        t.run(40, Some(dir.path())).unwrap();
    }
    let read = |p: &std::path::Path| std::fs::read(p).unwrap();
    let logs_equal =
        read(&dirs[0].path().join("train.log")) == read(&dirs[1].path().join("train.log"));
    let ckpt_equal =
        read(&dirs[0].path().join("final.ckpt")) == read(&dirs[1].path().join("final.ckpt"));

    let (model, ckpt) = Checkpoint::load(&dirs[0].path().join("step_00000020.ckpt")).unwrap();
    assert_eq!(ckpt.step, 20);
    let mut resumed = Trainer::resume(model, ckpt, dataset.clone()).unwrap();
    resumed.run(40, Some(dirs[2].path())).unwrap();
    let full = std::fs::read_to_string(dirs[0].path().join("train.log")).unwrap();
    let tail: Vec<String> = full
        .lines()
        .filter(|l| {
            let step: u64 = l
                .split("step=")
                .nth(1)
                .unwrap()
                .split(' ')
                .next()
                .unwrap()
                .parse()
                .unwrap();
            step > 20
        })
        .map(str::to_string)
        .collect();
    let resumed_lines: Vec<String> = resumed.log.iter().map(|r| r.to_line()).collect();
    let resume_log_equal = !tail.is_empty() && tail == resumed_lines;
    let resume_ckpt_equal =
        read(&dirs[0].path().join("final.ckpt")) == read(&dirs[2].path().join("final.ckpt"));

    let elapsed = start.elapsed();
    let pass = logs_equal && ckpt_equal && resume_log_equal && resume_ckpt_equal;
    report(
        9,
        "determinism",
        pass,
        format!(
            "logs identical: {logs_equal}, checkpoints identical: {ckpt_equal}, \
             resumed log identical: {resume_log_equal}, resumed checkpoint identical: {resume_ckpt_equal}"
        ),
        elapsed,
    );
    assert!(pass);
}

#[test]
fn criterion_10_metric_identities() {
    let start = Instant::now();
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let img = Tensor::from_fn(&[1, 9, 8], |i| ((i * 29) % 13) as f64 / 12.0);
    checks.push(("rmse(x, x) = 0", rmse(&img, &img).unwrap() == 0.0));
    let shifted = img.map(|v| v + 2.0);
    checks.push((
        "rmse offset 2",
        (rmse(&shifted, &img).unwrap() - 2.0).abs() <= 1e-9,
    ));
    let a = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
    let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
    checks.push((
        "rmse([0,0],[3,4])",
        (rmse(&a, &b).unwrap() - 12.5f64.sqrt()).abs() <= 1e-9,
    ));

    let z = Tensor::new(vec![1], vec![0.0]).unwrap();
    let p = Tensor::new(vec![1], vec![0.1]).unwrap();
    checks.push((
        "psnr mse 0.01",
        (psnr(&z, &p, 1.0).unwrap() - 20.0).abs() <= 1e-9,
    ));
    checks.push((
        "psnr identical",
        psnr(&img, &img, 1.0).unwrap() == f64::INFINITY,
    ));
    let half = Tensor::new(vec![1], vec![0.1 / 2f64.sqrt()]).unwrap();
    let gain = psnr(&z, &half, 1.0).unwrap() - psnr(&z, &p, 1.0).unwrap();
    checks.push((
        "psnr halving mse",
        (gain - 10.0 * 2f64.log10()).abs() <= 1e-9,
    ));

    checks.push(("ssim(x, x) = 1", ssim(&img, &img, 1.0).unwrap() == 1.0));
    let inverted = img.map(|v| 1.0 - v);
    checks.push((
        "ssim inverted < 1",
        ssim(&inverted, &img, 1.0).unwrap() < 1.0,
    ));
    let flat = Tensor::full(&[7, 7], 0.4);
    checks.push((
        "ssim constants",
        ssim(&flat, &flat.clone(), 1.0).unwrap() == 1.0,
    ));

    let meta = data::GridMeta {
        variable: "t".into(),
        units: "K".into(),
        hours_per_step: 6.0,
        min_z: 250.0,
        max_z: 300.0,
    };
    let truth = Tensor::from_fn(&[3, 1, 8, 8], |i| ((i * 7) % 10) as f64 / 10.0);
    let perfect = truth.clone().reshape(&[1, 3, 1, 8, 8]).unwrap();
    let rep = metrics::rollout_report(&perfect, &truth, &meta, 2).unwrap();
    checks.push((
        "perfect rollout",
        rep.rmse[0] == 0.0 && rep.ssim[0] == 1.0 && rep.steps() == 3,
    ));

    for (name, ok) in &checks {
        println!("  {name}: {}", if *ok { "ok" } else { "FAILED" });
    }
    let pass = checks.iter().all(|(_, ok)| *ok);
    report(
        10,
        "metric identities",
        pass,
        format!(
            "{}/{} identities hold",
            checks.iter().filter(|c| c.1).count(),
            checks.len()
        ),
        start.elapsed(),
    );
    assert!(pass);
}
