//! Self-checks of the assembled model: round trips, the Jacobian oracle,
//! gradient integrity and density normalization.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stflow_tensor::gradcheck::{finite_diff_jacobian, relative_error};
use stflow_tensor::{Tensor, Var};

use crate::conditioner::MemoryState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, StFlow};
use crate::params::{Ctx, ParamStore};

pub const ROUNDTRIP_TOL: f64 = 1e-8;
pub const LOGDET_TOL: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;
pub const DENSITY_TOL: f64 = 0.01;

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-4;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn below(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            tolerance,
            passed: measured < tolerance,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Perturbs the parameters used by the inverse pass only, so round-trip
    /// checks must fail.
    pub corrupt_inverse: bool,
    pub seed: u64,
}

/// Adds `N(0, scale²)` noise to every trainable parameter so zero-initialized
/// heads stop hiding terms.
pub fn perturb_params(store: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        if !store.is_trainable(id) {
            continue;
        }
        for v in store.get_mut(id).data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}

/// Compact architecture with the given depth, for checks.
pub fn small_config(levels: usize, steps: usize, channels: usize, size: usize) -> ModelConfig {
    ModelConfig {
        levels,
        steps,
        in_channels: channels,
        height: size,
        width: size,
        hidden_channels: 4,
        coupling_hidden: 8,
        gated_hidden: 4,
        gated_layers: 2,
        ..ModelConfig::default()
    }
}

/// Max abs error of `reconstruct(forward(x))` on a batch of two random
/// frames.
pub fn roundtrip_error(config: &ModelConfig, seed: u64, corrupt_inverse: bool) -> Result<f64> {
    let (model, mut store) = StFlow::build(config, seed)?;
    perturb_params(&mut store, 0.05, seed ^ 0x5eed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, config.in_channels, config.height, config.width];
    let context = vec![uniform(&shape, &mut rng), uniform(&shape, &mut rng)];
    let x = uniform(&shape, &mut rng);
    let memory = model.encode_context(&store, &context)?;
    let (_, state) = model.forward_nll(&store, &x, &memory)?;
    let inverse_store = if corrupt_inverse {
        let mut s = store.clone();
        let id = s
            .ids()
            .find(|&id| s.name(id).ends_with("inv1x1.log_s"))
            .ok_or_else(|| Error::Input("model has no 1x1 convolution".into()))?;
        for v in s.get_mut(id).data_mut() {
            *v += 1e-3;
        }
        s
    } else {
        store
    };
    let back = model.reconstruct(&inverse_store, &state, &memory)?;
    Ok(back.max_abs_diff(&x))
}

/// Flattens the final latent and every factored latent of one example.
fn latent_vector(
    model: &StFlow,
    store: &ParamStore,
    x: &Tensor,
    memory: &MemoryState,
) -> Result<(Vec<f64>, f64)> {
    let (_, state) = model.forward_nll(store, x, memory)?;
    let mut out = state.z.data().to_vec();
    for (_, t) in &state.factored {
        out.extend_from_slice(t.data());
    }
    Ok((out, state.logdet[0]))
}

/// `(analytic logdet, log|det J|)` for one example of `config`, with `J`
/// assembled by central differences.
pub fn logdet_vs_jacobian(config: &ModelConfig, seed: u64, eps: f64) -> Result<(f64, f64)> {
    let (model, mut store) = StFlow::build(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, config.in_channels, config.height, config.width];
    let context = vec![uniform(&shape, &mut rng), uniform(&shape, &mut rng)];
    let x = uniform(&shape, &mut rng);
    model.initialize_actnorm(&mut store, &context, &x)?;
    perturb_params(&mut store, 0.1, seed ^ 0x10d);
    let memory = model.encode_context(&store, &context)?;
    let (_, analytic) = latent_vector(&model, &store, &x, &memory)?;
    let jac = finite_diff_jacobian(
        |p| {
            latent_vector(&model, &store, p, &memory)
                .map(|(v, _)| v)
                .map_err(|e| stflow_tensor::TensorError::InvalidArgument {
                    op: "jacobian",
                    msg: e.to_string(),
                })
        },
        &x,
        eps,
    )?;
    let n = x.len();
    if jac.shape() != [n, n] {
        return Err(Error::Input(format!(
            "Jacobian is {:?}, not square",
            jac.shape()
        )));
    }
    let m = DMatrix::from_row_slice(n, n, jac.data());
    let det = m.lu().determinant();
    Ok((analytic, det.abs().ln()))
}

/// Tiny model for gradient checks; well under 5k parameters.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        levels: 1,
        steps: 2,
        in_channels: 1,
        height: 4,
        width: 4,
        hidden_channels: 2,
        coupling_hidden: 4,
        gated_hidden: 4,
        gated_layers: 2,
        ..ModelConfig::default()
    }
}

/// Batch-mean NLL of `target` given `context` under `store`.
pub fn mean_nll(
    model: &StFlow,
    store: &ParamStore,
    context: &[Tensor],
    target: &Tensor,
) -> Result<f64> {
    let memory = model.encode_context(store, context)?;
    let (nll, _) = model.forward_nll(store, target, &memory)?;
    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
}

/// Analytic and central-difference gradients of the batch-mean NLL for every
/// trainable parameter value, as `(analytic, numeric)` pairs.
pub fn gradient_pairs(config: &ModelConfig, seed: u64, eps: f64) -> Result<Vec<(f64, f64)>> {
    let (model, mut store) = StFlow::build(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, config.in_channels, config.height, config.width];
    let context = vec![uniform(&shape, &mut rng), uniform(&shape, &mut rng)];
    let target = uniform(&shape, &mut rng);
    model.initialize_actnorm(&mut store, &context, &target)?;
    perturb_params(&mut store, 0.1, seed ^ 0x9ad);

    let analytic = {
        let mut ctx = Ctx::train(&store);
        let frames: Vec<Var> = context.iter().map(|f| ctx.constant(f.clone())).collect();
        let t = ctx.constant(target.clone());
        let (nll, _) = model.nll_var(&mut ctx, &frames, t, None)?;
        let loss = ctx.g.mean(nll)?;
        ctx.param_grads(loss)?
    };
    let mut pairs = Vec::new();
    let mut probe = store.clone();
    for id in store.ids() {
        if !store.is_trainable(id) {
            continue;
        }
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + eps;
            let plus = mean_nll(&model, &probe, &context, &target)?;
            probe.get_mut(id).data_mut()[k] = orig - eps;
            let minus = mean_nll(&model, &probe, &context, &target)?;
            probe.get_mut(id).data_mut()[k] = orig;
            pairs.push((analytic[id.index()].data()[k], (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(pairs)
}

pub fn max_relative_error(pairs: &[(f64, f64)], floor: f64) -> f64 {
    pairs
        .iter()
        .map(|&(a, n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}

/// Two-value frames (`C=2, H=W=1`) that need no squeeze.
pub fn two_pixel_config() -> ModelConfig {
    ModelConfig {
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
    }
}

/// Midpoint-rule integral of `exp(−nll)` over `[μ ± 6σ]²` on a `grid×grid`
/// mesh, with `μ, σ` estimated from model samples.
pub fn density_integral(seed: u64, grid: usize) -> Result<f64> {
    let config = two_pixel_config();
    let (model, mut store) = StFlow::build(&config, seed)?;
    perturb_params(&mut store, 0.3, seed ^ 0xde5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let context = vec![
        uniform(&[1, 2, 1, 1], &mut rng),
        uniform(&[1, 2, 1, 1], &mut rng),
    ];
    let memory = model.encode_context(&store, &context)?;

    let draws = 4000;
    let samples = model.sample(&store, &memory.repeat(draws)?, 1.0, &mut rng)?;
    let mut lo = [0.0; 2];
    let mut step = [0.0; 2];
    for d in 0..2 {
        let vals: Vec<f64> = (0..draws).map(|i| samples.data()[2 * i + d]).collect();
        let mean = vals.iter().sum::<f64>() / draws as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws as f64).sqrt();
        lo[d] = mean - 6.0 * sd;
        step[d] = 12.0 * sd / grid as f64;
    }
    let row_memory = memory.repeat(grid)?;
    let mut total = 0.0;
    for i in 0..grid {
        let x0 = lo[0] + (i as f64 + 0.5) * step[0];
        let x = Tensor::from_fn(&[grid, 2, 1, 1], |k| {
            if k % 2 == 0 {
                x0
            } else {
                lo[1] + ((k / 2) as f64 + 0.5) * step[1]
            }
        });
        let (nll, _) = model.forward_nll(&store, &x, &row_memory)?;
        total += nll.iter().map(|v| (-v).exp()).sum::<f64>();
    }
    Ok(total * step[0] * step[1])
}

/// Runs every check.
pub fn run_checks(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (l, k) in [(1, 2), (2, 2), (2, 4), (3, 4)] {
        let config = small_config(l, k, 1, 16);
        let err = roundtrip_error(&config, opts.seed, opts.corrupt_inverse)?;
        out.push(Check::below(
            format!("roundtrip_L{l}_K{k}"),
            err,
            ROUNDTRIP_TOL,
        ));
    }
    let (analytic, numeric) = logdet_vs_jacobian(&small_config(1, 2, 1, 4), opts.seed, 1e-6)?;
    out.push(Check::below(
        "logdet_jacobian",
        (analytic - numeric).abs(),
        LOGDET_TOL,
    ));
    let pairs = gradient_pairs(&tiny_config(), opts.seed, 1e-5)?;
    out.push(Check::below(
        "gradient_fd",
        max_relative_error(&pairs, GRAD_FLOOR),
        GRAD_TOL,
    ));
    let integral = density_integral(opts.seed, 200)?;
    out.push(Check::below(
        "density_normalization",
        (integral - 1.0).abs(),
        DENSITY_TOL,
    ));
    Ok(out)
}
