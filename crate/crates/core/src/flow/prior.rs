use rand::Rng;
use rand_distr::StandardNormal;
use stflow_tensor::{Tensor, TensorError, Var};

use super::HALF_LN_2PI;
use crate::error::{Error, Result};
use crate::params::{Conv, Ctx, Init, ParamStore};

/// `Σ log N(z; μ, σ)` over all elements, in nats.
pub fn gaussian_logprob(z: &Tensor, mu: &Tensor, log_sigma: &Tensor) -> Result<f64> {
    if z.shape() != mu.shape() || z.shape() != log_sigma.shape() {
        return Err(Error::Input(format!(
            "gaussian_logprob shapes {:?}, {:?}, {:?}",
            z.shape(),
            mu.shape(),
            log_sigma.shape()
        )));
    }
    if !log_sigma.is_finite() {
        return Err(TensorError::NonFinite {
            op: "gaussian_logprob",
        }
        .into());
    }
    Ok(z.data()
        .iter()
        .zip(mu.data())
        .zip(log_sigma.data())
        .map(|((&z, &m), &ls)| {
            let d = (z - m) * (-ls).exp();
            -HALF_LN_2PI - ls - 0.5 * d * d
        })
        .sum())
}

/// Per-example Gaussian log-density `[N]` as a graph node.
pub fn gaussian_logprob_var(ctx: &mut Ctx, z: Var, mu: Var, log_sigma: Var) -> Result<Var> {
    let diff = ctx.g.sub(z, mu)?;
    let neg = ctx.g.neg(log_sigma)?;
    let inv_sigma = ctx.g.exp(neg)?;
    let d = ctx.g.mul(diff, inv_sigma)?;
    let d2 = ctx.g.mul(d, d)?;
    let quad = ctx.g.mul_scalar(d2, -0.5)?;
    let lp = ctx.g.sub(quad, log_sigma)?;
    let lp = ctx.g.add_scalar(lp, -HALF_LN_2PI)?;
    Ok(ctx.g.sum_per_example(lp)?)
}

/// `μ + temperature·σ·ε` with `ε ~ N(0, I)` drawn from `rng`.
fn draw<R: Rng>(
    ctx: &mut Ctx,
    mu: Var,
    log_sigma: Var,
    temperature: f64,
    rng: &mut R,
) -> Result<Var> {
    if temperature < 0.0 {
        return Err(Error::Input(format!(
            "temperature {temperature} is negative"
        )));
    }
    if temperature == 0.0 {
        return Ok(mu);
    }
    let shape = ctx.g.shape(mu).to_vec();
    let eps = Tensor::from_fn(&shape, |_| {
        rng.sample::<f64, _>(StandardNormal) * temperature
    });
    let eps = ctx.constant(eps);
    let sigma = ctx.g.exp(log_sigma)?;
    let noise = ctx.g.mul(sigma, eps)?;
    Ok(ctx.g.add(mu, noise)?)
}

/// Small conv net predicting `(μ, log σ)`; its head starts at zero so the
/// prior starts as a standard normal.
#[derive(Debug, Clone)]
pub struct PriorNet {
    conv: Conv,
    head: Conv,
    out_channels: usize,
}

impl PriorNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv::new(
                store,
                &format!("{name}.conv0"),
                in_channels,
                hidden,
                3,
                1,
                Init::Default,
                rng,
            ),
            head: Conv::new(
                store,
                &format!("{name}.head"),
                hidden,
                2 * out_channels,
                3,
                1,
                Init::Zero,
                rng,
            ),
            out_channels,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, inp: Var) -> Result<(Var, Var)> {
        let a = self.conv.forward(ctx, inp)?;
        let a = ctx.g.relu(a)?;
        let out = self.head.forward(ctx, a)?;
        Ok(ctx.g.split(out, 1, self.out_channels)?)
    }
}

/// Factors out half the channels under `N(z1; μ(z0, h), σ(z0, h))`.
#[derive(Debug, Clone)]
pub struct SplitPrior {
    net: PriorNet,
    keep: usize,
}

impl SplitPrior {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels % 2 != 0 || channels < 2 {
            return Err(Error::Config(format!(
                "{name}: split prior needs an even channel count, got {channels}"
            )));
        }
        let keep = channels / 2;
        Ok(Self {
            net: PriorNet::new(
                store,
                name,
                keep + cond_channels,
                channels - keep,
                hidden,
                rng,
            ),
            keep,
        })
    }

    pub fn kept_channels(&self) -> usize {
        self.keep
    }

    fn params(&self, ctx: &mut Ctx, z0: Var, h: Var) -> Result<(Var, Var)> {
        let inp = ctx.g.concat(&[z0, h], 1)?;
        self.net.forward(ctx, inp)
    }

    /// Returns `(z0, z1, log p(z1 | z0, h))`.
    pub fn forward(&self, ctx: &mut Ctx, z: Var, h: Var) -> Result<(Var, Var, Var)> {
        let c = ctx.g.shape(z)[1];
        if c != 2 * self.keep {
            return Err(Error::Input(format!(
                "split prior built for {} channels, got {c}",
                2 * self.keep
            )));
        }
        let (z0, z1) = ctx.g.split(z, 1, self.keep)?;
        let (mu, log_sigma) = self.params(ctx, z0, h)?;
        let lp = gaussian_logprob_var(ctx, z1, mu, log_sigma)?;
        Ok((z0, z1, lp))
    }

    /// Re-attaches `z1` to `z0`; `z1` is drawn from the prior when not given.
    pub fn inverse<R: Rng>(
        &self,
        ctx: &mut Ctx,
        z0: Var,
        h: Var,
        z1: Option<Var>,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Var> {
        let z1 = match z1 {
            Some(z1) => z1,
            None => {
                let (mu, log_sigma) = self.params(ctx, z0, h)?;
                draw(ctx, mu, log_sigma, temperature, rng)?
            }
        };
        Ok(ctx.g.concat(&[z0, z1], 1)?)
    }
}

/// Final Gaussian `N(z; μ(h), σ(h))` at the deepest scale.
#[derive(Debug, Clone)]
pub struct ConditionalPrior {
    net: PriorNet,
}

impl ConditionalPrior {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            net: PriorNet::new(store, name, cond_channels, channels, hidden, rng),
        }
    }

    pub fn params(&self, ctx: &mut Ctx, h: Var) -> Result<(Var, Var)> {
        self.net.forward(ctx, h)
    }

    pub fn logprob(&self, ctx: &mut Ctx, z: Var, h: Var) -> Result<Var> {
        let (mu, log_sigma) = self.params(ctx, h)?;
        if ctx.g.shape(mu) != ctx.g.shape(z) {
            return Err(Error::Input(format!(
                "conditional prior yields {:?}, latent is {:?}",
                ctx.g.shape(mu),
                ctx.g.shape(z)
            )));
        }
        gaussian_logprob_var(ctx, z, mu, log_sigma)
    }

    pub fn sample<R: Rng>(
        &self,
        ctx: &mut Ctx,
        h: Var,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Var> {
        let (mu, log_sigma) = self.params(ctx, h)?;
        draw(ctx, mu, log_sigma, temperature, rng)
    }
}
