use rand::Rng;
use stflow_tensor::Var;

use crate::error::{Error, Result};
use crate::params::{Conv, Ctx, Init, ParamStore};

/// Constant added to the raw scale before the sigmoid, so a zero-initialized
/// head starts at `s = σ(2) ≈ 0.881`.
pub const SCALE_SHIFT: f64 = 2.0;

/// `y0 = exp(log_s)·z0 + t`, returning `(y0, Σ log_s per example)`.
pub fn affine_forward(ctx: &mut Ctx, z0: Var, log_s: Var, t: Var) -> Result<(Var, Var)> {
    let s = ctx.g.exp(log_s)?;
    let scaled = ctx.g.mul(z0, s)?;
    let y0 = ctx.g.add(scaled, t)?;
    let logdet = ctx.g.sum_per_example(log_s)?;
    Ok((y0, logdet))
}

/// `z0 = (y0 − t)/exp(log_s)`.
pub fn affine_inverse(ctx: &mut Ctx, y0: Var, log_s: Var, t: Var) -> Result<Var> {
    let centered = ctx.g.sub(y0, t)?;
    let neg = ctx.g.neg(log_s)?;
    let inv = ctx.g.exp(neg)?;
    Ok(ctx.g.mul(centered, inv)?)
}

/// Conditional affine coupling.
///
/// The first `c0` channels are transformed by a scale and shift predicted from
/// the remaining `c1` channels concatenated with the conditioning state.
#[derive(Debug, Clone)]
pub struct Coupling {
    convs: [Conv; 3],
    c0: usize,
    c1: usize,
    cond_channels: usize,
}

impl Coupling {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels < 2 {
            return Err(Error::Config(format!(
                "{name}: coupling needs at least 2 channels, got {channels}"
            )));
        }
        let c0 = channels / 2;
        let c1 = channels - c0;
        let convs = [
            Conv::new(
                store,
                &format!("{name}.conv0"),
                c1 + cond_channels,
                hidden,
                3,
                1,
                Init::Default,
                rng,
            ),
            Conv::new(
                store,
                &format!("{name}.conv1"),
                hidden,
                hidden,
                3,
                1,
                Init::Default,
                rng,
            ),
            Conv::new(
                store,
                &format!("{name}.head"),
                hidden,
                2 * c0,
                1,
                1,
                Init::Zero,
                rng,
            ),
        ];
        Ok(Self {
            convs,
            c0,
            c1,
            cond_channels,
        })
    }

    /// `(log_s, t)` from the pass-through half and the conditioning state.
    fn scale_shift(&self, ctx: &mut Ctx, z1: Var, h: Var) -> Result<(Var, Var)> {
        let (zs, hs) = (ctx.g.shape(z1), ctx.g.shape(h));
        if zs[0] != hs[0] || zs[2..] != hs[2..] || hs[1] != self.cond_channels {
            return Err(Error::Input(format!(
                "coupling conditioning {hs:?} does not match activations {zs:?}"
            )));
        }
        let inp = ctx.g.concat(&[z1, h], 1)?;
        let a = self.convs[0].forward(ctx, inp)?;
        let a = ctx.g.relu(a)?;
        let a = self.convs[1].forward(ctx, a)?;
        let a = ctx.g.relu(a)?;
        let out = self.convs[2].forward(ctx, a)?;
        let (raw_s, t) = ctx.g.split(out, 1, self.c0)?;
        let shifted = ctx.g.add_scalar(raw_s, SCALE_SHIFT)?;
        let log_s = ctx.g.log_sigmoid(shifted)?;
        Ok((log_s, t))
    }

    pub fn forward(&self, ctx: &mut Ctx, z: Var, h: Var) -> Result<(Var, Var)> {
        let (z0, z1) = ctx.g.split(z, 1, self.c0)?;
        let (log_s, t) = self.scale_shift(ctx, z1, h)?;
        let (y0, logdet) = affine_forward(ctx, z0, log_s, t)?;
        let y = ctx.g.concat(&[y0, z1], 1)?;
        Ok((y, logdet))
    }

    pub fn inverse(&self, ctx: &mut Ctx, y: Var, h: Var) -> Result<Var> {
        let (y0, y1) = ctx.g.split(y, 1, self.c0)?;
        let (log_s, t) = self.scale_shift(ctx, y1, h)?;
        let z0 = affine_inverse(ctx, y0, log_s, t)?;
        Ok(ctx.g.concat(&[z0, y1], 1)?)
    }

    pub fn channels(&self) -> usize {
        self.c0 + self.c1
    }
}
