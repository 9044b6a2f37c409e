use stflow_tensor::{Tensor, Var};

use crate::error::Result;
use crate::params::{Ctx, ParamId, ParamStore};

/// Per-channel affine map `y = x·exp(log_scale) + bias`.
///
/// Starts as identity; [`ActNorm::forward_init`] sets the parameters from the
/// first batch so each output channel has zero mean and unit variance.
#[derive(Debug, Clone)]
pub struct ActNorm {
    pub log_scale: ParamId,
    pub bias: ParamId,
    channels: usize,
}

const MIN_STD: f64 = 1e-3;

impl ActNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let shape = [channels, 1, 1];
        Self {
            log_scale: store.add(format!("{name}.log_scale"), Tensor::zeros(&shape), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&shape), true),
            channels,
        }
    }

    fn pixels(ctx: &Ctx, x: Var) -> f64 {
        let s = ctx.g.shape(x);
        (s[2] * s[3]) as f64
    }

    fn apply(ctx: &mut Ctx, x: Var, log_scale: Var, bias: Var) -> Result<(Var, Var)> {
        let scale = ctx.g.exp(log_scale)?;
        let y = ctx.g.mul(x, scale)?;
        let y = ctx.g.add(y, bias)?;
        let total = ctx.g.sum(log_scale)?;
        let logdet = ctx.g.mul_scalar(total, Self::pixels(ctx, x))?;
        Ok((y, logdet))
    }

    /// Returns the output and the (shared) scalar log-determinant.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let ls = ctx.param(self.log_scale);
        let b = ctx.param(self.bias);
        Self::apply(ctx, x, ls, b)
    }

    /// Data-dependent initialization: computes per-channel statistics of `x`,
    /// applies the resulting normalization and returns the new parameter values.
    pub fn forward_init(
        &self,
        ctx: &mut Ctx,
        x: Var,
    ) -> Result<(Var, Var, Vec<(ParamId, Tensor)>)> {
        let xv = ctx.value(x);
        let (n, c, h, w) = xv.dims4()?;
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut log_scale = vec![0.0; c];
        let mut bias = vec![0.0; c];
        for ch in 0..c {
            let vals = (0..n).flat_map(|b| {
                let start = (b * c + ch) * plane;
                xv.data()[start..start + plane].iter().copied()
            });
            let mean = vals.clone().sum::<f64>() / count;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let ls = -var.sqrt().max(MIN_STD).ln();
            log_scale[ch] = ls;
            bias[ch] = -mean * ls.exp();
        }
        let ls = Tensor::new(vec![c, 1, 1], log_scale)?;
        let b = Tensor::new(vec![c, 1, 1], bias)?;
        let lsv = ctx.constant(ls.clone());
        let bv = ctx.constant(b.clone());
        let (y, logdet) = Self::apply(ctx, x, lsv, bv)?;
        Ok((y, logdet, vec![(self.log_scale, ls), (self.bias, b)]))
    }

    pub fn inverse(&self, ctx: &mut Ctx, y: Var) -> Result<Var> {
        let ls = ctx.param(self.log_scale);
        let b = ctx.param(self.bias);
        let centered = ctx.g.sub(y, b)?;
        let neg = ctx.g.neg(ls)?;
        let inv_scale = ctx.g.exp(neg)?;
        Ok(ctx.g.mul(centered, inv_scale)?)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}
