//! Invertible layers of the multi-scale conditional flow.
//!
//! Every layer maps `[N, C, H, W]` activations forward (data → latent) with a
//! per-example log-determinant, and back (latent → data) exactly.

mod actnorm;
mod coupling;
mod inv1x1;
mod prior;

pub use actnorm::ActNorm;
pub use coupling::{affine_forward, affine_inverse, Coupling, SCALE_SHIFT};
pub use inv1x1::Inv1x1;
pub use prior::{gaussian_logprob, gaussian_logprob_var, ConditionalPrior, PriorNet, SplitPrior};

use stflow_tensor::{Tensor, Var};

use crate::error::Result;
use crate::params::Ctx;

/// `½·ln(2π)`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Latent representation produced by a forward pass, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    /// Final latent at the deepest scale.
    pub z: Tensor,
    /// Per-example accumulated log-determinant, nats.
    pub logdet: Vec<f64>,
    /// Per-example accumulated prior log-density, nats.
    pub logprob_prior: Vec<f64>,
    /// Latents factored out by split priors, as `(scale index, latent)`.
    pub factored: Vec<(usize, Tensor)>,
}

impl FlowState {
    /// Total number of latent values per example.
    pub fn latent_dims(&self) -> usize {
        let n = self.z.shape()[0];
        (self.z.len() + self.factored.iter().map(|(_, t)| t.len()).sum::<usize>()) / n
    }
}

/// Sums per-example contributions `[N]` (or a shared scalar) into `acc`.
pub(crate) fn accumulate(ctx: &mut Ctx, acc: Var, term: Var) -> Result<Var> {
    Ok(ctx.g.add(acc, term)?)
}

/// `[N,C,H,W] → [N,4C,H/2,W/2]`, volume preserving.
pub fn squeeze(ctx: &mut Ctx, x: Var) -> Result<Var> {
    Ok(ctx.g.space_to_depth(x)?)
}

pub fn unsqueeze(ctx: &mut Ctx, x: Var) -> Result<Var> {
    Ok(ctx.g.depth_to_space(x)?)
}
