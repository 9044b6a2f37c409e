//! Convolutional LSTM memory over the context frames.
//!
//! Gates come from a gated convolutional network applied to the previous frame
//! concatenated with the previous hidden state. The cell update is
//!
//! ```text
//! c ← σ(g)⊙σ(i) + c⊙σ(f)
//! h ← tanh(c)⊙σ(o)
//! ```
//!
//! with both squashings applied to `g`, which differs from the textbook
//! `i⊙tanh(g)` form.

use rand::Rng;
use stflow_tensor::{Tensor, Var};

use crate::error::{Error, Result};
use crate::params::{Conv, Ctx, Init, ParamStore};

/// Hidden and cell grids `[N, Ch, H, W]` plus the number of frames folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    pub h: Tensor,
    pub c: Tensor,
    pub step: usize,
}

impl MemoryState {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        let shape = [batch, channels, height, width];
        Self {
            h: Tensor::zeros(&shape),
            c: Tensor::zeros(&shape),
            step: 0,
        }
    }

    pub fn batch(&self) -> usize {
        self.h.shape()[0]
    }

    /// Repeats a single-example state into a batch of `n`.
    pub fn repeat(&self, n: usize) -> Result<Self> {
        Ok(Self {
            h: self.h.repeat_batch(n)?,
            c: self.c.repeat_batch(n)?,
            step: self.step,
        })
    }
}

/// `[relu(x), relu(−x)]` along channels.
pub fn crelu(ctx: &mut Ctx, x: Var) -> Result<Var> {
    let pos = ctx.g.relu(x)?;
    let flipped = ctx.g.neg(x)?;
    let neg = ctx.g.relu(flipped)?;
    Ok(ctx.g.concat(&[pos, neg], 1)?)
}

/// conv → concatenated ReLU → conv to `(value, gate)` → `value⊙σ(gate)`,
/// plus an optional residual from the input.
#[derive(Debug, Clone)]
pub struct GatedLayer {
    conv_in: Conv,
    conv_gate: Conv,
    channels: usize,
    residual: bool,
}

impl GatedLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        residual: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            conv_in: Conv::new(
                store,
                &format!("{name}.conv_in"),
                channels,
                channels,
                3,
                1,
                Init::Default,
                rng,
            ),
            conv_gate: Conv::new(
                store,
                &format!("{name}.conv_gate"),
                2 * channels,
                2 * channels,
                3,
                1,
                Init::Default,
                rng,
            ),
            channels,
            residual,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let c = ctx.g.shape(x)[1];
        if c != self.channels {
            return Err(Error::Input(format!(
                "gated layer expects {} channels, got {c}",
                self.channels
            )));
        }
        let a = self.conv_in.forward(ctx, x)?;
        let a = crelu(ctx, a)?;
        let b = self.conv_gate.forward(ctx, a)?;
        let (value, gate) = ctx.g.split(b, 1, self.channels)?;
        let gate = ctx.g.sigmoid(gate)?;
        let out = ctx.g.mul(value, gate)?;
        if self.residual {
            Ok(ctx.g.add(out, x)?)
        } else {
            Ok(out)
        }
    }
}

/// First conv to the hidden width, `n` gated layers, last conv to the four
/// gate pre-activations `(g, i, f, o)`.
#[derive(Debug, Clone)]
pub struct GatedConvNet {
    first: Conv,
    pub layers: Vec<GatedLayer>,
    pub last: Conv,
}

impl GatedConvNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        n_layers: usize,
        residual: bool,
        rng: &mut R,
    ) -> Self {
        let first = Conv::new(
            store,
            &format!("{name}.first"),
            in_channels,
            hidden,
            3,
            1,
            Init::Default,
            rng,
        );
        let layers = (0..n_layers)
            .map(|i| GatedLayer::new(store, &format!("{name}.gated{i}"), hidden, residual, rng))
            .collect();
        let last = Conv::new(
            store,
            &format!("{name}.last"),
            hidden,
            out_channels,
            3,
            1,
            Init::Default,
            rng,
        );
        Self {
            first,
            layers,
            last,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut a = self.first.forward(ctx, x)?;
        for layer in &self.layers {
            a = layer.forward(ctx, a)?;
        }
        self.last.forward(ctx, a)
    }
}

#[derive(Debug, Clone)]
pub struct Conditioner {
    pub net: GatedConvNet,
    in_channels: usize,
    hidden_channels: usize,
}

impl Conditioner {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        in_channels: usize,
        hidden_channels: usize,
        gated_hidden: usize,
        gated_layers: usize,
        residual: bool,
        rng: &mut R,
    ) -> Self {
        let net = GatedConvNet::new(
            store,
            "conditioner",
            in_channels + hidden_channels,
            gated_hidden,
            4 * hidden_channels,
            gated_layers,
            residual,
            rng,
        );
        Self {
            net,
            in_channels,
            hidden_channels,
        }
    }

    pub fn hidden_channels(&self) -> usize {
        self.hidden_channels
    }

    /// One gated update; returns the new `(h, c)`.
    pub fn step_var(&self, ctx: &mut Ctx, x_prev: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let (xs, hs) = (ctx.g.shape(x_prev), ctx.g.shape(h));
        if xs[0] != hs[0] || xs[2..] != hs[2..] || xs[1] != self.in_channels {
            return Err(Error::Input(format!(
                "frame {xs:?} does not match memory state {hs:?}"
            )));
        }
        let inp = ctx.g.concat(&[x_prev, h], 1)?;
        let gates = self.net.forward(ctx, inp)?;
        let ch = self.hidden_channels;
        let g = ctx.g.narrow(gates, 1, 0, ch)?;
        let i = ctx.g.narrow(gates, 1, ch, ch)?;
        let f = ctx.g.narrow(gates, 1, 2 * ch, ch)?;
        let o = ctx.g.narrow(gates, 1, 3 * ch, ch)?;
        let sg = ctx.g.sigmoid(g)?;
        let si = ctx.g.sigmoid(i)?;
        let sf = ctx.g.sigmoid(f)?;
        let so = ctx.g.sigmoid(o)?;
        let write = ctx.g.mul(sg, si)?;
        let keep = ctx.g.mul(c, sf)?;
        let c_new = ctx.g.add(write, keep)?;
        let tc = ctx.g.tanh(c_new)?;
        let h_new = ctx.g.mul(tc, so)?;
        Ok((h_new, c_new))
    }

    /// Folds the frames in chronological order starting from a zero state.
    pub fn encode_var(&self, ctx: &mut Ctx, frames: &[Var]) -> Result<(Var, Var)> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Input("empty context".into()))?;
        let s = ctx.g.shape(*first).to_vec();
        let zero = MemoryState::zeros(s[0], self.hidden_channels, s[2], s[3]);
        let mut h = ctx.constant(zero.h);
        let mut c = ctx.constant(zero.c);
        for &x in frames {
            (h, c) = self.step_var(ctx, x, h, c)?;
        }
        Ok((h, c))
    }

    pub fn lstm_step(
        &self,
        store: &ParamStore,
        x_prev: &Tensor,
        state: &MemoryState,
    ) -> Result<MemoryState> {
        let mut ctx = Ctx::eval(store);
        let x = ctx.constant(x_prev.clone());
        let h = ctx.constant(state.h.clone());
        let c = ctx.constant(state.c.clone());
        let (h, c) = self.step_var(&mut ctx, x, h, c)?;
        Ok(MemoryState {
            h: ctx.value(h).clone(),
            c: ctx.value(c).clone(),
            step: state.step + 1,
        })
    }

    /// Encodes `frames` (each `[N, C, H, W]`) from `init`, or zeros.
    pub fn encode_context(
        &self,
        store: &ParamStore,
        frames: &[Tensor],
        init: Option<MemoryState>,
    ) -> Result<MemoryState> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Input("empty context".into()))?;
        let (n, _, h, w) = first.dims4()?;
        let mut state = init.unwrap_or_else(|| MemoryState::zeros(n, self.hidden_channels, h, w));
        for x in frames {
            state = self.lstm_step(store, x, &state)?;
        }
        Ok(state)
    }
}

/// Average-pools `h` by `2^level` to match the resolution of scale `level`.
pub fn state_for_scale(h: &Tensor, level: usize) -> Result<Tensor> {
    let store = ParamStore::new();
    let mut ctx = Ctx::eval(&store);
    let v = ctx.constant(h.clone());
    let out = pool_var(&mut ctx, v, level)?;
    Ok(ctx.value(out).clone())
}

pub(crate) fn pool_var(ctx: &mut Ctx, h: Var, level: usize) -> Result<Var> {
    let factor = 1usize
        .checked_shl(level as u32)
        .ok_or_else(|| Error::Input(format!("scale level {level} too large")))?;
    Ok(ctx.g.avg_pool(h, factor)?)
}
