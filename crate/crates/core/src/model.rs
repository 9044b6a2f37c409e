//! The conditional multi-scale flow.
//!
//! Per scale: squeeze, then `K` steps of `[actnorm] → 1×1 conv → coupling`,
//! then a split prior (all but the last scale) or the final conditional prior.
//! Couplings and priors are conditioned on the ConvLSTM hidden state pooled to
//! the scale's resolution.

use std::f64::consts::LN_2;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stflow_tensor::{Tensor, Var};

use crate::conditioner::{pool_var, Conditioner, MemoryState};
use crate::error::{Error, LayerContext, Result};
use crate::flow::{
    accumulate, squeeze, unsqueeze, ActNorm, ConditionalPrior, Coupling, FlowState, Inv1x1,
    SplitPrior,
};
use crate::params::{Conv, Ctx, Init, ParamId, ParamStore};

/// How the full-resolution hidden state is brought to each scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondAdapt {
    /// Average pooling by `2^level`.
    Pool,
    /// Learned conv with kernel and stride `2^level`, realized as repeated
    /// space-to-depth followed by a 1×1 conv.
    StridedConv,
}

impl CondAdapt {
    pub fn as_str(self) -> &'static str {
        match self {
            CondAdapt::Pool => "pool",
            CondAdapt::StridedConv => "strided_conv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pool" => Some(CondAdapt::Pool),
            "strided_conv" => Some(CondAdapt::StridedConv),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of scales `L`.
    pub levels: usize,
    /// Flow steps per scale `K`.
    pub steps: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channels of the ConvLSTM hidden/cell state.
    pub hidden_channels: usize,
    /// Width of the coupling and prior conv nets.
    pub coupling_hidden: usize,
    /// Width of the gated conv net inside the conditioner.
    pub gated_hidden: usize,
    pub gated_layers: usize,
    pub gated_residual: bool,
    pub actnorm: bool,
    /// Squeeze before each scale. Off only for tiny test models whose frames
    /// cannot be halved.
    pub squeeze: bool,
    pub cond_adapt: CondAdapt,
    pub temperature: f64,
    /// Std of optional Gaussian jitter added to training targets; 0 disables.
    pub jitter: f64,
}

impl Default for ModelConfig {
    /// The desk-scale profile.
    fn default() -> Self {
        Self {
            levels: 2,
            steps: 2,
            in_channels: 1,
            height: 16,
            width: 16,
            hidden_channels: 32,
            coupling_hidden: 64,
            gated_hidden: 32,
            gated_layers: 6,
            gated_residual: true,
            actnorm: true,
            squeeze: true,
            cond_adapt: CondAdapt::Pool,
            temperature: 1.0,
            jitter: 0.0,
        }
    }
}

impl ModelConfig {
    /// Full-size architecture: `L=3, K=4`, 512-wide couplings, 128-wide gated
    /// net with a 256-channel gate head.
    pub fn paper() -> Self {
        Self {
            levels: 3,
            steps: 4,
            height: 32,
            width: 32,
            hidden_channels: 64,
            coupling_hidden: 512,
            gated_hidden: 128,
            ..Self::default()
        }
    }

    pub fn frame_dims(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("levels", self.levels),
            ("steps", self.steps),
            ("in_channels", self.in_channels),
            ("height", self.height),
            ("width", self.width),
            ("hidden_channels", self.hidden_channels),
            ("coupling_hidden", self.coupling_hidden),
            ("gated_hidden", self.gated_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.squeeze {
            let f = 1usize << self.levels.min(30);
            if self.height % f != 0 || self.width % f != 0 {
                return Err(Error::Config(format!(
                    "{}x{} frames are not divisible by 2^L = {f}",
                    self.height, self.width
                )));
            }
        }
        if !(self.temperature >= 0.0) || !(self.jitter >= 0.0) {
            return Err(Error::Config(
                "temperature and jitter must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct FlowStep {
    actnorm: Option<ActNorm>,
    inv: Inv1x1,
    coupling: Coupling,
}

#[derive(Debug, Clone)]
struct Scale {
    steps: Vec<FlowStep>,
    split: Option<SplitPrior>,
    adapter: Option<Conv>,
    channels: usize,
}

/// Values the actnorm layers should take after data-dependent init.
pub type ParamUpdates = Vec<(ParamId, Tensor)>;

/// Graph nodes of a forward pass.
#[derive(Debug, Clone)]
pub struct FlowVars {
    pub z: Var,
    /// `[N]`
    pub logdet: Var,
    /// `[N]`
    pub logprob: Var,
    pub factored: Vec<(usize, Var)>,
}

#[derive(Debug, Clone)]
pub struct StFlow {
    config: ModelConfig,
    conditioner: Conditioner,
    scales: Vec<Scale>,
    prior: ConditionalPrior,
}

pub fn bits_per_dim(nll: f64, dims: usize) -> f64 {
    assert!(dims > 0, "bits_per_dim needs at least one dimension");
    nll / (dims as f64 * LN_2)
}

impl StFlow {
    /// Builds the network and its freshly initialized parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ch = config.hidden_channels;
        let conditioner = Conditioner::new(
            &mut store,
            config.in_channels,
            ch,
            config.gated_hidden,
            config.gated_layers,
            config.gated_residual,
            &mut rng,
        );
        let mut c = config.in_channels;
        let mut scales = Vec::with_capacity(config.levels);
        for l in 1..=config.levels {
            if config.squeeze {
                c *= 4;
            }
            let level = if config.squeeze { l } else { 0 };
            let adapter = (config.cond_adapt == CondAdapt::StridedConv && level > 0).then(|| {
                let c_in = ch << (2 * level);
                Conv::new(
                    &mut store,
                    &format!("scale{l}.cond"),
                    c_in,
                    ch,
                    1,
                    1,
                    Init::Default,
                    &mut rng,
                )
            });
            let mut steps = Vec::with_capacity(config.steps);
            for k in 0..config.steps {
                let name = format!("scale{l}.step{k}");
                let actnorm = config
                    .actnorm
                    .then(|| ActNorm::new(&mut store, &format!("{name}.actnorm"), c));
                let inv = Inv1x1::new(&mut store, &format!("{name}.inv1x1"), c, &mut rng);
                let coupling = Coupling::new(
                    &mut store,
                    &format!("{name}.coupling"),
                    c,
                    ch,
                    config.coupling_hidden,
                    &mut rng,
                )?;
                steps.push(FlowStep {
                    actnorm,
                    inv,
                    coupling,
                });
            }
            let channels = c;
            let split = if l < config.levels {
                let sp = SplitPrior::new(
                    &mut store,
                    &format!("scale{l}.split"),
                    c,
                    ch,
                    config.coupling_hidden,
                    &mut rng,
                )?;
                c = sp.kept_channels();
                Some(sp)
            } else {
                None
            };
            scales.push(Scale {
                steps,
                split,
                adapter,
                channels,
            });
        }
        let prior =
            ConditionalPrior::new(&mut store, "prior", c, ch, config.coupling_hidden, &mut rng);
        Ok((
            Self {
                config: config.clone(),
                conditioner,
                scales,
                prior,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn conditioner(&self) -> &Conditioner {
        &self.conditioner
    }

    /// Channel count inside each scale (after its squeeze).
    pub fn scale_channels(&self) -> Vec<usize> {
        self.scales.iter().map(|s| s.channels).collect()
    }

    fn check_frame(&self, x: &[usize]) -> Result<()> {
        let c = &self.config;
        if x.len() != 4 || x[1] != c.in_channels || x[2] != c.height || x[3] != c.width {
            return Err(Error::Input(format!(
                "frame shape {x:?} does not match [N, {}, {}, {}]",
                c.in_channels, c.height, c.width
            )));
        }
        Ok(())
    }

    fn scale_cond(&self, ctx: &mut Ctx, h: Var, l: usize) -> Result<Var> {
        let level = if self.config.squeeze { l + 1 } else { 0 };
        match &self.scales[l].adapter {
            Some(conv) => {
                let mut folded = h;
                for _ in 0..level {
                    folded = ctx.g.space_to_depth(folded)?;
                }
                conv.forward(ctx, folded)
            }
            None => pool_var(ctx, h, level),
        }
    }

    /// Data → latent. With `init` set, uninitialized actnorm layers take their
    /// statistics from this batch and the new values are pushed to `init`.
    pub fn flow_forward(
        &self,
        ctx: &mut Ctx,
        x: Var,
        h: Var,
        mut init: Option<&mut ParamUpdates>,
    ) -> Result<FlowVars> {
        self.check_frame(ctx.g.shape(x))?;
        let n = ctx.g.shape(x)[0];
        let mut logdet = ctx.constant(Tensor::zeros(&[n]));
        let mut logprob = ctx.constant(Tensor::zeros(&[n]));
        let mut factored = Vec::new();
        let mut z = x;
        for (l, scale) in self.scales.iter().enumerate() {
            if self.config.squeeze {
                z = squeeze(ctx, z).layer(|| format!("scale{}.squeeze", l + 1))?;
            }
            let hl = self
                .scale_cond(ctx, h, l)
                .layer(|| format!("scale{}.cond", l + 1))?;
            for (k, step) in scale.steps.iter().enumerate() {
                let name = |part: &str| format!("scale{}.step{k}.{part}", l + 1);
                if let Some(an) = &step.actnorm {
                    let (y, ld) = match init.as_deref_mut() {
                        Some(updates) => {
                            let (y, ld, new) = an.forward_init(ctx, z).layer(|| name("actnorm"))?;
                            updates.extend(new);
                            (y, ld)
                        }
                        None => an.forward(ctx, z).layer(|| name("actnorm"))?,
                    };
                    z = y;
                    logdet = accumulate(ctx, logdet, ld)?;
                }
                let (y, ld) = step.inv.forward(ctx, z).layer(|| name("inv1x1"))?;
                z = y;
                logdet = accumulate(ctx, logdet, ld)?;
                let (y, ld) = step
                    .coupling
                    .forward(ctx, z, hl)
                    .layer(|| name("coupling"))?;
                z = y;
                logdet = accumulate(ctx, logdet, ld)?;
            }
            if let Some(split) = &scale.split {
                let (z0, z1, lp) = split
                    .forward(ctx, z, hl)
                    .layer(|| format!("scale{}.split", l + 1))?;
                factored.push((l, z1));
                logprob = accumulate(ctx, logprob, lp)?;
                z = z0;
            }
        }
        let last = self.scales.len() - 1;
        let hl = self.scale_cond(ctx, h, last)?;
        let lp = self
            .prior
            .logprob(ctx, z, hl)
            .layer(|| "prior".to_string())?;
        logprob = accumulate(ctx, logprob, lp)?;
        Ok(FlowVars {
            z,
            logdet,
            logprob,
            factored,
        })
    }

    /// Latent → data. Factored latents and the final latent are taken from
    /// `latents` when given, otherwise drawn from the priors.
    fn flow_reverse<R: Rng>(
        &self,
        ctx: &mut Ctx,
        h: Var,
        latents: Option<&FlowState>,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Var> {
        let last = self.scales.len() - 1;
        let hl = self.scale_cond(ctx, h, last)?;
        let mut z = match latents {
            Some(state) => ctx.constant(state.z.clone()),
            None => self.prior.sample(ctx, hl, temperature, rng)?,
        };
        for (l, scale) in self.scales.iter().enumerate().rev() {
            let hl = self.scale_cond(ctx, h, l)?;
            if let Some(split) = &scale.split {
                let given = match latents {
                    Some(state) => {
                        let t = state
                            .factored
                            .iter()
                            .find(|(s, _)| *s == l)
                            .map(|(_, t)| t.clone())
                            .ok_or_else(|| {
                                Error::Input(format!("missing latent for scale {}", l + 1))
                            })?;
                        Some(ctx.constant(t))
                    }
                    None => None,
                };
                z = split
                    .inverse(ctx, z, hl, given, temperature, rng)
                    .layer(|| format!("scale{}.split", l + 1))?;
            }
            for (k, step) in scale.steps.iter().enumerate().rev() {
                let name = |part: &str| format!("scale{}.step{k}.{part}", l + 1);
                z = step
                    .coupling
                    .inverse(ctx, z, hl)
                    .layer(|| name("coupling"))?;
                z = step.inv.inverse(ctx, z).layer(|| name("inv1x1"))?;
                if let Some(an) = &step.actnorm {
                    z = an.inverse(ctx, z).layer(|| name("actnorm"))?;
                }
            }
            if self.config.squeeze {
                z = unsqueeze(ctx, z)?;
            }
        }
        Ok(z)
    }

    /// Per-example negative log-likelihood `[N]` of `target` given `context`
    /// (frames in chronological order, each `[N, C, H, W]`).
    pub fn nll_var(
        &self,
        ctx: &mut Ctx,
        context: &[Var],
        target: Var,
        init: Option<&mut ParamUpdates>,
    ) -> Result<(Var, FlowVars)> {
        let (h, _) = self
            .conditioner
            .encode_var(ctx, context)
            .layer(|| "conditioner".to_string())?;
        let out = self.flow_forward(ctx, target, h, init)?;
        let total = ctx.g.add(out.logprob, out.logdet)?;
        let nll = ctx.g.neg(total)?;
        Ok((nll, out))
    }

    pub fn encode_context(&self, store: &ParamStore, frames: &[Tensor]) -> Result<MemoryState> {
        self.conditioner.encode_context(store, frames, None)
    }

    /// Returns per-example NLL (nats) and the latent state.
    pub fn forward_nll(
        &self,
        store: &ParamStore,
        x: &Tensor,
        memory: &MemoryState,
    ) -> Result<(Vec<f64>, FlowState)> {
        let mut ctx = Ctx::eval(store);
        let xv = ctx.constant(x.clone());
        let h = ctx.constant(memory.h.clone());
        let out = self.flow_forward(&mut ctx, xv, h, None)?;
        let logdet = ctx.value(out.logdet).data().to_vec();
        let logprob = ctx.value(out.logprob).data().to_vec();
        let nll = logdet.iter().zip(&logprob).map(|(a, b)| -(a + b)).collect();
        let state = FlowState {
            z: ctx.value(out.z).clone(),
            logdet,
            logprob_prior: logprob,
            factored: out
                .factored
                .iter()
                .map(|(l, v)| (*l, ctx.value(*v).clone()))
                .collect(),
        };
        Ok((nll, state))
    }

    /// Inverts the flow from the latents in `state`.
    pub fn reconstruct(
        &self,
        store: &ParamStore,
        state: &FlowState,
        memory: &MemoryState,
    ) -> Result<Tensor> {
        let mut ctx = Ctx::eval(store);
        let h = ctx.constant(memory.h.clone());
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let x = self.flow_reverse(&mut ctx, h, Some(state), 0.0, &mut unused)?;
        Ok(ctx.value(x).clone())
    }

    /// Draws one next frame per example of `memory`.
    pub fn sample<R: Rng>(
        &self,
        store: &ParamStore,
        memory: &MemoryState,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Tensor> {
        if !(temperature >= 0.0) {
            return Err(Error::Input(format!(
                "temperature {temperature} is negative"
            )));
        }
        let mut ctx = Ctx::eval(store);
        let h = ctx.constant(memory.h.clone());
        let x = self.flow_reverse(&mut ctx, h, None, temperature, rng)?;
        let out = ctx.value(x).clone();
        if !out.is_finite() {
            return Err(Error::Input("sample produced non-finite values".into()));
        }
        Ok(out)
    }

    /// Autoregressive rollout of `trajectories` ensemble members for `steps`
    /// frames, feeding each sample back into the memory.
    ///
    /// `context` holds single frames `[1, C, H, W]` in chronological order;
    /// the result is `[m, n, C, H, W]`.
    pub fn rollout<R: Rng>(
        &self,
        store: &ParamStore,
        context: &[Tensor],
        steps: usize,
        trajectories: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Tensor> {
        if context.is_empty() || steps == 0 || trajectories == 0 {
            return Err(Error::Input(
                "rollout needs a non-empty context and positive steps/trajectories".into(),
            ));
        }
        let frames: Vec<Tensor> = context
            .iter()
            .map(|f| {
                self.check_frame(f.shape())?;
                Ok(f.repeat_batch(trajectories)?)
            })
            .collect::<Result<_>>()?;
        let mut memory = self.encode_context(store, &frames)?;
        let c = &self.config;
        let frame = c.frame_dims();
        let mut out = vec![0.0; trajectories * steps * frame];
        for t in 0..steps {
            let x = self.sample(store, &memory, temperature, rng)?;
            for m in 0..trajectories {
                let dst = (m * steps + t) * frame;
                out[dst..dst + frame].copy_from_slice(&x.data()[m * frame..(m + 1) * frame]);
            }
            if t + 1 < steps {
                memory = self.conditioner.lstm_step(store, &x, &memory)?;
            }
        }
        Ok(Tensor::new(
            vec![trajectories, steps, c.in_channels, c.height, c.width],
            out,
        )?)
    }

    /// Data-dependent actnorm initialization from one batch.
    pub fn initialize_actnorm(
        &self,
        store: &mut ParamStore,
        context: &[Tensor],
        target: &Tensor,
    ) -> Result<()> {
        if !self.config.actnorm {
            return Ok(());
        }
        let mut updates = ParamUpdates::new();
        {
            let mut ctx = Ctx::eval(store);
            let frames: Vec<Var> = context.iter().map(|f| ctx.constant(f.clone())).collect();
            let target = ctx.constant(target.clone());
            self.nll_var(&mut ctx, &frames, target, Some(&mut updates))?;
        }
        for (id, value) in updates {
            store.set(id, value);
        }
        Ok(())
    }
}
