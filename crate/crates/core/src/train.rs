//! Training loop, validation, checkpointing and forecast evaluation.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stflow_tensor::{Tensor, Var};

use crate::checkpoint::{Checkpoint, TrainState};
use crate::config::RunConfig;
use crate::data::{self, GridMeta, GridSequence, Splits, WindowIndex};
use crate::error::{Error, Result};
use crate::metrics::{self, RolloutReport};
use crate::model::{bits_per_dim, StFlow};
use crate::optim::Adam;
use crate::params::{Ctx, ParamStore};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub enum LogRecord {
    Train {
        step: u64,
        lr: f64,
        nll: f64,
        bpd: f64,
    },
    Val {
        step: u64,
        bpd: f64,
    },
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        match self {
            LogRecord::Train { step, lr, nll, bpd } => {
                format!("train step={step} lr={lr} nll={nll} bpd={bpd}")
            }
            LogRecord::Val { step, bpd } => format!("val step={step} bpd={bpd}"),
        }
    }
}

/// Deterministic per-step generator, independent of how many steps ran
/// before in this process.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_add(1));
    rng
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: StFlow,
    pub params: ParamStore,
    pub optim: Adam,
    /// Sequences carrying the fitted normalization range in their metadata.
    pub dataset: Vec<GridSequence>,
    pub windows: Vec<WindowIndex>,
    pub splits: Splits,
    pub state: TrainState,
    pub log: Vec<LogRecord>,
}

impl Trainer {
    /// Splits the windows, fits normalization on the training split and
    /// builds a fresh model.
    pub fn new(config: RunConfig, mut dataset: Vec<GridSequence>) -> Result<Self> {
        config.validate()?;
        let (windows, splits) = prepare_splits(&config, &dataset)?;
        let train: Vec<WindowIndex> = splits.train.iter().map(|&i| windows[i]).collect();
        let (min_z, max_z) = data::normalize_fit(&dataset, &train, config.data.context)?;
        data::apply_normalization(&mut dataset, min_z, max_z);
        let (model, params) = StFlow::build(&config.model, config.seed)?;
        let optim = Adam::new(config.optim.clone(), &params);
        Ok(Self {
            state: TrainState {
                actnorm_initialized: !config.model.actnorm,
                min_z,
                max_z,
            },
            config,
            model,
            params,
            optim,
            dataset,
            windows,
            splits,
            log: Vec::new(),
        })
    }

    /// Continues from a checkpoint; the dataset must be the one it was
    /// trained on.
    pub fn resume(model: StFlow, ckpt: Checkpoint, mut dataset: Vec<GridSequence>) -> Result<Self> {
        let (windows, splits) = prepare_splits(&ckpt.config, &dataset)?;
        data::apply_normalization(&mut dataset, ckpt.state.min_z, ckpt.state.max_z);
        Ok(Self {
            config: ckpt.config,
            model,
            params: ckpt.params,
            optim: ckpt.optim,
            dataset,
            windows,
            splits,
            state: ckpt.state,
            log: Vec::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.optim.step
    }

    pub fn meta(&self) -> &GridMeta {
        &self.dataset[0].meta
    }

    /// Steps requested by the configuration.
    pub fn total_steps(&self) -> u64 {
        if self.config.train.steps > 0 {
            return self.config.train.steps;
        }
        let per_epoch = self.splits.train.len().div_ceil(self.config.train.batch) as u64;
        per_epoch * self.config.train.epochs
    }

    fn batch_for(&self, step: u64) -> Result<(Vec<Tensor>, Tensor)> {
        let mut rng = step_rng(self.config.seed, step);
        let train = &self.splits.train;
        let b = self.config.train.batch;
        let picks: Vec<WindowIndex> = if b <= train.len() {
            index::sample(&mut rng, train.len(), b)
                .into_iter()
                .map(|i| self.windows[train[i]])
                .collect()
        } else {
            (0..b)
                .map(|_| self.windows[train[rng.gen_range(0..train.len())]])
                .collect()
        };
        let (ctx, mut target) =
            data::assemble_batch(&self.dataset, &picks, self.config.data.context)?;
        let jitter = self.config.model.jitter;
        if jitter > 0.0 {
            for v in target.data_mut() {
                *v += jitter * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok((ctx, target))
    }

    /// Data-dependent actnorm initialization from the first training batch.
    pub fn initialize(&mut self) -> Result<()> {
        if self.state.actnorm_initialized {
            return Ok(());
        }
        let (ctx, target) = self.batch_for(0)?;
        self.model
            .initialize_actnorm(&mut self.params, &ctx, &target)?;
        self.optim.reset_ema(&self.params);
        self.state.actnorm_initialized = true;
        Ok(())
    }

    /// One optimizer update; returns the batch-mean NLL in nats.
    pub fn train_step(&mut self) -> Result<LogRecord> {
        self.initialize()?;
        let step = self.optim.step;
        let (ctx_frames, target) = self.batch_for(step)?;
        let (nll, grads) = {
            let mut ctx = Ctx::train(&self.params);
            let frames: Vec<Var> = ctx_frames.into_iter().map(|f| ctx.constant(f)).collect();
            let target = ctx.constant(target);
            let (nll, _) = self.model.nll_var(&mut ctx, &frames, target, None)?;
            let loss = ctx.g.mean(nll)?;
            let value = ctx.value(loss).item();
            (value, ctx.param_grads(loss)?)
        };
        let lr = self.optim.update(&mut self.params, &grads)?;
        let dims = self.config.model.frame_dims();
        Ok(LogRecord::Train {
            step: self.optim.step,
            lr,
            nll,
            bpd: bits_per_dim(nll, dims),
        })
    }

    /// Windows used for validation, capped by `train.val_windows`.
    pub fn val_windows(&self) -> Vec<WindowIndex> {
        let cap = match self.config.train.val_windows {
            0 => usize::MAX,
            n => n,
        };
        self.splits
            .val
            .iter()
            .take(cap)
            .map(|&i| self.windows[i])
            .collect()
    }

    /// Mean validation bits per dimension under the EMA parameters.
    pub fn validate(&self) -> Result<f64> {
        let windows = self.val_windows();
        let ema = self.optim.ema_params(&self.params);
        mean_bpd(
            &self.model,
            &ema,
            &self.dataset,
            &windows,
            self.config.data.context,
            self.config.train.batch,
        )
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            state: self.state.clone(),
            params: self.params.clone(),
            optim: self.optim.clone(),
            step: self.optim.step,
            seed: self.config.seed,
        }
    }

    fn emit(&mut self, rec: LogRecord, sink: &mut Option<BufWriter<File>>) -> Result<()> {
        let line = rec.to_line();
        info!("{line}");
        if let Some(w) = sink {
            writeln!(w, "{line}")?;
            w.flush()?;
        }
        self.log.push(rec);
        Ok(())
    }

    /// Trains up to `until` steps. Writes `train.log` and checkpoints under
    /// `out_dir` when given; a fresh run truncates the log, a resumed one
    /// appends.
    pub fn run(&mut self, until: u64, out_dir: Option<&Path>) -> Result<()> {
        let fresh = self.optim.step == 0;
        let mut sink = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join("train.log");
                let file = if fresh {
                    File::create(path)?
                } else {
                    OpenOptions::new().append(true).create(true).open(path)?
                };
                Some(BufWriter::new(file))
            }
            None => None,
        };
        let t = self.config.train.clone();
        if fresh {
            self.initialize()?;
            let bpd = self.validate()?;
            self.emit(LogRecord::Val { step: 0, bpd }, &mut sink)?;
        }
        while self.optim.step < until {
            let rec = self.train_step()?;
            let step = self.optim.step;
            if t.log_every > 0 && (step % t.log_every == 0 || step == until) {
                self.emit(rec, &mut sink)?;
            }
            let val_due = t.val_every > 0 && step % t.val_every == 0;
            if val_due || step == until {
                let bpd = self.validate()?;
                self.emit(LogRecord::Val { step, bpd }, &mut sink)?;
            }
            if let Some(dir) = out_dir {
                if t.checkpoint_every > 0 && step % t.checkpoint_every == 0 {
                    self.checkpoint().save(&checkpoint_path(dir, step))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join("final.ckpt"))?;
        }
        Ok(())
    }

    /// Validation bpd records in order.
    pub fn val_curve(&self) -> Vec<(u64, f64)> {
        self.log
            .iter()
            .filter_map(|r| match r {
                LogRecord::Val { step, bpd } => Some((*step, *bpd)),
                _ => None,
            })
            .collect()
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:08}.ckpt"))
}

pub fn prepare_splits(
    config: &RunConfig,
    dataset: &[GridSequence],
) -> Result<(Vec<WindowIndex>, Splits)> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::Data("dataset is empty".into()))?;
    let [c, h, w] = first.frame_shape();
    let m = &config.model;
    if dataset.iter().any(|s| s.frame_shape() != [c, h, w]) {
        return Err(Error::Data("sequences have differing frame shapes".into()));
    }
    if [c, h, w] != [m.in_channels, m.height, m.width] {
        return Err(Error::Config(format!(
            "data frames are {c}x{h}x{w}, model expects {}x{}x{}",
            m.in_channels, m.height, m.width
        )));
    }
    let windows = data::window_indices(dataset, config.data.context)?;
    let d = &config.data;
    let splits = data::split_temporal(
        windows.len(),
        [d.train_frac, d.val_frac, d.test_frac],
        config.seed,
    )?;
    Ok((windows, splits))
}

/// Mean bits per dimension of `windows` evaluated in batches.
pub fn mean_bpd(
    model: &StFlow,
    params: &ParamStore,
    dataset: &[GridSequence],
    windows: &[WindowIndex],
    context: usize,
    batch: usize,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    let mut total = 0.0;
    for chunk in windows.chunks(batch.max(1)) {
        let (ctx, target) = data::assemble_batch(dataset, chunk, context)?;
        let memory = model.encode_context(params, &ctx)?;
        let (nll, _) = model.forward_nll(params, &target, &memory)?;
        total += nll.iter().sum::<f64>();
    }
    let mean = total / windows.len() as f64;
    Ok(bits_per_dim(mean, model.config().frame_dims()))
}

/// A rollout starting point: normalized context frames and the ground truth
/// that follows them.
#[derive(Debug, Clone)]
pub struct ForecastCase {
    /// `[ctx, C, H, W]`
    pub context: Tensor,
    /// `[available, C, H, W]`, possibly shorter than the requested steps.
    pub truth: Option<Tensor>,
}

/// Cases starting at the given windows with up to `steps` frames of truth.
pub fn forecast_cases(
    dataset: &[GridSequence],
    windows: &[WindowIndex],
    context: usize,
    steps: usize,
) -> Result<Vec<ForecastCase>> {
    windows
        .iter()
        .map(|w| {
            let seq = &dataset[w.seq];
            let ctx = data::normalize(&seq.frames.narrow(0, w.start, context)?, &seq.meta);
            let first = w.start + context;
            let avail = seq.len().saturating_sub(first).min(steps);
            let truth = if avail > 0 {
                Some(data::normalize(
                    &seq.frames.narrow(0, first, avail)?,
                    &seq.meta,
                ))
            } else {
                None
            };
            Ok(ForecastCase {
                context: ctx,
                truth,
            })
        })
        .collect()
}

/// Splits `[ctx, C, H, W]` into single frames `[1, C, H, W]`.
pub fn context_frames(context: &Tensor) -> Result<Vec<Tensor>> {
    let t = context.shape()[0];
    (0..t).map(|i| Ok(context.narrow(0, i, 1)?)).collect()
}

/// Averages reports of equal length lead by lead.
pub fn average_reports(reports: &[RolloutReport]) -> Result<RolloutReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Input("no reports to average".into()))?;
    let n = first.steps();
    if reports.iter().any(|r| r.steps() != n) {
        return Err(Error::Input("reports differ in length".into()));
    }
    let k = reports.len() as f64;
    let avg = |f: &dyn Fn(&RolloutReport) -> &Vec<f64>| -> Vec<f64> {
        (0..n)
            .map(|i| reports.iter().map(|r| f(r)[i]).sum::<f64>() / k)
            .collect()
    };
    let ens_std = (0..n)
        .map(|i| {
            let mut acc = Tensor::zeros(first.ens_std[i].shape());
            for r in reports {
                acc = acc.zip_map(&r.ens_std[i], |a, b| a + b)?;
            }
            Ok(acc.map(|v| v / k))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutReport {
        rmse: avg(&|r| &r.rmse),
        ssim: avg(&|r| &r.ssim),
        psnr: avg(&|r| &r.psnr),
        ens_std,
        ens_std_mean: avg(&|r| &r.ens_std_mean),
        context_len: first.context_len,
    })
}

/// Flow and persistence reports over the cases with complete ground truth,
/// averaged lead by lead.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub flow: RolloutReport,
    pub persistence: RolloutReport,
    pub cases: usize,
}

pub struct ForecastSettings {
    pub steps: usize,
    pub trajectories: usize,
    pub temperature: f64,
    pub seed: u64,
}

pub fn evaluate(
    model: &StFlow,
    params: &ParamStore,
    cases: &[ForecastCase],
    meta: &GridMeta,
    settings: &ForecastSettings,
) -> Result<Evaluation> {
    let mut flow = Vec::new();
    let mut persistence = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let truth = match &case.truth {
            Some(t) if t.shape()[0] == settings.steps => t,
            _ => continue,
        };
        let mut rng = step_rng(settings.seed, i as u64);
        let frames = context_frames(&case.context)?;
        let roll = model.rollout(
            params,
            &frames,
            settings.steps,
            settings.trajectories,
            settings.temperature,
            &mut rng,
        )?;
        let ctx_len = frames.len();
        flow.push(metrics::rollout_report(&roll, truth, meta, ctx_len)?);
        let base = metrics::persistence_baseline(&case.context, settings.steps)?;
        persistence.push(metrics::point_report(&base, truth, meta, ctx_len)?);
    }
    if flow.is_empty() {
        return Err(Error::Data(format!(
            "no evaluation case has {} frames of ground truth",
            settings.steps
        )));
    }
    Ok(Evaluation {
        cases: flow.len(),
        flow: average_reports(&flow)?,
        persistence: average_reports(&persistence)?,
    })
}
