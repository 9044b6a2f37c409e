//! Flat `section.key=value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::{CondAdapt, ModelConfig};
use crate::optim::AdamConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Total optimizer steps; 0 derives the count from `epochs`.
    pub steps: u64,
    pub epochs: u64,
    pub batch: usize,
    pub log_every: u64,
    /// Validation bpd cadence in steps; 0 validates only at the start and end.
    pub val_every: u64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Cap on validation windows per evaluation; 0 uses all.
    pub val_windows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub path: PathBuf,
    pub context: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub trajectories: usize,
    pub steps: usize,
    /// Lead times printed in the summary table.
    pub leads: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: AdamConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value {value:?} for {key}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad(key, value))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v)).collect()
}

impl RunConfig {
    /// 16×16 frames, `L=2, K=2`, 32 hidden channels, batch 16.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: AdamConfig::default(),
            train: TrainConfig {
                steps: 0,
                epochs: 300,
                batch: 16,
                log_every: 10,
                val_every: 100,
                checkpoint_every: 1000,
                val_windows: 64,
            },
            data: DataConfig {
                path: PathBuf::from("data"),
                context: 2,
                train_frac: 0.7,
                val_frac: 0.2,
                test_frac: 0.1,
            },
            eval: EvalConfig {
                trajectories: 4,
                steps: 10,
                leads: vec![1, 3, 5],
            },
            seed: 0,
            out_dir: PathBuf::from("run"),
        }
    }

    /// Full-size architecture with batch 64.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.model = ModelConfig::paper();
        c.train.batch = 64;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    /// Canonical `(key, value)` pairs in serialization order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let o = &self.optim;
        let t = &self.train;
        let d = &self.data;
        let e = &self.eval;
        let leads: Vec<String> = e.leads.iter().map(|l| l.to_string()).collect();
        vec![
            ("model.L", m.levels.to_string()),
            ("model.K", m.steps.to_string()),
            ("model.in_channels", m.in_channels.to_string()),
            ("model.height", m.height.to_string()),
            ("model.width", m.width.to_string()),
            ("model.hidden_channels", m.hidden_channels.to_string()),
            ("model.coupling_hidden", m.coupling_hidden.to_string()),
            ("model.gated_hidden", m.gated_hidden.to_string()),
            ("model.gated_layers", m.gated_layers.to_string()),
            ("model.gated_residual", m.gated_residual.to_string()),
            ("model.actnorm", m.actnorm.to_string()),
            ("model.squeeze", m.squeeze.to_string()),
            ("model.cond_adapt", m.cond_adapt.as_str().to_string()),
            ("model.temperature", m.temperature.to_string()),
            ("model.jitter", m.jitter.to_string()),
            ("optim.lr", o.lr.to_string()),
            ("optim.beta1", o.beta1.to_string()),
            ("optim.beta2", o.beta2.to_string()),
            ("optim.eps", o.eps.to_string()),
            ("optim.decay_every", o.decay_every.to_string()),
            ("optim.decay_rate", o.decay_rate.to_string()),
            ("optim.ema_decay", o.ema_decay.to_string()),
            (
                "optim.clip_norm",
                o.clip_norm
                    .map_or_else(|| "none".to_string(), |c| c.to_string()),
            ),
            ("train.steps", t.steps.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch", t.batch.to_string()),
            ("train.log_every", t.log_every.to_string()),
            ("train.val_every", t.val_every.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("train.val_windows", t.val_windows.to_string()),
            ("data.path", d.path.display().to_string()),
            ("data.context", d.context.to_string()),
            ("data.train_frac", d.train_frac.to_string()),
            ("data.val_frac", d.val_frac.to_string()),
            ("data.test_frac", d.test_frac.to_string()),
            ("eval.trajectories", e.trajectories.to_string()),
            ("eval.steps", e.steps.to_string()),
            ("eval.leads", leads.join(",")),
            ("run.seed", self.seed.to_string()),
            ("run.out_dir", self.out_dir.display().to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let o = &mut self.optim;
        let t = &mut self.train;
        let d = &mut self.data;
        let e = &mut self.eval;
        match key.trim() {
            "model.L" => m.levels = parse_num(key, v)?,
            "model.K" => m.steps = parse_num(key, v)?,
            "model.in_channels" => m.in_channels = parse_num(key, v)?,
            "model.height" => m.height = parse_num(key, v)?,
            "model.width" => m.width = parse_num(key, v)?,
            "model.hidden_channels" => m.hidden_channels = parse_num(key, v)?,
            "model.coupling_hidden" => m.coupling_hidden = parse_num(key, v)?,
            "model.gated_hidden" => m.gated_hidden = parse_num(key, v)?,
            "model.gated_layers" => m.gated_layers = parse_num(key, v)?,
            "model.gated_residual" => m.gated_residual = parse_bool(key, v)?,
            "model.actnorm" => m.actnorm = parse_bool(key, v)?,
            "model.squeeze" => m.squeeze = parse_bool(key, v)?,
            "model.cond_adapt" => m.cond_adapt = CondAdapt::parse(v).ok_or_else(|| bad(key, v))?,
            "model.temperature" => m.temperature = parse_num(key, v)?,
            "model.jitter" => m.jitter = parse_num(key, v)?,
            "optim.lr" => o.lr = parse_num(key, v)?,
            "optim.beta1" => o.beta1 = parse_num(key, v)?,
            "optim.beta2" => o.beta2 = parse_num(key, v)?,
            "optim.eps" => o.eps = parse_num(key, v)?,
            "optim.decay_every" => o.decay_every = parse_num(key, v)?,
            "optim.decay_rate" => o.decay_rate = parse_num(key, v)?,
            "optim.ema_decay" => o.ema_decay = parse_num(key, v)?,
            "optim.clip_norm" => {
                o.clip_norm = if v == "none" {
                    None
                } else {
                    Some(parse_num(key, v)?)
                }
            }
            "train.steps" => t.steps = parse_num(key, v)?,
            "train.epochs" => t.epochs = parse_num(key, v)?,
            "train.batch" => t.batch = parse_num(key, v)?,
            "train.log_every" => t.log_every = parse_num(key, v)?,
            "train.val_every" => t.val_every = parse_num(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_num(key, v)?,
            "train.val_windows" => t.val_windows = parse_num(key, v)?,
            "data.path" => d.path = PathBuf::from(v),
            "data.context" => d.context = parse_num(key, v)?,
            "data.train_frac" => d.train_frac = parse_num(key, v)?,
            "data.val_frac" => d.val_frac = parse_num(key, v)?,
            "data.test_frac" => d.test_frac = parse_num(key, v)?,
            "eval.trajectories" => e.trajectories = parse_num(key, v)?,
            "eval.steps" => e.steps = parse_num(key, v)?,
            "eval.leads" => e.leads = parse_list(key, v)?,
            "run.seed" => self.seed = parse_num(key, v)?,
            "run.out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses text over the desk defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::desk();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if self.data.context == 0 {
            return Err(Error::Config("data.context must be positive".into()));
        }
        let sum = self.data.train_frac + self.data.val_frac + self.data.test_frac;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions sum to {sum}, not 1"
            )));
        }
        let o = &self.optim;
        if !(o.lr > 0.0)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !(o.eps > 0.0)
        {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if !(0.0..1.0).contains(&o.ema_decay) {
            return Err(Error::Config("optim.ema_decay must lie in [0, 1)".into()));
        }
        if self.eval.trajectories == 0 || self.eval.steps == 0 {
            return Err(Error::Config(
                "eval.trajectories and eval.steps must be positive".into(),
            ));
        }
        Ok(())
    }
}
