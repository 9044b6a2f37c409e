use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use stflow_core::data::{self, GridSequence, WindowIndex};
use stflow_core::metrics::{self, RolloutReport};
use stflow_core::train::{self, ForecastCase, ForecastSettings};
use stflow_core::verify::{self, VerifyOptions};
use stflow_core::{Checkpoint, Error, GridMeta, ParamStore, RunConfig, StFlow, Trainer};
use stflow_tensor::TensorError;

use crate::{
    Command, ConfigSource, DataKind, EvaluateArgs, MakeDataArgs, RolloutArgs, SampleArgs,
    SplitName, TrainArgs, VerifyArgs,
};

pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        Error::from(e).into()
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CmdResult<T = u8> = Result<T, Failure>;

pub fn run(command: Command, overrides: &[(String, String)]) -> CmdResult {
    let needs_config = matches!(
        command,
        Command::Train(_)
            | Command::Evaluate(_)
            | Command::Rollout(_)
            | Command::Sample(_)
            | Command::Config(_)
    );
    if !needs_config && !overrides.is_empty() {
        return Err(Failure::usage(format!(
            "configuration overrides are not accepted by this command: --{}",
            overrides[0].0
        )));
    }
    match command {
        Command::MakeData(a) => make_data(&a),
        Command::Train(a) => train_cmd(&a, overrides),
        Command::Evaluate(a) => evaluate_cmd(&a, overrides),
        Command::Rollout(a) => rollout_cmd(&a, overrides),
        Command::Sample(a) => sample_cmd(&a, overrides),
        Command::Verify(a) => verify_cmd(&a),
        Command::Config(a) => {
            print!("{}", resolve_config(&a.source, overrides)?.to_text());
            Ok(0)
        }
    }
}

fn env_seed() -> CmdResult<Option<u64>> {
    match std::env::var("STFLOW_SEED") {
        Ok(v) => {
            v.trim().parse().map(Some).map_err(|_| {
                Failure::usage(format!("STFLOW_SEED={v:?} is not an unsigned integer"))
            })
        }
        Err(_) => Ok(None),
    }
}

/// Applies `STFLOW_SEED`, then the command-line overrides.
fn apply_overrides(config: &mut RunConfig, overrides: &[(String, String)]) -> CmdResult<()> {
    if let Some(seed) = env_seed()? {
        config.seed = seed;
    }
    for (k, v) in overrides {
        config.set(k, v)?;
    }
    config.validate()?;
    Ok(())
}

fn resolve_config(source: &ConfigSource, overrides: &[(String, String)]) -> CmdResult<RunConfig> {
    let mut config = RunConfig::preset(&source.preset)?;
    if let Some(path) = &source.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        config.apply_text(&text)?;
    }
    apply_overrides(&mut config, overrides)?;
    Ok(config)
}

fn make_data(a: &MakeDataArgs) -> CmdResult {
    let seqs = match a.kind {
        DataKind::Advection => data::synth_advection(
            a.height,
            a.width,
            a.frames,
            a.sequences,
            (a.vx, a.vy),
            a.seed,
        )?,
        DataKind::Stochastic => {
            data::synth_stochastic(a.height, a.width, a.frames, a.sequences, a.noise, a.seed)?
        }
    };
    let paths: Vec<PathBuf> = if seqs.len() == 1 {
        if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        vec![a.out.clone()]
    } else {
        std::fs::create_dir_all(&a.out)?;
        (0..seqs.len())
            .map(|i| a.out.join(format!("seq_{i:04}.stgrid")))
            .collect()
    };
    for (seq, path) in seqs.iter().zip(&paths) {
        data::save_grid(path, seq)?;
        let (t, c, h, w) = seq.frames.dims4()?;
        let lo = seq
            .frames
            .data()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        let hi = seq
            .frames
            .data()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        println!(
            "{}: T={t} C={c} H={h} W={w} range [{lo:.6}, {hi:.6}] {}",
            path.display(),
            seq.meta.units
        );
    }
    Ok(0)
}

fn train_cmd(a: &TrainArgs, overrides: &[(String, String)]) -> CmdResult {
    let mut trainer = match &a.resume {
        Some(path) => {
            let (model, mut ckpt) = Checkpoint::load(path)?;
            let mut config = ckpt.config.clone();
            if let Some(file) = &a.source.config {
                let text = std::fs::read_to_string(file).map_err(|e| {
                    Failure::usage(format!("cannot read config {}: {e}", file.display()))
                })?;
                config.apply_text(&text)?;
            }
            apply_overrides(&mut config, overrides)?;
            let old = &ckpt.config;
            if config.model != old.model
                || config.optim != old.optim
                || config.data.context != old.data.context
            {
                return Err(Failure::usage(
                    "model, optimizer and context settings cannot change on resume",
                ));
            }
            if config.seed != old.seed {
                return Err(Failure::usage(format!(
                    "seed {} differs from the checkpoint's seed {}",
                    config.seed, old.seed
                )));
            }
            ckpt.config = config;
            let dataset = data::load_dataset(&ckpt.config.data.path)?;
            info!("resuming from {} at step {}", path.display(), ckpt.step);
            Trainer::resume(model, ckpt, dataset)?
        }
        None => {
            let config = resolve_config(&a.source, overrides)?;
            let dataset = data::load_dataset(&config.data.path)?;
            Trainer::new(config, dataset)?
        }
    };
    let total = trainer.total_steps();
    let out_dir = trainer.config.out_dir.clone();
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.txt"), trainer.config.to_text())?;
    info!(
        "training {} parameters for {total} steps on {} windows",
        trainer.params.trainable_count(),
        trainer.splits.train.len()
    );
    trainer.run(total, Some(&out_dir))?;
    if let Some((step, bpd)) = trainer.val_curve().last() {
        println!("step {step}: validation bpd {bpd:.6}");
    }
    println!("checkpoint {}", out_dir.join("final.ckpt").display());
    Ok(0)
}

/// A checkpoint, the configuration it is used under and the windows of one
/// split of its dataset.
struct Loaded {
    model: StFlow,
    ema: ParamStore,
    config: RunConfig,
    meta: GridMeta,
    dataset: Vec<GridSequence>,
    windows: Vec<WindowIndex>,
}

impl Loaded {
    fn open(path: &Path, split: SplitName, overrides: &[(String, String)]) -> CmdResult<Self> {
        let (model, ckpt) = Checkpoint::load(path)?;
        let mut config = ckpt.config.clone();
        apply_overrides(&mut config, overrides)?;
        if config.model != ckpt.config.model || config.data.context != ckpt.config.data.context {
            return Err(Failure::usage(
                "model and context settings cannot be overridden for a trained checkpoint",
            ));
        }
        let mut dataset = data::load_dataset(&config.data.path)?;
        let (all, splits) = train::prepare_splits(&ckpt.config, &dataset)?;
        data::apply_normalization(&mut dataset, ckpt.state.min_z, ckpt.state.max_z);
        let picked = match split {
            SplitName::Train => &splits.train,
            SplitName::Val => &splits.val,
            SplitName::Test => &splits.test,
        };
        let windows = picked.iter().map(|&i| all[i]).collect();
        Ok(Self {
            ema: ckpt.optim.ema_params(&ckpt.params),
            meta: dataset[0].meta.clone(),
            model,
            config,
            dataset,
            windows,
        })
    }

    fn case(&self, window: usize, steps: usize) -> CmdResult<ForecastCase> {
        let w = *self.windows.get(window).ok_or_else(|| {
            Failure::usage(format!(
                "window {window} out of range; the split has {}",
                self.windows.len()
            ))
        })?;
        let mut cases =
            train::forecast_cases(&self.dataset, &[w], self.config.data.context, steps)?;
        Ok(cases.remove(0))
    }
}

fn write_csv(path: &Path, report: &RolloutReport) -> CmdResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    report.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn evaluate_cmd(a: &EvaluateArgs, overrides: &[(String, String)]) -> CmdResult {
    let run = Loaded::open(&a.checkpoint, a.split, overrides)?;
    let e = &run.config.eval;
    if let Some(&bad) = e.leads.iter().find(|&&l| l == 0 || l > e.steps) {
        return Err(Failure::usage(format!(
            "lead {bad} outside 1..={}",
            e.steps
        )));
    }
    let cases =
        train::forecast_cases(&run.dataset, &run.windows, run.config.data.context, e.steps)?;
    let settings = ForecastSettings {
        steps: e.steps,
        trajectories: e.trajectories,
        temperature: a.temperature,
        seed: run.config.seed,
    };
    let mut ev = train::evaluate(&run.model, &run.ema, &cases, &run.meta, &settings)?;
    if a.oracle {
        let reports = cases
            .iter()
            .filter_map(|c| c.truth.as_ref().filter(|t| t.shape()[0] == e.steps))
            .map(|t| metrics::point_report(t, t, &run.meta, run.config.data.context))
            .collect::<Result<Vec<_>, _>>()?;
        ev.flow = train::average_reports(&reports)?;
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| run.config.out_dir.join("eval"));
    std::fs::create_dir_all(&out)?;
    write_csv(&out.join("flow.csv"), &ev.flow)?;
    write_csv(&out.join("persistence.csv"), &ev.persistence)?;

    let units = &run.meta.units;
    println!(
        "{} cases, {} trajectories, temperature {}; context window {} frames, leads count frames after it",
        ev.cases, e.trajectories, a.temperature, ev.flow.context_len
    );
    println!(
        "{:>5} {:>8} {:>14} {:>14} {:>10} {:>10}",
        "lead", "hours", "flow_rmse", "persist_rmse", "flow_ssim", "pers_ssim"
    );
    for &lead in &e.leads {
        let i = lead - 1;
        println!(
            "{:>5} {:>8} {:>14.6} {:>14.6} {:>10.4} {:>10.4}",
            lead,
            lead as f64 * run.meta.hours_per_step,
            ev.flow.rmse[i],
            ev.persistence.rmse[i],
            ev.flow.ssim[i],
            ev.persistence.ssim[i]
        );
    }
    println!("rmse in {units}; per-lead metrics in {}", out.display());
    Ok(0)
}

fn plane_name(step: usize, channel: usize, channels: usize) -> String {
    if channels == 1 {
        format!("step_{step:03}.pgm")
    } else {
        format!("step_{step:03}_c{channel}.pgm")
    }
}

fn rollout_cmd(a: &RolloutArgs, overrides: &[(String, String)]) -> CmdResult {
    let run = Loaded::open(&a.checkpoint, a.split, overrides)?;
    let steps = a.steps.unwrap_or(run.config.eval.steps);
    let m = a.trajectories.unwrap_or(run.config.eval.trajectories);
    let case = run.case(a.window, steps)?;
    let frames = train::context_frames(&case.context)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.config.seed);
    let roll = run
        .model
        .rollout(&run.ema, &frames, steps, m, a.temperature, &mut rng)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| run.config.out_dir.join("rollout"));
    let (_, std) = metrics::ensemble_stats(&roll)?;
    let meta = &run.meta;
    let range = meta.data_range();
    let mc = run.model.config();
    let (c, h, w) = (mc.in_channels, mc.height, mc.width);
    let plane = h * w;
    for k in 0..m {
        let dir = out.join(format!("traj_{k:02}"));
        std::fs::create_dir_all(&dir)?;
        let member = data::denormalize(&roll.narrow(0, k, 1)?, meta);
        for t in 0..steps {
            for ch in 0..c {
                let at = (t * c + ch) * plane;
                let path = dir.join(plane_name(t + 1, ch, c));
                metrics::write_pgm(
                    &path,
                    &member.data()[at..at + plane],
                    h,
                    w,
                    meta.min_z,
                    range,
                )?;
            }
        }
    }
    let std_dir = out.join("std");
    std::fs::create_dir_all(&std_dir)?;
    let std = std.map(|v| v * range);
    for t in 0..steps {
        for ch in 0..c {
            let at = (t * c + ch) * plane;
            metrics::write_pgm(
                &std_dir.join(plane_name(t + 1, ch, c)),
                &std.data()[at..at + plane],
                h,
                w,
                0.0,
                range,
            )?;
        }
    }
    match &case.truth {
        Some(truth) => {
            let n = metrics::available_steps(steps, truth.shape()[0]);
            let report = metrics::rollout_report(
                &roll.narrow(1, 0, n)?,
                &truth.narrow(0, 0, n)?,
                meta,
                frames.len(),
            )?;
            write_csv(&out.join("metrics.csv"), &report)?;
            for i in 0..n {
                println!(
                    "step {:>3}: rmse {:.6} ssim {:.4} psnr {:.2} ens_std {:.6}",
                    i + 1,
                    report.rmse[i],
                    report.ssim[i],
                    report.psnr[i],
                    report.ens_std_mean[i]
                );
            }
        }
        None => warn!("no ground truth after this window; metrics skipped"),
    }
    println!("{m} trajectories of {steps} steps in {}", out.display());
    Ok(0)
}

fn sample_cmd(a: &SampleArgs, overrides: &[(String, String)]) -> CmdResult {
    if a.count == 0 {
        return Err(Failure::usage("--count must be positive"));
    }
    let run = Loaded::open(&a.checkpoint, a.split, overrides)?;
    let case = run.case(a.window, 1)?;
    let frames: Vec<_> = train::context_frames(&case.context)?
        .iter()
        .map(|f| f.repeat_batch(a.count))
        .collect::<Result<_, _>>()?;
    let memory = run.model.encode_context(&run.ema, &frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.config.seed);
    let x = run
        .model
        .sample(&run.ema, &memory, a.temperature, &mut rng)?;
    let x = data::denormalize(&x, &run.meta);
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| run.config.out_dir.join("samples"));
    std::fs::create_dir_all(&out)?;
    let mc = run.model.config();
    let (c, h, w) = (mc.in_channels, mc.height, mc.width);
    let plane = h * w;
    for i in 0..a.count {
        for ch in 0..c {
            let at = (i * c + ch) * plane;
            let name = if c == 1 {
                format!("sample_{i:03}.pgm")
            } else {
                format!("sample_{i:03}_c{ch}.pgm")
            };
            metrics::write_pgm(
                &out.join(name),
                &x.data()[at..at + plane],
                h,
                w,
                run.meta.min_z,
                run.meta.data_range(),
            )?;
        }
    }
    let mean = x.mean();
    println!(
        "{} samples, mean {mean:.6} {}, written to {}",
        a.count,
        run.meta.units,
        out.display()
    );
    Ok(0)
}

fn verify_cmd(a: &VerifyArgs) -> CmdResult {
    let checks = verify::run_checks(&VerifyOptions {
        corrupt_inverse: a.corrupt_inverse,
        seed: a.seed,
    })?;
    let all = checks.iter().all(|c| c.passed);
    for c in &checks {
        println!(
            "{}",
            json!({"check": c.name, "measured": c.measured, "tolerance": c.tolerance, "passed": c.passed})
        );
    }
    println!(
        "{}",
        json!({"summary": true, "checks": checks.len(), "passed": all})
    );
    Ok(if all { 0 } else { 1 })
}
