//! Forecast metrics, ensemble spread and the persistence baseline.

use std::io::Write;
use std::path::Path;

use log::warn;
use stflow_tensor::Tensor;

use crate::data::GridMeta;
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(pred: &Tensor, target: &Tensor, op: &str) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Input(format!(
            "{op}: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same(pred, target, "mse")?;
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

pub fn rmse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(mse(pred, target)?.sqrt())
}

/// `10·log10(range² / mse)`; `+∞` when the inputs are identical.
pub fn psnr(pred: &Tensor, target: &Tensor, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::Input(format!(
            "psnr data range {data_range} must be positive"
        )));
    }
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

/// Mean SSIM over all 7×7 windows of every `H×W` plane (the trailing two
/// dims), with population statistics.
pub fn ssim(pred: &Tensor, target: &Tensor, data_range: f64) -> Result<f64> {
    check_same(pred, target, "ssim")?;
    if !(data_range > 0.0) {
        return Err(Error::Input(format!(
            "ssim data range {data_range} must be positive"
        )));
    }
    let shape = pred.shape();
    if shape.len() < 2 {
        return Err(Error::Input(format!(
            "ssim needs at least 2-D input, got {shape:?}"
        )));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let planes = pred.len() / (h * w);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..planes {
        let x = &pred.data()[p * h * w..(p + 1) * h * w];
        let y = &target.data()[p * h * w..(p + 1) * h * w];
        for i in 0..=h - SSIM_WINDOW {
            for j in 0..=w - SSIM_WINDOW {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for di in 0..SSIM_WINDOW {
                    for dj in 0..SSIM_WINDOW {
                        let k = (i + di) * w + j + dj;
                        let (a, b) = (x[k], y[k]);
                        sx += a;
                        sy += b;
                        sxx += a * a;
                        syy += b * b;
                        sxy += a * b;
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let vx = sxx / n - mx * mx;
                let vy = syy / n - my * my;
                let cov = sxy / n - mx * my;
                let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
                let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Repeats the last context frame for `steps` lead times. `context` is
/// `[ctx, C, H, W]`; the result is `[steps, C, H, W]`.
pub fn persistence_baseline(context: &Tensor, steps: usize) -> Result<Tensor> {
    let (t, c, h, w) = context.dims4()?;
    if t == 0 || steps == 0 {
        return Err(Error::Input(
            "persistence needs context and positive steps".into(),
        ));
    }
    let last = context.narrow(0, t - 1, 1)?;
    let mut data = Vec::with_capacity(steps * c * h * w);
    for _ in 0..steps {
        data.extend_from_slice(last.data());
    }
    Ok(Tensor::new(vec![steps, c, h, w], data)?)
}

/// Per-step ensemble mean and per-pixel population std over trajectories of
/// `[m, n, C, H, W]`. Deviations are taken from the first member, so
/// identical trajectories give a std of exactly zero.
pub fn ensemble_stats(rollouts: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = rollouts.shape();
    if s.len() != 5 {
        return Err(Error::Input(format!(
            "rollouts must be [m, n, C, H, W], got {s:?}"
        )));
    }
    let (m, n) = (s[0], s[1]);
    let per = rollouts.len() / m;
    let d = rollouts.data();
    let mut mean = vec![0.0; per];
    let mut std = vec![0.0; per];
    for k in 0..per {
        let base = d[k];
        let mut sd = 0.0;
        let mut sdd = 0.0;
        for j in 0..m {
            let dev = d[j * per + k] - base;
            sd += dev;
            sdd += dev * dev;
        }
        let md = sd / m as f64;
        mean[k] = base + md;
        std[k] = (sdd / m as f64 - md * md).max(0.0).sqrt();
    }
    let shape = vec![n, s[2], s[3], s[4]];
    Ok((Tensor::new(shape.clone(), mean)?, Tensor::new(shape, std)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutReport {
    /// Physical units.
    pub rmse: Vec<f64>,
    pub ssim: Vec<f64>,
    /// dB; `+∞` for exact predictions.
    pub psnr: Vec<f64>,
    /// Per-pixel ensemble std per step, physical units, `[C, H, W]` each.
    pub ens_std: Vec<Tensor>,
    pub ens_std_mean: Vec<f64>,
    /// Number of context frames seen during training; leads past it are
    /// extrapolation.
    pub context_len: usize,
}

impl RolloutReport {
    pub fn steps(&self) -> usize {
        self.rmse.len()
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "step,rmse,ssim,psnr,ens_std_mean")?;
        for i in 0..self.steps() {
            writeln!(
                w,
                "{},{},{},{},{}",
                i + 1,
                self.rmse[i],
                self.ssim[i],
                self.psnr[i],
                self.ens_std_mean[i]
            )?;
        }
        Ok(())
    }
}

/// Per-lead metrics of the ensemble-mean forecast against `targets`.
///
/// `rollouts` is `[m, n, C, H, W]` and `targets` `[n, C, H, W]`, both
/// normalized; metrics are computed after denormalizing with `meta`.
pub fn rollout_report(
    rollouts: &Tensor,
    targets: &Tensor,
    meta: &GridMeta,
    context_len: usize,
) -> Result<RolloutReport> {
    let (mean, std) = ensemble_stats(rollouts)?;
    if mean.shape() != targets.shape() {
        return Err(Error::Input(format!(
            "rollout of {:?} does not match targets {:?}",
            mean.shape(),
            targets.shape()
        )));
    }
    let range = meta.data_range();
    let n = targets.shape()[0];
    let mut report = RolloutReport {
        rmse: Vec::with_capacity(n),
        ssim: Vec::with_capacity(n),
        psnr: Vec::with_capacity(n),
        ens_std: Vec::with_capacity(n),
        ens_std_mean: Vec::with_capacity(n),
        context_len,
    };
    let frame = &targets.shape()[1..];
    for t in 0..n {
        let pred = crate::data::denormalize(&mean.narrow(0, t, 1)?.reshape(frame)?, meta);
        let truth = crate::data::denormalize(&targets.narrow(0, t, 1)?.reshape(frame)?, meta);
        report.rmse.push(rmse(&pred, &truth)?);
        report.psnr.push(psnr(&pred, &truth, range)?);
        report.ssim.push(ssim(&pred, &truth, range)?);
        let sd = std.narrow(0, t, 1)?.reshape(frame)?.map(|v| v * range);
        report.ens_std_mean.push(sd.mean());
        report.ens_std.push(sd);
    }
    Ok(report)
}

/// Metrics of a point forecast `[n, C, H, W]` (e.g. persistence).
pub fn point_report(
    pred: &Tensor,
    targets: &Tensor,
    meta: &GridMeta,
    context_len: usize,
) -> Result<RolloutReport> {
    let s = pred.shape();
    let one = pred.clone().reshape(&[1, s[0], s[1], s[2], s[3]])?;
    rollout_report(&one, targets, meta, context_len)
}

/// Truncates `[.., n, ..]` targets to what exists, warning when short.
pub fn available_steps(requested: usize, available: usize) -> usize {
    if available < requested {
        warn!("only {available} ground-truth frames for {requested} steps; metrics truncated");
    }
    requested.min(available)
}

/// Writes an `H×W` plane as an ASCII graymap, mapping `[lo, lo + range]` to
/// `0..=255`.
pub fn write_pgm(
    path: &Path,
    plane: &[f64],
    h: usize,
    w: usize,
    lo: f64,
    range: f64,
) -> Result<()> {
    if plane.len() != h * w {
        return Err(Error::Input(format!(
            "{} values for a {h}x{w} image",
            plane.len()
        )));
    }
    let mut out = String::with_capacity(16 + plane.len() * 4);
    out.push_str(&format!("P2\n{w} {h}\n255\n"));
    for row in plane.chunks(w) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let g = if range > 0.0 {
                    (v - lo) / range * 255.0
                } else {
                    0.0
                };
                (g.round().clamp(0.0, 255.0) as u8).to_string()
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
