//! Grid sequences, normalization, windowing, splits, synthetic generators and
//! the STGRID binary format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stflow_tensor::io::{write_values, CountingReader};
use stflow_tensor::{DType, Tensor, TensorError};

use crate::error::{lift_format, Error, Result};

pub const STGRID_MAGIC: &[u8; 8] = b"STGRID01";

#[derive(Debug, Clone, PartialEq)]
pub struct GridMeta {
    pub variable: String,
    pub units: String,
    pub hours_per_step: f64,
    pub min_z: f64,
    pub max_z: f64,
}

impl GridMeta {
    pub fn data_range(&self) -> f64 {
        self.max_z - self.min_z
    }

    fn to_text(&self) -> String {
        format!(
            "variable={}\nunits={}\nhours_per_step={}\nmin_z={}\nmax_z={}\n",
            self.variable, self.units, self.hours_per_step, self.min_z, self.max_z
        )
    }

    fn from_text(text: &str) -> Result<Self> {
        let mut meta = GridMeta {
            variable: String::new(),
            units: String::new(),
            hours_per_step: 1.0,
            min_z: 0.0,
            max_z: 1.0,
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("metadata line without '=': {line}")))?;
            let num = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("bad number for {k}: {v}")))
            };
            match k.trim() {
                "variable" => meta.variable = v.to_string(),
                "units" => meta.units = v.to_string(),
                "hours_per_step" => meta.hours_per_step = num(v)?,
                "min_z" => meta.min_z = num(v)?,
                "max_z" => meta.max_z = num(v)?,
                other => return Err(Error::Data(format!("unknown metadata key {other}"))),
            }
        }
        Ok(meta)
    }
}

/// `T×C×H×W` frames in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSequence {
    pub frames: Tensor,
    pub meta: GridMeta,
}

impl GridSequence {
    pub fn new(frames: Tensor, meta: GridMeta) -> Result<Self> {
        frames.dims4()?;
        Ok(Self { frames, meta })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W]` of one frame.
    pub fn frame_shape(&self) -> [usize; 3] {
        let s = self.frames.shape();
        [s[1], s[2], s[3]]
    }

    /// Frame `t` as `[1, C, H, W]`.
    pub fn frame(&self, t: usize) -> Tensor {
        self.frames.narrow(0, t, 1).expect("frame index in range")
    }

    fn frame_data(&self, t: usize) -> &[f64] {
        let n = self.frames.len() / self.len();
        &self.frames.data()[t * n..(t + 1) * n]
    }
}

/// Context frames (oldest first) and the frame that follows them.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTuple {
    /// `[ctx, C, H, W]`
    pub context: Tensor,
    /// `[C, H, W]`
    pub target: Tensor,
}

/// A window `frames[start .. start+context]` → `frames[start+context]` of
/// sequence `seq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowIndex {
    pub seq: usize,
    pub start: usize,
}

pub fn make_windows(seq: &GridSequence, context: usize) -> Result<Vec<SampleTuple>> {
    if context == 0 {
        return Err(Error::Data("context window must be at least 1".into()));
    }
    let t = seq.len();
    if t < context + 1 {
        return Err(Error::Data(format!(
            "{t} frames cannot form a window of context {context}"
        )));
    }
    let [c, h, w] = seq.frame_shape();
    (context..t)
        .map(|target| {
            Ok(SampleTuple {
                context: seq.frames.narrow(0, target - context, context)?,
                target: seq.frames.narrow(0, target, 1)?.reshape(&[c, h, w])?,
            })
        })
        .collect()
}

/// All window start positions across a dataset, in order.
pub fn window_indices(dataset: &[GridSequence], context: usize) -> Result<Vec<WindowIndex>> {
    if context == 0 {
        return Err(Error::Data("context window must be at least 1".into()));
    }
    let mut out = Vec::new();
    for (s, seq) in dataset.iter().enumerate() {
        for start in 0..seq.len().saturating_sub(context) {
            out.push(WindowIndex { seq: s, start });
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!(
            "no sequence has more than {context} frames"
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Largest-remainder apportionment of `total` items by `fractions`.
fn apportion(total: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

/// Shuffles `0..n_windows` with `seed` and cuts it by `(train, val, test)`
/// fractions. Each set is returned sorted.
pub fn split_temporal(n_windows: usize, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|f| !(*f >= 0.0)) {
        return Err(Error::Data(format!(
            "split fractions {fractions:?} must sum to 1"
        )));
    }
    let sizes = apportion(n_windows, &fractions);
    if sizes
        .iter()
        .zip(&fractions)
        .any(|(&s, &f)| f > 0.0 && s == 0)
    {
        return Err(Error::Data(format!(
            "{n_windows} windows are too few for splits {fractions:?}"
        )));
    }
    let mut idx: Vec<usize> = (0..n_windows).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(3);
    let mut offset = 0;
    for s in sizes {
        let mut part = idx[offset..offset + s].to_vec();
        part.sort_unstable();
        parts.push(part);
        offset += s;
    }
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok(Splits { train, val, test })
}

/// Min and max over every frame touched by the training windows.
pub fn normalize_fit(
    dataset: &[GridSequence],
    train: &[WindowIndex],
    context: usize,
) -> Result<(f64, f64)> {
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut used: Vec<Vec<bool>> = dataset.iter().map(|s| vec![false; s.len()]).collect();
    for w in train {
        for t in w.start..=w.start + context {
            used[w.seq][t] = true;
        }
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (seq, flags) in dataset.iter().zip(&used) {
        for (t, _) in flags.iter().enumerate().filter(|(_, &u)| u) {
            for &v in seq.frame_data(t) {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !(lo < hi) {
        return Err(Error::Data(format!(
            "training frames are constant ({lo}); cannot normalize"
        )));
    }
    Ok((lo, hi))
}

/// `(z − min)/(max − min)`; values outside the fitted range pass through
/// unclipped with a warning.
pub fn normalize(raw: &Tensor, meta: &GridMeta) -> Tensor {
    let range = meta.data_range();
    let out = raw.map(|z| (z - meta.min_z) / range);
    let outside = out
        .data()
        .iter()
        .filter(|v| !(0.0..=1.0).contains(*v))
        .count();
    if outside > 0 {
        warn!(
            "{outside} values fall outside the normalization range [{}, {}]",
            meta.min_z, meta.max_z
        );
    }
    out
}

pub fn denormalize(x: &Tensor, meta: &GridMeta) -> Tensor {
    let range = meta.data_range();
    x.map(|v| v * range + meta.min_z)
}

/// Stores the fitted range in every sequence's metadata.
pub fn apply_normalization(dataset: &mut [GridSequence], min_z: f64, max_z: f64) {
    for seq in dataset {
        seq.meta.min_z = min_z;
        seq.meta.max_z = max_z;
    }
}

/// Stacks the windows into per-time context batches `[B, C, H, W]` and a
/// target batch, normalized with each sequence's metadata.
pub fn assemble_batch(
    dataset: &[GridSequence],
    windows: &[WindowIndex],
    context: usize,
) -> Result<(Vec<Tensor>, Tensor)> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?;
    let [c, h, w] = dataset[first.seq].frame_shape();
    let frame = c * h * w;
    let b = windows.len();
    let mut ctx = vec![vec![0.0; b * frame]; context];
    let mut target = vec![0.0; b * frame];
    for (i, win) in windows.iter().enumerate() {
        let seq = &dataset[win.seq];
        let range = seq.meta.data_range();
        let norm = |src: &[f64], dst: &mut [f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - seq.meta.min_z) / range;
            }
        };
        for (k, slot) in ctx.iter_mut().enumerate() {
            norm(
                seq.frame_data(win.start + k),
                &mut slot[i * frame..(i + 1) * frame],
            );
        }
        norm(
            seq.frame_data(win.start + context),
            &mut target[i * frame..(i + 1) * frame],
        );
    }
    let ctx = ctx
        .into_iter()
        .map(|d| Tensor::new(vec![b, c, h, w], d))
        .collect::<Result<Vec<_>, TensorError>>()?;
    Ok((ctx, Tensor::new(vec![b, c, h, w], target)?))
}

fn synthetic_meta(variable: &str, frames: &Tensor) -> GridMeta {
    let lo = frames.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = frames
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    GridMeta {
        variable: variable.to_string(),
        units: "1".to_string(),
        hours_per_step: 1.0,
        min_z: lo,
        max_z: if hi > lo { hi } else { lo + 1.0 },
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    amp: f64,
}

/// Periodic Gaussian bump sampled at `(y, x)`; sums the nearest images.
fn periodic_bump(b: &Blob, y: f64, x: f64, h: usize, w: usize) -> f64 {
    let wrap = |d: f64, n: f64| d - n * (d / n).round();
    let (hf, wf) = (h as f64, w as f64);
    let dy0 = wrap(y - b.cy, hf);
    let dx0 = wrap(x - b.cx, wf);
    let mut s = 0.0;
    for ky in -1..=1 {
        let dy = dy0 + ky as f64 * hf;
        for kx in -1..=1 {
            let dx = dx0 + kx as f64 * wf;
            s += (-(dy * dy + dx * dx) / (2.0 * b.sigma * b.sigma)).exp();
        }
    }
    b.amp * s
}

fn random_blobs<R: Rng>(rng: &mut R, h: usize, w: usize, count: usize) -> Vec<Blob> {
    let scale = (h.min(w) as f64 / 16.0).max(0.5);
    let budget = 0.95 / count as f64;
    (0..count)
        .map(|_| Blob {
            cy: rng.gen_range(0.0..h as f64),
            cx: rng.gen_range(0.0..w as f64),
            sigma: rng.gen_range(1.5..2.5) * scale,
            amp: rng.gen_range(0.5..1.0) * budget,
        })
        .collect()
}

/// Gaussian blobs translated by `velocity = (vx, vy)` pixels per step (along
/// width, then height) on a periodic domain. Values lie in `[0, 1]`.
pub fn synth_advection(
    h: usize,
    w: usize,
    t: usize,
    n_sequences: usize,
    velocity: (f64, f64),
    seed: u64,
) -> Result<Vec<GridSequence>> {
    if h == 0 || w == 0 || t == 0 || n_sequences == 0 {
        return Err(Error::Data(
            "advection dataset needs positive dimensions".into(),
        ));
    }
    if velocity.0.abs().max(velocity.1.abs()) * t as f64 >= h.min(w) as f64 {
        warn!("advection velocity {velocity:?} wraps the domain within {t} steps");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_sequences)
        .map(|_| {
            let blobs = random_blobs(&mut rng, h, w, 3);
            let mut data = Vec::with_capacity(t * h * w);
            for step in 0..t {
                // displacement reduced modulo the domain so equal phases
                // produce bit-identical frames
                let dx = (velocity.0 * step as f64).rem_euclid(w as f64);
                let dy = (velocity.1 * step as f64).rem_euclid(h as f64);
                for y in 0..h {
                    for x in 0..w {
                        let v: f64 = blobs
                            .iter()
                            .map(|b| {
                                let moved = Blob {
                                    cy: b.cy + dy,
                                    cx: b.cx + dx,
                                    ..*b
                                };
                                periodic_bump(&moved, y as f64, x as f64, h, w)
                            })
                            .sum();
                        data.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            let frames = Tensor::new(vec![t, 1, h, w], data)?;
            let meta = synthetic_meta("advection", &frames);
            GridSequence::new(frames, meta)
        })
        .collect()
}

const DIFFUSIVITY: f64 = 0.15;

/// One diffusion step with smoothed random forcing, clamped to `[0, 1]`.
fn stochastic_step<R: Rng>(
    field: &[f64],
    h: usize,
    w: usize,
    noise_scale: f64,
    rng: &mut R,
) -> Vec<f64> {
    let at = |f: &[f64], y: isize, x: isize| {
        f[(y.rem_euclid(h as isize) as usize) * w + x.rem_euclid(w as isize) as usize]
    };
    let noise: Vec<f64> = if noise_scale > 0.0 {
        (0..h * w).map(|_| rng.sample(StandardNormal)).collect()
    } else {
        vec![0.0; h * w]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let c = at(field, y, x);
            let lap = at(field, y - 1, x)
                + at(field, y + 1, x)
                + at(field, y, x - 1)
                + at(field, y, x + 1)
                - 4.0 * c;
            let mut smooth = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    smooth += at(&noise, y + dy, x + dx);
                }
            }
            let v = c + DIFFUSIVITY * lap + noise_scale * smooth / 3.0;
            out[y as usize * w + x as usize] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Continues a stochastic field from its last frame `[H×W]` for `steps`
/// frames using its own `seed`.
pub fn continue_stochastic(
    last: &[f64],
    h: usize,
    w: usize,
    steps: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if !(noise_scale >= 0.0) {
        return Err(Error::Data(format!(
            "noise scale {noise_scale} is negative"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = last.to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        cur = stochastic_step(&cur, h, w, noise_scale, &mut rng);
        out.push(cur.clone());
    }
    Ok(out)
}

/// Diffusing blob fields driven by smoothed Gaussian forcing. A noise scale of
/// zero gives pure deterministic diffusion.
pub fn synth_stochastic(
    h: usize,
    w: usize,
    t: usize,
    n_sequences: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<Vec<GridSequence>> {
    if h == 0 || w == 0 || t == 0 || n_sequences == 0 {
        return Err(Error::Data(
            "stochastic dataset needs positive dimensions".into(),
        ));
    }
    if !(noise_scale >= 0.0) {
        return Err(Error::Data(format!(
            "noise scale {noise_scale} is negative"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_sequences)
        .map(|_| {
            let blobs = random_blobs(&mut rng, h, w, 3);
            let mut field: Vec<f64> = (0..h * w)
                .map(|i| {
                    blobs
                        .iter()
                        .map(|b| periodic_bump(b, (i / w) as f64, (i % w) as f64, h, w))
                        .sum::<f64>()
                        .clamp(0.0, 1.0)
                })
                .collect();
            let mut data = Vec::with_capacity(t * h * w);
            data.extend_from_slice(&field);
            for _ in 1..t {
                field = stochastic_step(&field, h, w, noise_scale, &mut rng);
                data.extend_from_slice(&field);
            }
            let frames = Tensor::new(vec![t, 1, h, w], data)?;
            let meta = synthetic_meta("stochastic", &frames);
            GridSequence::new(frames, meta)
        })
        .collect()
}

/// Writes a sequence in STGRID format with values stored as `f32`.
pub fn save_grid(path: &Path, seq: &GridSequence) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_grid(&mut w, seq)?;
    w.flush()?;
    Ok(())
}

pub fn write_grid<W: Write>(w: &mut W, seq: &GridSequence) -> Result<()> {
    let (t, c, h, wd) = seq.frames.dims4()?;
    w.write_all(STGRID_MAGIC)?;
    for d in [t, c, h, wd] {
        let d = u32::try_from(d).map_err(|_| Error::Data(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&[DType::F32.tag()])?;
    write_values(w, seq.frames.data(), DType::F32)?;
    let meta = seq.meta.to_text();
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<GridSequence> {
    read_grid(BufReader::new(File::open(path)?))
}

fn format_err(r: &CountingReader<impl Read>, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: r.offset(),
        msg: msg.into(),
    }
}

pub fn read_grid<R: Read>(r: R) -> Result<GridSequence> {
    let mut r = CountingReader::new(r);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(lift_format)?;
    if &magic != STGRID_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!(
                "bad magic {:?}, expected STGRID01",
                String::from_utf8_lossy(&magic)
            ),
        });
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = r.offset();
        *d = r.read_u32().map_err(lift_format)? as usize;
        if *d == 0 {
            return Err(Error::Format {
                offset: at,
                msg: format!("dimension {} is zero", ["T", "C", "H", "W"][i]),
            });
        }
    }
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= (1usize << 34))
        .ok_or_else(|| format_err(&r, format!("dimensions {dims:?} overflow")))?;
    let tag = r.read_u8().map_err(lift_format)?;
    let dtype =
        DType::from_tag(tag).ok_or_else(|| format_err(&r, format!("bad dtype tag {tag}")))?;
    let values = r.read_values(count, dtype).map_err(lift_format)?;
    let meta_len = r.read_u32().map_err(lift_format)? as usize;
    if meta_len > 1 << 20 {
        return Err(format_err(
            &r,
            format!("metadata block of {meta_len} bytes"),
        ));
    }
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta).map_err(lift_format)?;
    let text = String::from_utf8(meta).map_err(|_| format_err(&r, "metadata is not UTF-8"))?;
    let meta = GridMeta::from_text(&text)?;
    if !(meta.min_z < meta.max_z) {
        return Err(Error::Data(format!(
            "metadata range [{}, {}] is empty",
            meta.min_z, meta.max_z
        )));
    }
    GridSequence::new(Tensor::new(dims.to_vec(), values)?, meta)
}

/// Loads a single `.stgrid` file, or every `.stgrid` file of a directory in
/// name order.
pub fn load_dataset(path: &Path) -> Result<Vec<GridSequence>> {
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "stgrid"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "no .stgrid files in {}",
                path.display()
            )));
        }
        files.iter().map(|f| load_grid(f)).collect()
    } else {
        Ok(vec![load_grid(path)?])
    }
}
