use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use stflow_tensor::{Tensor, Var};

use crate::error::Result;
use crate::params::{Ctx, ParamId, ParamStore};

/// Invertible 1×1 convolution stored as `W = P·L·(U + diag(sign·exp(log_s)))`.
///
/// `P` is a fixed permutation, `L` unit lower-triangular and `U` strictly
/// upper-triangular, so `log|det W| = Σ log_s`.
#[derive(Debug, Clone)]
pub struct Inv1x1 {
    pub perm: ParamId,
    pub lower: ParamId,
    pub upper: ParamId,
    pub log_s: ParamId,
    pub sign_s: ParamId,
    channels: usize,
}

fn mask(c: usize, keep: impl Fn(usize, usize) -> bool) -> Tensor {
    Tensor::from_fn(&[c, c], |k| if keep(k / c, k % c) { 1.0 } else { 0.0 })
}

impl Inv1x1 {
    /// Initializes `W` as a random rotation, factorized with partial pivoting.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Self {
        let c = channels;
        let a = DMatrix::<f64>::from_fn(c, c, |_, _| rng.sample(StandardNormal));
        let q = a.qr().q();
        let lu = q.lu();
        // P·Q = L·U, so Q = Pᵀ·L·U
        let mut p = DMatrix::<f64>::identity(c, c);
        lu.p().permute_rows(&mut p);
        let (l, u) = (lu.l(), lu.u());
        let row_major = |m: &DMatrix<f64>| Tensor::from_fn(&[c, c], |k| m[(k / c, k % c)]);
        let perm = row_major(&p.transpose());
        let lower = Tensor::from_fn(&[c, c], |k| {
            let (i, j) = (k / c, k % c);
            if i > j {
                l[(i, j)]
            } else {
                0.0
            }
        });
        let upper = Tensor::from_fn(&[c, c], |k| {
            let (i, j) = (k / c, k % c);
            if i < j {
                u[(i, j)]
            } else {
                0.0
            }
        });
        let log_s = Tensor::from_fn(&[c], |i| u[(i, i)].abs().ln());
        let sign_s = Tensor::from_fn(&[c], |i| u[(i, i)].signum());
        Self::from_parts(store, name, perm, lower, upper, log_s, sign_s)
    }

    /// The identity map (`P = L = I`, `U = 0`, `log_s = 0`).
    pub fn identity(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let c = channels;
        let eye = mask(c, |i, j| i == j);
        Self::from_parts(
            store,
            name,
            eye,
            Tensor::zeros(&[c, c]),
            Tensor::zeros(&[c, c]),
            Tensor::zeros(&[c]),
            Tensor::ones(&[c]),
        )
    }

    pub fn from_parts(
        store: &mut ParamStore,
        name: &str,
        perm: Tensor,
        lower: Tensor,
        upper: Tensor,
        log_s: Tensor,
        sign_s: Tensor,
    ) -> Self {
        let channels = log_s.len();
        Self {
            perm: store.add(format!("{name}.perm"), perm, false),
            lower: store.add(format!("{name}.lower"), lower, true),
            upper: store.add(format!("{name}.upper"), upper, true),
            log_s: store.add(format!("{name}.log_s"), log_s, true),
            sign_s: store.add(format!("{name}.sign_s"), sign_s, false),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Assembles `W` as a graph node so gradients reach the LU factors.
    pub fn weight(&self, ctx: &mut Ctx) -> Result<Var> {
        let c = self.channels;
        let p = ctx.param(self.perm);
        let lower = ctx.param(self.lower);
        let upper = ctx.param(self.upper);
        let log_s = ctx.param(self.log_s);
        let sign = ctx.param(self.sign_s);

        let strict_lower = ctx.constant(mask(c, |i, j| i > j));
        let strict_upper = ctx.constant(mask(c, |i, j| i < j));
        let eye = ctx.constant(mask(c, |i, j| i == j));

        let l = ctx.g.mul(lower, strict_lower)?;
        let l = ctx.g.add(l, eye)?;
        let s = ctx.g.exp(log_s)?;
        let s = ctx.g.mul(s, sign)?;
        let diag = ctx.g.mul(eye, s)?;
        let u = ctx.g.mul(upper, strict_upper)?;
        let u = ctx.g.add(u, diag)?;
        let lu = ctx.g.matmul(l, u)?;
        Ok(ctx.g.matmul(p, lu)?)
    }

    pub fn forward(&self, ctx: &mut Ctx, z: Var) -> Result<(Var, Var)> {
        let c = self.channels;
        let w = self.weight(ctx)?;
        let kernel = ctx.g.reshape(w, &[c, c, 1, 1])?;
        let y = ctx.g.conv2d(z, kernel, None, 1, 0)?;
        let shape = ctx.g.shape(z);
        let pixels = (shape[2] * shape[3]) as f64;
        let log_s = ctx.param(self.log_s);
        let total = ctx.g.sum(log_s)?;
        let logdet = ctx.g.mul_scalar(total, pixels)?;
        Ok((y, logdet))
    }

    /// Exact inverse by permutation and two triangular solves per pixel.
    pub fn inverse(&self, ctx: &mut Ctx, y: Var) -> Result<Var> {
        let store = ctx.store();
        let c = self.channels;
        let perm = store.get(self.perm).data();
        let lower = store.get(self.lower).data();
        let upper = store.get(self.upper).data();
        let diag: Vec<f64> = store
            .get(self.log_s)
            .data()
            .iter()
            .zip(store.get(self.sign_s).data())
            .map(|(ls, sg)| ls.exp() * sg)
            .collect();

        let yv = ctx.value(y);
        let (n, ch, h, w) = yv.dims4()?;
        debug_assert_eq!(ch, c);
        let plane = h * w;
        let mut out = vec![0.0; yv.len()];
        let mut v = vec![0.0; c];
        let mut a = vec![0.0; c];
        for b in 0..n {
            let base = b * c * plane;
            for px in 0..plane {
                // v = Pᵀ·y
                for i in 0..c {
                    v[i] = (0..c)
                        .filter(|&k| perm[k * c + i] != 0.0)
                        .map(|k| perm[k * c + i] * yv.data()[base + k * plane + px])
                        .sum();
                }
                // L·a = v
                for i in 0..c {
                    let mut s = v[i];
                    for j in 0..i {
                        s -= lower[i * c + j] * a[j];
                    }
                    a[i] = s;
                }
                // (U + diag)·z = a
                for i in (0..c).rev() {
                    let mut s = a[i];
                    for j in i + 1..c {
                        s -= upper[i * c + j] * out[base + j * plane + px];
                    }
                    out[base + i * plane + px] = s / diag[i];
                }
            }
        }
        let t = Tensor::new(yv.shape().to_vec(), out)?;
        Ok(ctx.constant(t))
    }
}
