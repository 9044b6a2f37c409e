//! Raw forward/backward kernels on contiguous buffers. Shapes are validated by
//! the callers in `graph.rs`.

use crate::tensor::numel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn pixels_out(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// C[m×n] = alpha·A·B + beta·C with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every view lies within the slices passed in; callers size them
    // from the same geometry used for the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let p = g.pixels_out();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let p = g.pixels_out();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                let src = &cols[row..row + p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (k, p) = (g.patch(), g.pixels_out());
    let in_img = g.c_in * g.h * g.w;
    let out_img = g.c_out * p;
    let mut out = vec![0.0; g.n * out_img];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * p]
    };
    for n in 0..g.n {
        let xi = &x[n * in_img..(n + 1) * in_img];
        let b: &[f64] = if g.is_pointwise() {
            xi
        } else {
            im2col(g, xi, &mut cols);
            &cols
        };
        let o = &mut out[n * out_img..(n + 1) * out_img];
        if let Some(bias) = bias {
            for (co, chunk) in o.chunks_mut(p).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        gemm(
            g.c_out, k, p, kernel, k as isize, 1, b, p as isize, 1, 1.0, o,
        );
    }
    out
}

/// Returns `(dx, dkernel, dbias)`, each only when requested.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (k, p) = (g.patch(), g.pixels_out());
    let in_img = g.c_in * g.h * g.w;
    let out_img = g.c_out * p;
    let mut dx = want.0.then(|| vec![0.0; g.n * in_img]);
    let mut dw = want.1.then(|| vec![0.0; g.c_out * k]);
    let db = want.2.then(|| {
        let mut db = vec![0.0; g.c_out];
        for n in 0..g.n {
            for (co, chunk) in grad_out[n * out_img..(n + 1) * out_img]
                .chunks(p)
                .enumerate()
            {
                db[co] += chunk.iter().sum::<f64>();
            }
        }
        db
    });
    let mut cols = vec![0.0; k * p];
    for n in 0..g.n {
        let go = &grad_out[n * out_img..(n + 1) * out_img];
        if let Some(dw) = dw.as_mut() {
            let xi = &x[n * in_img..(n + 1) * in_img];
            let b: &[f64] = if g.is_pointwise() {
                xi
            } else {
                im2col(g, xi, &mut cols);
                &cols
            };
            // dW += dOut · colsᵀ
            gemm(g.c_out, p, k, go, p as isize, 1, b, 1, p as isize, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[n * in_img..(n + 1) * in_img];
            if g.is_pointwise() {
                gemm(
                    k, g.c_out, p, kernel, 1, k as isize, go, p as isize, 1, 1.0, dxi,
                );
            } else {
                gemm(
                    k, g.c_out, p, kernel, 1, k as isize, go, p as isize, 1, 0.0, &mut cols,
                );
                col2im_add(g, &cols, dxi);
            }
        }
    }
    (dx, dw, db)
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, 0.0, &mut c);
    c
}

/// Returns `(dA, dB)` for `C = A·B`.
pub fn matmul_backward(
    a: &[f64],
    b: &[f64],
    gc: &[f64],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; m * k];
    let mut db = vec![0.0; k * n];
    // dA = dC·Bᵀ, dB = Aᵀ·dC
    gemm(m, n, k, gc, n as isize, 1, b, 1, n as isize, 0.0, &mut da);
    gemm(k, m, n, a, 1, k as isize, gc, n as isize, 1, 0.0, &mut db);
    (da, db)
}

/// Destination-to-source index map for space-to-depth on `[N,C,H,W]`.
///
/// Output channel `c·4 + 2·di + dj` holds input pixel `(2y+di, 2x+dj)` of channel
/// `c`, so a 2×2 block is laid out top-left, top-right, bottom-left, bottom-right.
pub fn space_to_depth_index(n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    let (ho, wo) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ci in 0..c {
            for d in 0..4 {
                let (di, dj) = (d / 2, d % 2);
                for y in 0..ho {
                    for x in 0..wo {
                        idx.push(((b * c + ci) * h + 2 * y + di) * w + 2 * x + dj);
                    }
                }
            }
        }
    }
    idx
}

pub fn gather(src: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| src[i]).collect()
}

/// Inverse of `gather` for a permutation: `dst[idx[i]] = src[i]`.
pub fn scatter(src: &[f64], idx: &[usize]) -> Vec<f64> {
    let mut dst = vec![0.0; src.len()];
    for (&i, &v) in idx.iter().zip(src) {
        dst[i] = v;
    }
    dst
}

pub fn avg_pool(x: &[f64], n: usize, c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h / f, w / f);
    let scale = 1.0 / (f * f) as f64;
    let mut out = vec![0.0; n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / f) * wo + xx / f] += src[y * w + xx];
            }
        }
        dst.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

pub fn avg_pool_backward(g: &[f64], n: usize, c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h / f, w / f);
    let scale = 1.0 / (f * f) as f64;
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &g[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / f) * wo + xx / f] * scale;
            }
        }
    }
    dx
}

/// For each flat index of `a_shape`, the flat index of a right-aligned
/// broadcast operand. `None` when no broadcast is needed.
pub fn broadcast_map(a_shape: &[usize], b_shape: &[usize]) -> Option<Option<Vec<usize>>> {
    if a_shape == b_shape {
        return Some(None);
    }
    if b_shape.len() > a_shape.len() {
        return None;
    }
    let offset = a_shape.len() - b_shape.len();
    let mut b_full = vec![1usize; offset];
    b_full.extend_from_slice(b_shape);
    if a_shape.iter().zip(&b_full).any(|(&a, &b)| b != a && b != 1) {
        return None;
    }
    // b strides with 0 on broadcast axes
    let rank = a_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        strides[d] = if b_full[d] == 1 { 0 } else { s };
        s *= b_full[d];
    }
    let total = numel(a_shape);
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut bi = 0usize;
    for _ in 0..total {
        map.push(bi);
        for d in (0..rank).rev() {
            counter[d] += 1;
            bi += strides[d];
            if counter[d] < a_shape[d] {
                break;
            }
            bi -= strides[d] * a_shape[d];
            counter[d] = 0;
        }
    }
    Some(Some(map))
}
