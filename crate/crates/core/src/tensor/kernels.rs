//! Dense numeric kernels backing the graph ops.
//!
//! Convolution is lowered to im2col + GEMM per batch element. The GEMM runs
//! without parallelism, so the accumulation order of every output element
//! is fixed and forward passes are bit-reproducible.

use super::{PaddingMode, Tensor};
use crate::error::{Error, Result};

/// `c[m×n] = a[m×k] · b[k×n] + beta · c` with explicit row/column strides
/// for `a` and `b` (so transposes are free) and a row stride `rsc` for `c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(rsc >= n && c.len() >= (m - 1) * rsc + n);
    if k == 0 {
        for row in 0..m {
            c[row * rsc..row * rsc + n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            1,
            rsc as isize,
            beta != 0.0,
            a.as_ptr(),
            csa as isize,
            rsa as isize,
            b.as_ptr(),
            csb as isize,
            rsb as isize,
            beta,
            1.0,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

/// Patch matrices are built a few output rows at a time so they stay in cache.
const TILE_ELEMS: usize = 64 * 1024;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], bias: &[usize], padding: PaddingMode) -> Result<Self> {
        let (&[n, c, h, w], &[f, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        };
        if c != kc {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: kernel.to_vec(),
                reason: "kernel extents must be odd".into(),
            });
        }
        if bias != [f] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: kernel.to_vec(),
                right: bias.to_vec(),
            });
        }
        let (pad_h, pad_w) = match padding {
            PaddingMode::Same => ((kh - 1) / 2, (kw - 1) / 2),
            PaddingMode::Valid => (0, 0),
        };
        if h + 2 * pad_h < kh || w + 2 * pad_w < kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        Ok(ConvGeometry {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            pad_h,
            pad_w,
            oh: h + 2 * pad_h - kh + 1,
            ow: w + 2 * pad_w - kw + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.f, self.oh, self.ow]
    }
}

/// Unfolds output rows `oy0..oy1` of one C×H×W sample into a
/// (C·kh·kw)×((oy1-oy0)·ow) patch matrix.
fn im2col(g: &ConvGeometry, sample: &[f64], (oy0, oy1): (usize, usize), col: &mut [f64]) {
    let tile = (oy1 - oy0) * g.ow;
    for ch in 0..g.c {
        let plane = &sample[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * tile..(row + 1) * tile];
                // valid output columns: 0 <= ox + kx - pad_w < w
                let ox_lo = g.pad_w.saturating_sub(kx);
                let ox_hi = (g.w + g.pad_w - kx).min(g.ow);
                for (oy, line) in (oy0..oy1).zip(dst.chunks_exact_mut(g.ow)) {
                    let iy = (oy + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize || ox_lo >= ox_hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..];
                    line[..ox_lo].fill(0.0);
                    let ix_lo = ox_lo + kx - g.pad_w;
                    line[ox_lo..ox_hi].copy_from_slice(&src[ix_lo..ix_lo + (ox_hi - ox_lo)]);
                    line[ox_hi..].fill(0.0);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back into a sample.
fn col2im(g: &ConvGeometry, col: &[f64], (oy0, oy1): (usize, usize), sample: &mut [f64]) {
    let tile = (oy1 - oy0) * g.ow;
    for ch in 0..g.c {
        let plane = &mut sample[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let src = &col[row * tile..(row + 1) * tile];
                let ox_lo = g.pad_w.saturating_sub(kx);
                let ox_hi = (g.w + g.pad_w - kx).min(g.ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                for (oy, line) in (oy0..oy1).zip(src.chunks_exact(g.ow)) {
                    let iy = (oy + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let ix_lo = ox_lo + kx - g.pad_w;
                    let dst = &mut plane[iy as usize * g.w + ix_lo..];
                    for (d, s) in dst.iter_mut().zip(&line[ox_lo..ox_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Output-row ranges covering `0..oh`, each small enough for one patch tile.
fn row_tiles(g: &ConvGeometry) -> impl Iterator<Item = (usize, usize)> {
    let rows = (TILE_ELEMS / (g.patch_len() * g.ow).max(1)).clamp(1, g.oh.max(1));
    let oh = g.oh;
    (0..oh).step_by(rows).map(move |y| (y, (y + rows).min(oh)))
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let pixels = g.out_pixels();
    let patch = g.patch_len();
    let in_len = g.c * g.h * g.w;
    let out_len = g.f * pixels;
    let mut out = vec![0.0; g.n * out_len];
    let mut col = Vec::new();
    for b in 0..g.n {
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        for (f, plane) in dst.chunks_exact_mut(pixels).enumerate() {
            plane.fill(bias[f]);
        }
        let sample = &input[b * in_len..(b + 1) * in_len];
        if g.is_pointwise() {
            gemm(g.f, patch, pixels, kernel, (patch, 1), sample, (pixels, 1), 1.0, dst, pixels);
            continue;
        }
        for rows in row_tiles(g) {
            let tile = (rows.1 - rows.0) * g.ow;
            col.resize(patch * tile, 0.0);
            im2col(g, sample, rows, &mut col);
            let c = &mut dst[rows.0 * g.ow..];
            gemm(g.f, patch, tile, kernel, (patch, 1), &col, (tile, 1), 1.0, c, pixels);
        }
    }
    out
}

#[derive(Default)]
pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let [need_input, need_kernel, need_bias] = need;
    let pixels = g.out_pixels();
    let patch = g.patch_len();
    let in_len = g.c * g.h * g.w;
    let out_len = g.f * pixels;

    let mut grads = ConvGrads::default();
    if need_bias {
        let mut db = vec![0.0; g.f];
        for b in 0..g.n {
            let go = &grad_out[b * out_len..(b + 1) * out_len];
            for (f, plane) in go.chunks_exact(pixels).enumerate() {
                db[f] += plane.iter().sum::<f64>();
            }
        }
        grads.bias = Some(db);
    }

    let mut dk = need_kernel.then(|| vec![0.0; g.f * patch]);
    let mut dx = need_input.then(|| vec![0.0; g.n * in_len]);
    let (mut col, mut dcol) = (Vec::new(), Vec::new());

    for b in 0..g.n {
        let go = &grad_out[b * out_len..(b + 1) * out_len];
        let sample = &input[b * in_len..(b + 1) * in_len];
        if g.is_pointwise() {
            if let Some(dk) = dk.as_mut() {
                gemm(g.f, pixels, patch, go, (pixels, 1), sample, (1, pixels), 1.0, dk, patch);
            }
            if let Some(dx) = dx.as_mut() {
                let sample_grad = &mut dx[b * in_len..(b + 1) * in_len];
                gemm(patch, g.f, pixels, kernel, (1, patch), go, (pixels, 1), 0.0, sample_grad, pixels);
            }
            continue;
        }
        for rows in row_tiles(g) {
            let tile = (rows.1 - rows.0) * g.ow;
            let go_tile = &go[rows.0 * g.ow..];
            if let Some(dk) = dk.as_mut() {
                col.resize(patch * tile, 0.0);
                im2col(g, sample, rows, &mut col);
                // dK[f, p] += Σ_j dOut[f, j] · col[p, j]
                gemm(g.f, tile, patch, go_tile, (pixels, 1), &col, (1, tile), 1.0, dk, patch);
            }
            if let Some(dx) = dx.as_mut() {
                // dcol[p, j] = Σ_f K[f, p] · dOut[f, j]
                dcol.resize(patch * tile, 0.0);
                gemm(patch, g.f, tile, kernel, (1, patch), go_tile, (pixels, 1), 0.0, &mut dcol, tile);
                col2im(g, &dcol, rows, &mut dx[b * in_len..(b + 1) * in_len]);
            }
        }
    }
    grads.kernel = dk;
    grads.input = dx;
    grads
}

/// Fully connected layer: `out[n, o] = Σ_i x[n, i] · w[o, i] + b[o]`.
pub(crate) fn linear_forward(x: &[f64], w: &[f64], b: &[f64], batch: usize, inputs: usize, outputs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * outputs);
    for _ in 0..batch {
        out.extend_from_slice(b);
    }
    gemm(batch, inputs, outputs, x, (inputs, 1), w, (1, inputs), 1.0, &mut out, outputs);
    out
}

pub(crate) fn linear_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    (batch, inputs, outputs): (usize, usize, usize),
    need: [bool; 3],
) -> ConvGrads {
    let [need_x, need_w, need_b] = need;
    let mut grads = ConvGrads::default();
    if need_b {
        let mut db = vec![0.0; outputs];
        for row in grad_out.chunks_exact(outputs) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        grads.bias = Some(db);
    }
    if need_w {
        // dW[o, i] = Σ_n dOut[n, o] · x[n, i]
        let mut dw = vec![0.0; outputs * inputs];
        gemm(outputs, batch, inputs, grad_out, (1, outputs), x, (inputs, 1), 0.0, &mut dw, inputs);
        grads.kernel = Some(dw);
    }
    if need_x {
        // dX[n, i] = Σ_o dOut[n, o] · w[o, i]
        let mut dx = vec![0.0; batch * inputs];
        gemm(batch, outputs, inputs, grad_out, (outputs, 1), w, (inputs, 1), 0.0, &mut dx, inputs);
        grads.input = Some(dx);
    }
    grads
}

/// 2×2 stride-2 max pooling. Returns the pooled values and, per output
/// element, the flat input index of the first maximum in row-major order.
pub(crate) fn maxpool2_forward(input: &Tensor) -> Result<(Vec<f64>, Vec<usize>)> {
    let [n, c, h, w] = input.dims4("maxpool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "maxpool2",
            shape: input.shape().to_vec(),
            reason: "spatial extents must be even".into(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((out, argmax))
}

pub(crate) fn upsample2_forward(input: &Tensor) -> Result<Vec<f64>> {
    let [n, c, h, w] = input.dims4("upsample2")?;
    let data = input.data();
    let ow = 2 * w;
    let mut out = vec![0.0; n * c * 4 * h * w];
    for plane in 0..n * c {
        let src = &data[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..h {
            let row = &mut dst[2 * y * ow..(2 * y + 1) * ow];
            for (x, &v) in src[y * w..(y + 1) * w].iter().enumerate() {
                row[2 * x] = v;
                row[2 * x + 1] = v;
            }
            dst.copy_within(2 * y * ow..(2 * y + 1) * ow, (2 * y + 1) * ow);
        }
    }
    Ok(out)
}

pub(crate) fn upsample2_backward(shape: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let ow = 2 * w;
    let mut dx = vec![0.0; planes * h * w];
    for plane in 0..planes {
        let go = &grad_out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let top = 2 * y * ow + 2 * x;
                dst[y * w + x] = go[top] + go[top + 1] + go[top + ow] + go[top + ow + 1];
            }
        }
    }
    dx
}

/// Logistic function evaluated without overflow for large |x|.
pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
