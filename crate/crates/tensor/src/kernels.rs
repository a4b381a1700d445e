//! Raw forward/backward kernels on contiguous buffers.
//!
//! Everything here is shape-checked by the caller ([`crate::Graph`] or the
//! free functions in [`crate::ops`]); the kernels assume valid geometry.

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum Trans {
    N,
    T,
}

/// `c = op(a) · op(b) + beta · c` for row-major operands, with `op(a)` of
/// size `m×k` and `op(b)` of size `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    ta: Trans,
    tb: Trans,
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = match ta {
        Trans::N => (k as isize, 1),
        Trans::T => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::N => (n as isize, 1),
        Trans::T => (1, k as isize),
    };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
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

/// Geometry of a square-kernel 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Input row/col touched by output `(oy, ox)` at kernel tap `(ky, kx)`,
    /// or `None` when it falls in the zero padding.
    #[cfg(test)]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Range of output columns whose tap `kx` lands inside the image.
#[inline]
fn valid_cols(g: &ConvGeom, ow: usize, kx: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.padding);
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    // Largest ox with ox·s + kx - p < width.
    let limit = g.width + p;
    let hi = if limit <= kx { 0 } else { ((limit - kx - 1) / s + 1).min(ow) };
    (lo.min(hi), hi)
}

/// Unfolds one `[C,H,W]` image into a `[C·k·k, Ho·Wo]` matrix whose rows
/// start `ld` elements apart.
pub(crate) fn im2col(img: &[f32], g: &ConvGeom, cols: &mut [f32], ld: usize) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let ncol = oh * ow;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ld..row * ld + ncol];
                let (lo, hi) = valid_cols(g, ow, kx);
                for oy in 0..oh {
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    let y = (oy * g.stride + ky) as isize - g.padding as isize;
                    if y < 0 || y >= g.height as isize || lo >= hi {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    let x0 = lo * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                    } else {
                        for (i, o) in out[lo..hi].iter_mut().enumerate() {
                            *o = src[x0 + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, img: &mut [f32], ld: usize) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let ncol = oh * ow;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ld..row * ld + ncol];
                let (lo, hi) = valid_cols(g, ow, kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..oh {
                    let y = (oy * g.stride + ky) as isize - g.padding as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    let part = &src[oy * ow + lo..oy * ow + hi];
                    let x0 = lo * g.stride + kx - g.padding;
                    for (i, v) in part.iter().enumerate() {
                        dst[x0 + i * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Unfolded floats per chunk of images; keeps the working set cache-sized.
const CHUNK_FLOATS: usize = 1 << 16;

fn images_per_chunk(g: &ConvGeom) -> usize {
    (CHUNK_FLOATS / (g.col_rows() * g.col_cols())).max(1)
}

/// Forward convolution of a batch.
pub(crate) fn conv2d_forward(
    x: &[f32],
    batch: usize,
    g: &ConvGeom,
    w: &[f32],
    filters: usize,
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_sz = g.channels * g.height * g.width;
    let per = images_per_chunk(g);
    let mut cols = vec![0.0; rows * per * ncol];
    let mut wide = vec![0.0; filters * per * ncol];
    let mut out = vec![0.0; batch * filters * ncol];
    for start in (0..batch).step_by(per) {
        let m = per.min(batch - start);
        let ld = m * ncol;
        for i in 0..m {
            let n = start + i;
            im2col(&x[n * in_sz..(n + 1) * in_sz], g, &mut cols[i * ncol..], ld);
        }
        gemm(Trans::N, Trans::N, filters, ld, rows, w, &cols[..rows * ld], 0.0, &mut wide[..filters * ld]);
        for f in 0..filters {
            let b = bias.map_or(0.0, |b| b[f]);
            for i in 0..m {
                let src = &wide[f * ld + i * ncol..f * ld + (i + 1) * ncol];
                let o = ((start + i) * filters + f) * ncol;
                for (d, s) in out[o..o + ncol].iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]: `(dx, dw, db)`; `dx` only when asked.
/// The unfolded input is recomputed from `x`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    dy: &[f32],
    x: &[f32],
    batch: usize,
    g: &ConvGeom,
    w: &[f32],
    filters: usize,
    want_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_sz = g.channels * g.height * g.width;
    let per = images_per_chunk(g);
    let mut cols = vec![0.0; rows * per * ncol];
    let mut wide = vec![0.0; filters * per * ncol];
    let mut dw = vec![0.0; filters * rows];
    let mut db = vec![0.0; filters];
    let mut dx = want_dx.then(|| vec![0.0; batch * in_sz]);
    for start in (0..batch).step_by(per) {
        let m = per.min(batch - start);
        let ld = m * ncol;
        for i in 0..m {
            let n = start + i;
            im2col(&x[n * in_sz..(n + 1) * in_sz], g, &mut cols[i * ncol..], ld);
            for f in 0..filters {
                let src = &dy[(n * filters + f) * ncol..(n * filters + f + 1) * ncol];
                db[f] += src.iter().sum::<f32>();
                wide[f * ld + i * ncol..f * ld + (i + 1) * ncol].copy_from_slice(src);
            }
        }
        let (c, d) = (&mut cols[..rows * ld], &wide[..filters * ld]);
        gemm(Trans::N, Trans::T, filters, rows, ld, d, c, 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            gemm(Trans::T, Trans::N, rows, ld, filters, w, d, 0.0, c);
            for i in 0..m {
                let n = start + i;
                col2im(&c[i * ncol..], g, &mut dx[n * in_sz..(n + 1) * in_sz], ld);
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution: `x` is `[N, Cin, H, W]`, `w` is `[Cin, Cout, k, k]`
/// and `g` describes the *output* image as seen by the matching forward conv.
pub(crate) fn conv_transpose_forward(
    x: &[f32],
    batch: usize,
    in_ch: usize,
    g: &ConvGeom,
    w: &[f32],
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let out_sz = g.channels * g.height * g.width;
    let mut out = vec![0.0; batch * out_sz];
    let mut cols = vec![0.0; rows * ncol];
    for n in 0..batch {
        let xn = &x[n * in_ch * ncol..(n + 1) * in_ch * ncol];
        gemm(Trans::T, Trans::N, rows, ncol, in_ch, w, xn, 0.0, &mut cols);
        let o = &mut out[n * out_sz..(n + 1) * out_sz];
        col2im(&cols, g, o, ncol);
        if let Some(b) = bias {
            let plane = g.height * g.width;
            for (c, chunk) in o.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[c]);
            }
        }
    }
    out
}

pub(crate) fn conv_transpose_backward(
    dy: &[f32],
    x: &[f32],
    batch: usize,
    in_ch: usize,
    g: &ConvGeom,
    w: &[f32],
    want_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let out_sz = g.channels * g.height * g.width;
    let plane = g.height * g.width;
    let mut dw = vec![0.0; in_ch * rows];
    let mut db = vec![0.0; g.channels];
    let mut dx = want_dx.then(|| vec![0.0; batch * in_ch * ncol]);
    let mut dcols = vec![0.0; rows * ncol];
    for n in 0..batch {
        let dyn_ = &dy[n * out_sz..(n + 1) * out_sz];
        for (c, chunk) in dyn_.chunks(plane).enumerate() {
            db[c] += chunk.iter().sum::<f32>();
        }
        im2col(dyn_, g, &mut dcols, ncol);
        let xn = &x[n * in_ch * ncol..(n + 1) * in_ch * ncol];
        gemm(Trans::N, Trans::T, in_ch, rows, ncol, xn, &dcols, 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            let d = &mut dx[n * in_ch * ncol..(n + 1) * in_ch * ncol];
            gemm(Trans::N, Trans::N, in_ch, ncol, rows, w, &dcols, 0.0, d);
        }
    }
    (dx, dw, db)
}

/// 2×2 max pooling with stride 2. Odd edges behave as if the last row or
/// column were replicated. Ties resolve to the first maximum in scan order.
pub(crate) fn maxpool2x2_forward(
    x: &[f32],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<f32>, Vec<usize>) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                        if y < h && xx < w {
                            let i = base + y * w + xx;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Per-channel batch statistics view: data is `[N, C, S]` with `S` spatial
/// positions per channel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BnLayout {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl BnLayout {
    fn count(&self) -> usize {
        self.batch * self.spatial
    }

    /// Visits every contiguous `(channel, start)` run in memory order.
    fn spans(&self, mut f: impl FnMut(usize, usize)) {
        for n in 0..self.batch {
            for c in 0..self.channels {
                f(c, (n * self.channels + c) * self.spatial);
            }
        }
    }
}

/// Returns `(xhat, inv_std, batch_mean, batch_var_unbiased)`.
pub(crate) fn batch_stats(
    x: &[f32],
    l: &BnLayout,
    eps: f32,
) -> (Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>) {
    let m = l.count() as f64;
    let sp = l.spatial;
    let mut sum = vec![0.0f64; l.channels];
    l.spans(|c, i| sum[c] += x[i..i + sp].iter().map(|&v| v as f64).sum::<f64>());
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let mut sq = vec![0.0f64; l.channels];
    l.spans(|c, i| {
        let mu = mean[c];
        sq[c] += x[i..i + sp].iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
    });
    let inv_std: Vec<f64> = sq.iter().map(|q| 1.0 / (q / m + eps as f64).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    l.spans(|c, i| {
        let (mu, is) = (mean[c] as f32, inv_std[c] as f32);
        for (o, &v) in xhat[i..i + sp].iter_mut().zip(&x[i..i + sp]) {
            *o = (v - mu) * is;
        }
    });
    let vars = sq
        .iter()
        .map(|q| if m > 1.0 { (q / (m - 1.0)) as f32 } else { 0.0 })
        .collect();
    (
        xhat,
        inv_std.iter().map(|&v| v as f32).collect(),
        mean.iter().map(|&v| v as f32).collect(),
        vars,
    )
}

/// Applies `y = gamma · xhat + beta` per channel.
pub(crate) fn bn_affine(xhat: &[f32], l: &BnLayout, gamma: &[f32], beta: &[f32]) -> Vec<f32> {
    let sp = l.spatial;
    let mut y = vec![0.0; xhat.len()];
    l.spans(|c, i| {
        let (g, b) = (gamma[c], beta[c]);
        for (o, &v) in y[i..i + sp].iter_mut().zip(&xhat[i..i + sp]) {
            *o = g * v + b;
        }
    });
    y
}

/// Backward of batch norm. In train mode the batch statistics depend on the
/// input; in eval mode `inv_std` is a constant.
pub(crate) fn bn_backward(
    dy: &[f32],
    xhat: &[f32],
    inv_std: &[f32],
    gamma: &[f32],
    l: &BnLayout,
    train: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let m = l.count() as f64;
    let sp = l.spatial;
    let mut sdy = vec![0.0f64; l.channels];
    let mut sdyx = vec![0.0f64; l.channels];
    l.spans(|c, i| {
        let (mut a, mut b) = (0.0f64, 0.0f64);
        for (&d, &h) in dy[i..i + sp].iter().zip(&xhat[i..i + sp]) {
            a += d as f64;
            b += d as f64 * h as f64;
        }
        sdy[c] += a;
        sdyx[c] += b;
    });
    let mut dx = vec![0.0; dy.len()];
    l.spans(|c, i| {
        let scale = gamma[c] * inv_std[c];
        let out = &mut dx[i..i + sp];
        if train {
            let (mdy, mdyx) = ((sdy[c] / m) as f32, (sdyx[c] / m) as f32);
            for ((o, &d), &h) in out.iter_mut().zip(&dy[i..i + sp]).zip(&xhat[i..i + sp]) {
                *o = scale * (d - mdy - h * mdyx);
            }
        } else {
            for (o, &d) in out.iter_mut().zip(&dy[i..i + sp]) {
                *o = scale * d;
            }
        }
    });
    let dgamma = sdyx.iter().map(|&v| v as f32).collect();
    let dbeta = sdy.iter().map(|&v| v as f32).collect();
    (dx, dgamma, dbeta)
}
