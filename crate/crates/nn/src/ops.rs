//! Raw NHWC kernels. Everything here works on plain slices; the layer
//! types in [`crate::layers`] own shapes and bookkeeping.

/// `c = a * b + beta * c` for strided row/column-major views.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the debug assertions above spell out the bounds each caller
    // upholds; matrixmultiply reads/writes exactly those strided elements.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution over NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Length of one im2col row, `kernel * kernel * c_in`.
    pub fn patch(&self) -> usize {
        self.kernel * self.kernel * self.c_in
    }

    /// Very thin convolutions (few input or output channels) are faster as
    /// direct loops than through im2col and a skinny matrix product.
    fn use_direct(&self) -> bool {
        self.c_in <= 3 || self.c_out <= 4
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Samples per im2col chunk, bounding scratch memory to ~16 MiB.
    fn chunk(&self) -> usize {
        let (oh, ow) = self.out_hw();
        let per_sample = oh * ow * self.patch();
        ((1usize << 22) / per_sample.max(1)).max(1)
    }
}

/// `copy_from_slice` goes through a `memcpy` call, which dominates when
/// rows are only a channel or two wide.
#[inline]
fn copy_short(dst: &mut [f32], src: &[f32]) {
    if dst.len() <= 4 {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = *s;
        }
    } else {
        dst.copy_from_slice(src);
    }
}

fn im2col(x: &[f32], n: usize, g: &ConvGeom, col: &mut [f32]) {
    let (oh, ow) = g.out_hw();
    let (h, w, c, k) = (g.h as isize, g.w as isize, g.c_in, g.kernel);
    let patch = g.patch();
    let mut r = 0;
    for s in 0..n {
        let xs = &x[s * g.h * g.w * c..(s + 1) * g.h * g.w * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut col[r * patch..(r + 1) * patch];
                let y0 = (oy * g.stride) as isize - g.pad as isize;
                let x0 = (ox * g.stride) as isize - g.pad as isize;
                for ky in 0..k {
                    let iy = y0 + ky as isize;
                    let dst = &mut row[ky * k * c..(ky + 1) * k * c];
                    if iy < 0 || iy >= h {
                        dst.fill(0.0);
                        continue;
                    }
                    for kx in 0..k {
                        let ix = x0 + kx as isize;
                        let d = &mut dst[kx * c..(kx + 1) * c];
                        if ix < 0 || ix >= w {
                            d.fill(0.0);
                        } else {
                            let off = ((iy * w + ix) as usize) * c;
                            copy_short(d, &xs[off..off + c]);
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

fn col2im(col: &[f32], n: usize, g: &ConvGeom, dx: &mut [f32]) {
    let (oh, ow) = g.out_hw();
    let (h, w, c, k) = (g.h as isize, g.w as isize, g.c_in, g.kernel);
    let patch = g.patch();
    let mut r = 0;
    for s in 0..n {
        let xs = &mut dx[s * g.h * g.w * c..(s + 1) * g.h * g.w * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &col[r * patch..(r + 1) * patch];
                let y0 = (oy * g.stride) as isize - g.pad as isize;
                let x0 = (ox * g.stride) as isize - g.pad as isize;
                for ky in 0..k {
                    let iy = y0 + ky as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = x0 + kx as isize;
                        if ix < 0 || ix >= w {
                            continue;
                        }
                        let off = ((iy * w + ix) as usize) * c;
                        let src = &row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                        for (d, s) in xs[off..off + c].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// Forward convolution. `weight` is `[c_out, kernel, kernel, c_in]`.
pub fn conv2d_forward(
    x: &[f32],
    n: usize,
    g: &ConvGeom,
    weight: &[f32],
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let (oh, ow) = g.out_hw();
    let patch = g.patch();
    let mut y = vec![0.0; n * oh * ow * g.c_out];
    if g.use_direct() {
        direct_forward(x, n, g, weight, &mut y);
        add_bias(&mut y, g.c_out, bias);
        return y;
    }
    let chunk = g.chunk();
    let mut col = Vec::new();
    let mut s0 = 0;
    while s0 < n {
        let cn = chunk.min(n - s0);
        let rows = cn * oh * ow;
        let xs = &x[s0 * g.h * g.w * g.c_in..(s0 + cn) * g.h * g.w * g.c_in];
        let a: &[f32] = if g.is_pointwise() {
            xs
        } else {
            col.resize(rows * patch, 0.0);
            im2col(xs, cn, g, &mut col);
            &col
        };
        let ys = &mut y[s0 * oh * ow * g.c_out..(s0 + cn) * oh * ow * g.c_out];
        gemm(rows, patch, g.c_out, a, patch, 1, weight, 1, patch, 0.0, ys, g.c_out, 1);
        s0 += cn;
    }
    add_bias(&mut y, g.c_out, bias);
    y
}

fn add_bias(y: &mut [f32], c: usize, bias: Option<&[f32]>) {
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(c) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
}

/// `[c_out, k, k, c_in] -> [k, k, c_in, c_out]`.
fn transpose_weight(weight: &[f32], g: &ConvGeom) -> Vec<f32> {
    let kk = g.kernel * g.kernel;
    let mut wt = vec![0.0; weight.len()];
    for o in 0..g.c_out {
        for p in 0..kk {
            for c in 0..g.c_in {
                wt[(p * g.c_in + c) * g.c_out + o] = weight[(o * kk + p) * g.c_in + c];
            }
        }
    }
    wt
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Eight independent lanes so the loop vectorizes.
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f32>() + tail
}

#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    // Explicit 8-wide blocks: short rows otherwise fall into the scalar
    // epilogue of the auto-vectorized loop.
    let mut yc = y.chunks_exact_mut(8);
    let mut xc = x.chunks_exact(8);
    for (yb, xb) in (&mut yc).zip(&mut xc) {
        for i in 0..8 {
            yb[i] += a * xb[i];
        }
    }
    for (v, u) in yc.into_remainder().iter_mut().zip(xc.remainder()) {
        *v += a * u;
    }
}

/// Calls `f(o0, i0, len, p)` for every run of `len` consecutive output
/// pixels starting at `o0` that read kernel tap `p` from input pixels
/// `i0, i0 + stride, ...`. Padding is handled by clipping the runs.
#[inline]
fn for_each_run(n: usize, g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let (oh, ow) = g.out_hw();
    let (k, st, pad) = (g.kernel, g.stride, g.pad);
    let ranges: Vec<(usize, usize)> = (0..k)
        .map(|kx| {
            let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(st) };
            let hi = ow.min((g.w + pad - kx).div_ceil(st));
            (lo, hi.max(lo))
        })
        .collect();
    for s in 0..n {
        for oy in 0..oh {
            let row = (s * oh + oy) * ow;
            for ky in 0..k {
                let iy = (oy * st + ky) as isize - pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let in_row = (s * g.h + iy as usize) * g.w;
                for (kx, &(lo, hi)) in ranges.iter().enumerate() {
                    if lo < hi {
                        f(row + lo, in_row + lo * st + kx - pad, hi - lo, ky * k + kx);
                    }
                }
            }
        }
    }
}

fn direct_forward(x: &[f32], n: usize, g: &ConvGeom, weight: &[f32], y: &mut [f32]) {
    let (ci, co, kk, st) = (g.c_in, g.c_out, g.kernel * g.kernel, g.stride);
    if co >= ci {
        let wt = transpose_weight(weight, g);
        for_each_run(n, g, |o0, i0, len, p| {
            for t in 0..len {
                let (o, i) = (o0 + t, i0 + t * st);
                let out = &mut y[o * co..(o + 1) * co];
                for c in 0..ci {
                    axpy(out, x[i * ci + c], &wt[(p * ci + c) * co..(p * ci + c + 1) * co]);
                }
            }
        });
    } else {
        for_each_run(n, g, |o0, i0, len, p| {
            for t in 0..len {
                let (o, i) = (o0 + t, i0 + t * st);
                let xp = &x[i * ci..(i + 1) * ci];
                for oc in 0..co {
                    y[o * co + oc] += dot(xp, &weight[(oc * kk + p) * ci..(oc * kk + p + 1) * ci]);
                }
            }
        });
    }
}

fn direct_backward(
    x: &[f32],
    n: usize,
    g: &ConvGeom,
    weight: &[f32],
    dy: &[f32],
    dweight: Option<&mut [f32]>,
    dx: Option<&mut [f32]>,
) {
    let (ci, co, kk, st) = (g.c_in, g.c_out, g.kernel * g.kernel, g.stride);
    let wt = if co >= ci { transpose_weight(weight, g) } else { Vec::new() };
    if let Some(dx) = dx {
        if co >= ci {
            for_each_run(n, g, |o0, i0, len, p| {
                for t in 0..len {
                    let (o, i) = (o0 + t, i0 + t * st);
                    let dyp = &dy[o * co..(o + 1) * co];
                    for c in 0..ci {
                        dx[i * ci + c] += dot(dyp, &wt[(p * ci + c) * co..(p * ci + c + 1) * co]);
                    }
                }
            });
        } else {
            for_each_run(n, g, |o0, i0, len, p| {
                for t in 0..len {
                    let (o, i) = (o0 + t, i0 + t * st);
                    let dxp = &mut dx[i * ci..(i + 1) * ci];
                    for oc in 0..co {
                        axpy(dxp, dy[o * co + oc], &weight[(oc * kk + p) * ci..(oc * kk + p + 1) * ci]);
                    }
                }
            });
        }
    }
    if let Some(dw) = dweight {
        if co >= ci {
            let mut dwt = vec![0.0; dw.len()];
            for_each_run(n, g, |o0, i0, len, p| {
                for t in 0..len {
                    let (o, i) = (o0 + t, i0 + t * st);
                    let dyp = &dy[o * co..(o + 1) * co];
                    for c in 0..ci {
                        axpy(&mut dwt[(p * ci + c) * co..(p * ci + c + 1) * co], x[i * ci + c], dyp);
                    }
                }
            });
            for oc in 0..co {
                for p in 0..kk {
                    for c in 0..ci {
                        dw[(oc * kk + p) * ci + c] += dwt[(p * ci + c) * co + oc];
                    }
                }
            }
        } else {
            for_each_run(n, g, |o0, i0, len, p| {
                for t in 0..len {
                    let (o, i) = (o0 + t, i0 + t * st);
                    let xp = &x[i * ci..(i + 1) * ci];
                    for oc in 0..co {
                        axpy(&mut dw[(oc * kk + p) * ci..(oc * kk + p + 1) * ci], dy[o * co + oc], xp);
                    }
                }
            });
        }
    }
}

/// Backward convolution. Accumulates into `dweight`/`dbias` when given and
/// returns the input gradient when `want_dx` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f32],
    n: usize,
    g: &ConvGeom,
    weight: &[f32],
    dy: &[f32],
    dweight: Option<&mut [f32]>,
    dbias: Option<&mut [f32]>,
    want_dx: bool,
) -> Option<Vec<f32>> {
    let (oh, ow) = g.out_hw();
    let patch = g.patch();
    if let Some(db) = dbias {
        for row in dy.chunks_exact(g.c_out) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    let mut dx = if want_dx {
        Some(vec![0.0; n * g.h * g.w * g.c_in])
    } else {
        None
    };
    let mut dweight = dweight;
    if dweight.is_none() && dx.is_none() {
        return None;
    }
    if g.use_direct() {
        direct_backward(x, n, g, weight, dy, dweight, dx.as_deref_mut());
        return dx;
    }
    let chunk = g.chunk();
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    let mut s0 = 0;
    while s0 < n {
        let cn = chunk.min(n - s0);
        let rows = cn * oh * ow;
        let in_len = g.h * g.w * g.c_in;
        let xs = &x[s0 * in_len..(s0 + cn) * in_len];
        let dys = &dy[s0 * oh * ow * g.c_out..(s0 + cn) * oh * ow * g.c_out];
        if let Some(dw) = dweight.as_deref_mut() {
            let a: &[f32] = if g.is_pointwise() {
                xs
            } else {
                col.resize(rows * patch, 0.0);
                im2col(xs, cn, g, &mut col);
                &col
            };
            // dW[c_out, patch] += dY^T[c_out, rows] * col[rows, patch]
            gemm(g.c_out, rows, patch, dys, 1, g.c_out, a, patch, 1, 1.0, dw, patch, 1);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s0 * in_len..(s0 + cn) * in_len];
            if g.is_pointwise() {
                gemm(rows, g.c_out, patch, dys, g.c_out, 1, weight, patch, 1, 1.0, dxs, patch, 1);
            } else {
                dcol.resize(rows * patch, 0.0);
                gemm(rows, g.c_out, patch, dys, g.c_out, 1, weight, patch, 1, 0.0, &mut dcol, patch, 1);
                col2im(&dcol, cn, g, dxs);
            }
        }
        s0 += cn;
    }
    dx
}

/// 2x2/stride-2 max pooling (floor). Returns output and, per output element,
/// the flat input index that won.
pub fn maxpool2_forward(x: &[f32], n: usize, h: usize, w: usize, c: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; n * oh * ow * c];
    let mut idx = vec![0u32; y.len()];
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((s * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    let mut bi = ((s * h + 2 * oy) * w + 2 * ox) * c + ch;
                    let mut best = x[bi];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((s * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if x[i] > best {
                            best = x[i];
                            bi = i;
                        }
                    }
                    y[o + ch] = best;
                    idx[o + ch] = bi as u32;
                }
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward(dy: &[f32], idx: &[u32], in_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0; in_len];
    for (g, &i) in dy.iter().zip(idx) {
        dx[i as usize] += g;
    }
    dx
}

/// Mean over the spatial dimensions: `[n, h, w, c] -> [n, c]`.
pub fn global_avgpool_forward(x: &[f32], n: usize, hw: usize, c: usize) -> Vec<f32> {
    let mut y = vec![0.0; n * c];
    let inv = 1.0 / hw as f32;
    for s in 0..n {
        let ys = &mut y[s * c..(s + 1) * c];
        for p in x[s * hw * c..(s + 1) * hw * c].chunks_exact(c) {
            for (a, b) in ys.iter_mut().zip(p) {
                *a += b;
            }
        }
        for a in ys.iter_mut() {
            *a *= inv;
        }
    }
    y
}

pub fn global_avgpool_backward(dy: &[f32], n: usize, hw: usize, c: usize) -> Vec<f32> {
    let mut dx = vec![0.0; n * hw * c];
    let inv = 1.0 / hw as f32;
    for s in 0..n {
        let g = &dy[s * c..(s + 1) * c];
        for p in dx[s * hw * c..(s + 1) * hw * c].chunks_exact_mut(c) {
            for (a, b) in p.iter_mut().zip(g) {
                *a = b * inv;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward(x: &[f32], n: usize, h: usize, w: usize, c: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![0.0; n * oh * ow * c];
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((s * h + oy / 2) * w + ox / 2) * c;
                let dst = ((s * oh + oy) * ow + ox) * c;
                y[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &[f32], n: usize, h: usize, w: usize, c: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; n * h * w * c];
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((s * h + oy / 2) * w + ox / 2) * c;
                let src = ((s * oh + oy) * ow + ox) * c;
                for (a, b) in dx[dst..dst + c].iter_mut().zip(&dy[src..src + c]) {
                    *a += b;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop convolution used as an oracle for the im2col path.
    fn conv_naive(x: &[f32], n: usize, g: &ConvGeom, wt: &[f32], b: &[f32]) -> Vec<f32> {
        let (oh, ow) = g.out_hw();
        let mut y = vec![0.0; n * oh * ow * g.c_out];
        for s in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..g.c_out {
                        let mut acc = b[co] as f64;
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                for ci in 0..g.c_in {
                                    let xv = x[((s * g.h + iy as usize) * g.w + ix as usize) * g.c_in + ci];
                                    let wv = wt[((co * g.kernel + ky) * g.kernel + kx) * g.c_in + ci];
                                    acc += (xv * wv) as f64;
                                }
                            }
                        }
                        y[((s * oh + oy) * ow + ox) * g.c_out + co] = acc as f32;
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: u32) -> Vec<f32> {
        (0..n)
            .map(|i| {
                let v = (i as u32).wrapping_mul(2654435761).wrapping_add(seed.wrapping_mul(97));
                (v % 1000) as f32 / 500.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive_oracle() {
        for &(k, stride, pad, c_in, c_out) in
            &[(3, 1, 1, 5, 6), (3, 2, 1, 5, 6), (1, 1, 0, 5, 6), (1, 2, 0, 5, 6), (3, 1, 1, 1, 8), (3, 2, 1, 6, 1)]
        {
            let g = ConvGeom { h: 5, w: 6, c_in, c_out, kernel: k, stride, pad };
            let n = 2;
            let x = pseudo(n * 5 * 6 * c_in, 1);
            let wt = pseudo(c_out * k * k * c_in, 2);
            let b = pseudo(c_out, 3);
            let fast = conv2d_forward(&x, n, &g, &wt, Some(&b));
            let slow = conv_naive(&x, n, &g, &wt, &b);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-4, "k={k} s={stride}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), dy> == <x, dx> and == <w, dw> for the linear map.
        for (c_in, c_out) in [(5, 6), (2, 3), (6, 2), (1, 7)] {
            check_adjoint(ConvGeom { h: 4, w: 4, c_in, c_out, kernel: 3, stride: 2, pad: 1 });
        }
    }

    fn check_adjoint(g: ConvGeom) {
        let n = 2;
        let x = pseudo(n * 4 * 4 * g.c_in, 5);
        let wt = pseudo(g.c_out * 9 * g.c_in, 6);
        let (oh, ow) = g.out_hw();
        let dy = pseudo(n * oh * ow * g.c_out, 7);
        let y = conv2d_forward(&x, n, &g, &wt, None);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| (a * b) as f64).sum();
        let mut dw = vec![0.0; wt.len()];
        let dx = conv2d_backward(&x, n, &g, &wt, &dy, Some(&mut dw), None, true).unwrap();
        let via_x: f64 = x.iter().zip(&dx).map(|(a, b)| (a * b) as f64).sum();
        let via_w: f64 = wt.iter().zip(&dw).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - via_x).abs() < 1e-4 * lhs.abs().max(1.0));
        assert!((lhs - via_w).abs() < 1e-4 * lhs.abs().max(1.0));
    }

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let x = vec![1.0, 5.0, 2.0, 3.0];
        let (y, idx) = maxpool2_forward(&x, 1, 2, 2, 1);
        assert_eq!(y, vec![5.0]);
        assert_eq!(maxpool2_backward(&[2.0], &idx, 4), vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_backward_sums_copies() {
        let x = vec![1.0, 2.0];
        let y = upsample2_forward(&x, 1, 1, 1, 2);
        assert_eq!(y, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert_eq!(upsample2_backward(&[1.0; 8], 1, 1, 1, 2), vec![4.0, 4.0]);
    }
}
