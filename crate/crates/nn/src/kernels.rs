//! CPU kernels over raw NHWC slices. Every forward has a matching backward
//! that accumulates into caller-provided gradient buffers.

/// Row-major `c = a · b + beta · c` where `a` is `m×k` and `b` is `k×n`,
/// each given with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    debug_assert!(a.len() >= (m - 1) * a_strides.0 + (k - 1) * a_strides.1 + 1);
    debug_assert!(b.len() >= (k - 1) * b_strides.0 + (n - 1) * b_strides.1 + 1);
    // SAFETY: the debug assertions above describe the extents read and
    // written; callers size the buffers from the same geometry.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D sliding window over one NHWC sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl Window {
    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.channels
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Length of one im2col row.
    pub fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.channels
    }

    fn is_pointwise(&self) -> bool {
        self.k_h == 1
            && self.k_w == 1
            && self.stride_h == 1
            && self.stride_w == 1
            && self.pad_top == 0
            && self.pad_left == 0
            && self.out_h == self.in_h
            && self.out_w == self.in_w
    }

    /// Input coordinate for output row/col plus tap, or `None` in padding.
    #[inline]
    fn source(&self, out: usize, tap: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (out * stride + tap).checked_sub(pad)?;
        (pos < limit).then_some(pos)
    }

    #[inline]
    fn src_row(&self, oy: usize, ky: usize) -> Option<usize> {
        self.source(oy, ky, self.stride_h, self.pad_top, self.in_h)
    }

    #[inline]
    fn src_col(&self, ox: usize, kx: usize) -> Option<usize> {
        self.source(ox, kx, self.stride_w, self.pad_left, self.in_w)
    }
}

fn im2col(x: &[f32], g: &Window, col: &mut [f32]) {
    let c = g.channels;
    let patch = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut col[(oy * g.out_w + ox) * patch..][..patch];
            for ky in 0..g.k_h {
                let iy = g.src_row(oy, ky);
                for kx in 0..g.k_w {
                    let dst = &mut row[(ky * g.k_w + kx) * c..][..c];
                    match (iy, g.src_col(ox, kx)) {
                        (Some(iy), Some(ix)) => {
                            dst.copy_from_slice(&x[(iy * g.in_w + ix) * c..][..c]);
                        }
                        _ => dst.fill(0.0),
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f32], g: &Window, dx: &mut [f32]) {
    let c = g.channels;
    let patch = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &col[(oy * g.out_w + ox) * patch..][..patch];
            for ky in 0..g.k_h {
                let Some(iy) = g.src_row(oy, ky) else { continue };
                for kx in 0..g.k_w {
                    let Some(ix) = g.src_col(ox, kx) else { continue };
                    let src = &row[(ky * g.k_w + kx) * c..][..c];
                    let dst = &mut dx[(iy * g.in_w + ix) * c..][..c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Standard convolution. `kernel` is `[k_h, k_w, channels, filters]`.
pub fn conv2d_forward(
    x: &[f32],
    batch: usize,
    g: &Window,
    kernel: &[f32],
    bias: Option<&[f32]>,
    filters: usize,
) -> Vec<f32> {
    let out_len = g.out_pixels() * filters;
    let mut y = vec![0.0; batch * out_len];
    let patch = g.patch_len();
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.out_pixels() * patch]
    };
    for n in 0..batch {
        let xs = &x[n * g.in_len()..][..g.in_len()];
        let a = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut col);
            &col
        };
        let ys = &mut y[n * out_len..][..out_len];
        sgemm(
            g.out_pixels(),
            patch,
            filters,
            a,
            (patch, 1),
            kernel,
            (filters, 1),
            ys,
            0.0,
        );
        if let Some(b) = bias {
            for px in ys.chunks_mut(filters) {
                for (v, bb) in px.iter_mut().zip(b) {
                    *v += *bb;
                }
            }
        }
    }
    y
}

/// Gradients of [`conv2d_forward`] given the gradient `dz` of its output.
/// `dx`, `dkernel` and `dbias` are accumulated into when present.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f32],
    batch: usize,
    g: &Window,
    kernel: &[f32],
    filters: usize,
    dz: &[f32],
    mut dx: Option<&mut [f32]>,
    mut dkernel: Option<&mut [f32]>,
    dbias: Option<&mut [f32]>,
) {
    let out_len = g.out_pixels() * filters;
    let patch = g.patch_len();
    let m = g.out_pixels();
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0; m * patch] };
    let mut dcol = if pointwise || dx.is_none() {
        Vec::new()
    } else {
        vec![0.0; m * patch]
    };
    for n in 0..batch {
        let dzs = &dz[n * out_len..][..out_len];
        let xs = &x[n * g.in_len()..][..g.in_len()];
        if let Some(dk) = dkernel.as_deref_mut() {
            let a = if pointwise {
                xs
            } else {
                im2col(xs, g, &mut col);
                &col
            };
            // dK (patch x filters) += colᵀ (patch x m) · dz (m x filters)
            sgemm(patch, m, filters, a, (1, patch), dzs, (filters, 1), dk, 1.0);
        }
        if let Some(dxall) = dx.as_deref_mut() {
            let dxs = &mut dxall[n * g.in_len()..][..g.in_len()];
            if pointwise {
                // dx (m x c) += dz (m x filters) · Kᵀ (filters x c)
                sgemm(m, filters, patch, dzs, (filters, 1), kernel, (1, filters), dxs, 1.0);
            } else {
                sgemm(
                    m,
                    filters,
                    patch,
                    dzs,
                    (filters, 1),
                    kernel,
                    (1, filters),
                    &mut dcol,
                    0.0,
                );
                col2im_add(&dcol, g, dxs);
            }
        }
    }
    if let Some(db) = dbias {
        for px in dz.chunks(filters) {
            for (d, v) in db.iter_mut().zip(px) {
                *d += *v;
            }
        }
    }
}

/// Depthwise convolution with multiplier 1. `kernel` is `[k_h, k_w, channels]`.
pub fn depthwise_forward(x: &[f32], batch: usize, g: &Window, kernel: &[f32]) -> Vec<f32> {
    let c = g.channels;
    let out_len = g.out_pixels() * c;
    let mut y = vec![0.0; batch * out_len];
    for n in 0..batch {
        let xs = &x[n * g.in_len()..][..g.in_len()];
        let ys = &mut y[n * out_len..][..out_len];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let out = &mut ys[(oy * g.out_w + ox) * c..][..c];
                for ky in 0..g.k_h {
                    let Some(iy) = g.src_row(oy, ky) else { continue };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.src_col(ox, kx) else { continue };
                        let xin = &xs[(iy * g.in_w + ix) * c..][..c];
                        let w = &kernel[(ky * g.k_w + kx) * c..][..c];
                        for ((o, a), b) in out.iter_mut().zip(xin).zip(w) {
                            *o += a * b;
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn depthwise_backward(
    x: &[f32],
    batch: usize,
    g: &Window,
    kernel: &[f32],
    dy: &[f32],
    mut dx: Option<&mut [f32]>,
    mut dkernel: Option<&mut [f32]>,
) {
    let c = g.channels;
    let out_len = g.out_pixels() * c;
    for n in 0..batch {
        let xs = &x[n * g.in_len()..][..g.in_len()];
        let dys = &dy[n * out_len..][..out_len];
        let mut dxs = dx.as_deref_mut().map(|d| &mut d[n * g.in_len()..][..g.in_len()]);
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let grad = &dys[(oy * g.out_w + ox) * c..][..c];
                for ky in 0..g.k_h {
                    let Some(iy) = g.src_row(oy, ky) else { continue };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.src_col(ox, kx) else { continue };
                        let tap = (ky * g.k_w + kx) * c;
                        let at = (iy * g.in_w + ix) * c;
                        if let Some(dk) = dkernel.as_deref_mut() {
                            let xin = &xs[at..][..c];
                            for ((d, a), b) in dk[tap..][..c].iter_mut().zip(grad).zip(xin) {
                                *d += a * b;
                            }
                        }
                        if let Some(dxs) = dxs.as_deref_mut() {
                            let w = &kernel[tap..][..c];
                            for ((d, a), b) in dxs[at..][..c].iter_mut().zip(grad).zip(w) {
                                *d += a * b;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling; returns the output and, per output value, the flat
/// in-sample index of the winning input.
pub fn max_pool_forward(x: &[f32], batch: usize, g: &Window) -> (Vec<f32>, Vec<u32>) {
    let c = g.channels;
    let out_len = g.out_pixels() * c;
    let mut y = vec![f32::NEG_INFINITY; batch * out_len];
    let mut arg = vec![0u32; batch * out_len];
    for n in 0..batch {
        let xs = &x[n * g.in_len()..][..g.in_len()];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let base = n * out_len + (oy * g.out_w + ox) * c;
                for ky in 0..g.k_h {
                    let Some(iy) = g.src_row(oy, ky) else { continue };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.src_col(ox, kx) else { continue };
                        let at = (iy * g.in_w + ix) * c;
                        for ch in 0..c {
                            let v = xs[at + ch];
                            if v > y[base + ch] {
                                y[base + ch] = v;
                                arg[base + ch] = (at + ch) as u32;
                            }
                        }
                    }
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool_backward(dy: &[f32], arg: &[u32], batch: usize, g: &Window, dx: &mut [f32]) {
    let out_len = g.out_pixels() * g.channels;
    for n in 0..batch {
        let dxs = &mut dx[n * g.in_len()..][..g.in_len()];
        for (d, &a) in dy[n * out_len..][..out_len].iter().zip(&arg[n * out_len..][..out_len]) {
            dxs[a as usize] += *d;
        }
    }
}

/// Number of in-bounds taps for each output pixel (padding excluded).
fn tap_counts(g: &Window) -> Vec<f32> {
    let mut counts = Vec::with_capacity(g.out_pixels());
    for oy in 0..g.out_h {
        let rows = (0..g.k_h).filter(|&ky| g.src_row(oy, ky).is_some()).count();
        for ox in 0..g.out_w {
            let cols = (0..g.k_w).filter(|&kx| g.src_col(ox, kx).is_some()).count();
            counts.push((rows * cols) as f32);
        }
    }
    counts
}

/// Average pooling that averages over in-bounds taps only.
pub fn avg_pool_forward(x: &[f32], batch: usize, g: &Window) -> Vec<f32> {
    let c = g.channels;
    let out_len = g.out_pixels() * c;
    let counts = tap_counts(g);
    let mut y = vec![0.0; batch * out_len];
    for n in 0..batch {
        let xs = &x[n * g.in_len()..][..g.in_len()];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let p = oy * g.out_w + ox;
                let out = &mut y[n * out_len + p * c..][..c];
                for ky in 0..g.k_h {
                    let Some(iy) = g.src_row(oy, ky) else { continue };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.src_col(ox, kx) else { continue };
                        for (o, v) in out.iter_mut().zip(&xs[(iy * g.in_w + ix) * c..][..c]) {
                            *o += *v;
                        }
                    }
                }
                let inv = 1.0 / counts[p];
                out.iter_mut().for_each(|o| *o *= inv);
            }
        }
    }
    y
}

pub fn avg_pool_backward(dy: &[f32], batch: usize, g: &Window, dx: &mut [f32]) {
    let c = g.channels;
    let out_len = g.out_pixels() * c;
    let counts = tap_counts(g);
    for n in 0..batch {
        let dxs = &mut dx[n * g.in_len()..][..g.in_len()];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let p = oy * g.out_w + ox;
                let grad = &dy[n * out_len + p * c..][..c];
                let inv = 1.0 / counts[p];
                for ky in 0..g.k_h {
                    let Some(iy) = g.src_row(oy, ky) else { continue };
                    for kx in 0..g.k_w {
                        let Some(ix) = g.src_col(ox, kx) else { continue };
                        for (d, v) in dxs[(iy * g.in_w + ix) * c..][..c].iter_mut().zip(grad) {
                            *d += *v * inv;
                        }
                    }
                }
            }
        }
    }
}

/// Row-wise softmax over `[rows, k]`.
pub fn softmax_rows(z: &mut [f32], k: usize) {
    for row in z.chunks_mut(k) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Per-channel statistics of a `[rows, channels]` view.
pub fn channel_moments(x: &[f32], channels: usize) -> (Vec<f32>, Vec<f32>) {
    let rows = x.len() / channels;
    let mut mean = vec![0.0f64; channels];
    for px in x.chunks(channels) {
        for (m, v) in mean.iter_mut().zip(px) {
            *m += *v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0f64; channels];
    for px in x.chunks(channels) {
        for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
            let d = *v as f64 - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= rows as f64);
    (
        mean.into_iter().map(|m| m as f32).collect(),
        var.into_iter().map(|v| v as f32).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(in_hw: (usize, usize), c: usize, k: (usize, usize), s: usize, pad: (usize, usize), out: (usize, usize)) -> Window {
        Window {
            in_h: in_hw.0,
            in_w: in_hw.1,
            channels: c,
            out_h: out.0,
            out_w: out.1,
            k_h: k.0,
            k_w: k.1,
            stride_h: s,
            stride_w: s,
            pad_top: pad.0,
            pad_left: pad.1,
        }
    }

    /// Direct seven-loop convolution used as the reference.
    fn naive_conv(x: &[f32], g: &Window, k: &[f32], f: usize) -> Vec<f32> {
        let mut y = vec![0.0; g.out_pixels() * f];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for o in 0..f {
                    let mut acc = 0.0;
                    for ky in 0..g.k_h {
                        for kx in 0..g.k_w {
                            let iy = (oy * g.stride_h + ky) as isize - g.pad_top as isize;
                            let ix = (ox * g.stride_w + kx) as isize - g.pad_left as isize;
                            if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                continue;
                            }
                            for c in 0..g.channels {
                                let xv = x[(iy as usize * g.in_w + ix as usize) * g.channels + c];
                                let kv = k[((ky * g.k_w + kx) * g.channels + c) * f + o];
                                acc += xv * kv;
                            }
                        }
                    }
                    y[(oy * g.out_w + ox) * f + o] = acc;
                }
            }
        }
        y
    }

    fn ramp(n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|i| ((i * 37 % 23) as f32 - 11.0) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_loops_with_padding_and_stride() {
        let g = window((5, 6), 3, (3, 2), 2, (1, 0), (3, 3));
        let x = ramp(g.in_len(), 0.1);
        let k = ramp(3 * 2 * 3 * 4, 0.05);
        let y = conv2d_forward(&x, 1, &g, &k, None, 4);
        let want = naive_conv(&x, &g, &k, 4);
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let g = window((4, 4), 2, (3, 3), 1, (1, 1), (4, 4));
        let f = 3;
        let x = ramp(g.in_len(), 0.1);
        let k = ramp(9 * 2 * f, 0.03);
        // loss = sum(y * r) for a fixed r
        let r = ramp(g.out_pixels() * f, 0.07);
        let loss = |x: &[f32], k: &[f32]| -> f64 {
            conv2d_forward(x, 1, &g, k, None, f)
                .iter()
                .zip(&r)
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        let mut dx = vec![0.0; x.len()];
        let mut dk = vec![0.0; k.len()];
        conv2d_backward(&x, 1, &g, &k, f, &r, Some(&mut dx), Some(&mut dk), None);
        let h = 1e-2;
        for i in [0, 5, 17, 31] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let num = (loss(&xp, &k) - loss(&xm, &k)) / (2.0 * h as f64);
            assert!((num - dx[i] as f64).abs() < 1e-3, "dx[{i}] {num} vs {}", dx[i]);
        }
        for i in [0, 7, 20, 53] {
            let (mut kp, mut km) = (k.clone(), k.clone());
            kp[i] += h;
            km[i] -= h;
            let num = (loss(&x, &kp) - loss(&x, &km)) / (2.0 * h as f64);
            assert!((num - dk[i] as f64).abs() < 1e-3, "dk[{i}] {num} vs {}", dk[i]);
        }
    }

    #[test]
    fn depthwise_matches_per_channel_conv() {
        let g = window((5, 5), 3, (3, 3), 2, (1, 1), (3, 3));
        let x = ramp(g.in_len(), 0.1);
        let k = ramp(9 * 3, 0.2);
        let y = depthwise_forward(&x, 1, &g, &k);
        for ch in 0..3 {
            let xc: Vec<f32> = x.iter().skip(ch).step_by(3).copied().collect();
            let kc: Vec<f32> = k.iter().skip(ch).step_by(3).copied().collect();
            let gc = Window { channels: 1, ..g };
            let want = naive_conv(&xc, &gc, &kc, 1);
            for (p, w) in want.iter().enumerate() {
                assert!((y[p * 3 + ch] - w).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn same_max_pool_ignores_padding() {
        // all-negative input: padded zeros must never win
        let g = window((3, 3), 1, (3, 3), 2, (1, 1), (2, 2));
        let x: Vec<f32> = (1..=9).map(|v| -(v as f32)).collect();
        let (y, arg) = max_pool_forward(&x, 1, &g);
        assert_eq!(y, vec![-1.0, -2.0, -4.0, -5.0]);
        assert_eq!(arg, vec![0, 1, 3, 4]);
    }

    #[test]
    fn same_avg_pool_counts_valid_taps() {
        let g = window((2, 2), 1, (3, 3), 1, (1, 1), (2, 2));
        let y = avg_pool_forward(&[1.0, 2.0, 3.0, 4.0], 1, &g);
        assert_eq!(y, vec![2.5; 4]);
    }
}
