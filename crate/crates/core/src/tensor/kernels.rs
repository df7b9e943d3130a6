//! Raw slice kernels behind the graph ops. Layouts are row-major:
//! features `[C, T, H, W]`, kernels `[C_out, C_in, kt, kh, kw]`.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub dil: [usize; 3],
}

impl ConvGeom {
    fn volume(&self) -> usize {
        self.t * self.h * self.w
    }

    fn kernel_index(&self, co: usize, ci: usize, a: usize, b: usize, c: usize) -> usize {
        (((co * self.c_in + ci) * self.kt + a) * self.kh + b) * self.kw + c
    }
}

/// Offset of tap `a` for a centered, size-preserving kernel of length `k`.
#[inline]
fn tap_offset(a: usize, k: usize, dil: usize) -> isize {
    (a * dil) as isize - (dil * (k - 1) / 2) as isize
}

/// Output index range `[lo, hi)` whose shifted input index stays inside `0..len`.
#[inline]
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// Visits every (kernel index, output slice, input slice) pairing of a
/// zero-padded cross-correlation as contiguous runs.
#[inline]
fn for_each_run(g: &ConvGeom, co: usize, ci: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    let plane = g.h * g.w;
    for a in 0..g.kt {
        let ot = tap_offset(a, g.kt, g.dil[0]);
        let (t_lo, t_hi) = valid_range(g.t, ot);
        if t_lo >= t_hi {
            continue;
        }
        if g.kh == 1 && g.kw == 1 {
            let k = g.kernel_index(co, ci, a, 0, 0);
            let out0 = t_lo * plane;
            let in0 = ((t_lo as isize + ot) as usize) * plane;
            f(k, out0, in0, (t_hi - t_lo) * plane);
            continue;
        }
        for b in 0..g.kh {
            let oh = tap_offset(b, g.kh, g.dil[1]);
            let (h_lo, h_hi) = valid_range(g.h, oh);
            if h_lo >= h_hi {
                continue;
            }
            for c in 0..g.kw {
                let ow = tap_offset(c, g.kw, g.dil[2]);
                let (w_lo, w_hi) = valid_range(g.w, ow);
                if w_lo >= w_hi {
                    continue;
                }
                let k = g.kernel_index(co, ci, a, b, c);
                for t in t_lo..t_hi {
                    let ti = (t as isize + ot) as usize;
                    for h in h_lo..h_hi {
                        let hi = (h as isize + oh) as usize;
                        let out0 = (t * g.h + h) * g.w + w_lo;
                        let in0 = (ti * g.h + hi) * g.w + (w_lo as isize + ow) as usize;
                        f(k, out0, in0, w_hi - w_lo);
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    // Four accumulators keep the loop vectorizable; the order is fixed so the
    // result is reproducible.
    let mut acc = [0.0f64; 4];
    let chunks = x.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            acc[j] += x[4 * i + j] * y[4 * i + j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..x.len() {
        s += x[i] * y[i];
    }
    s
}

/// Pixel tile used by the spatially pointwise (`kh = kw = 1`) paths, which
/// keeps all channels and frames of one tile resident in cache.
const TILE: usize = 64;

fn tiles(plane: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..plane)
        .step_by(TILE)
        .map(move |p0| (p0, TILE.min(plane - p0)))
}

fn temporal_offsets(g: &ConvGeom) -> Vec<isize> {
    (0..g.kt).map(|a| tap_offset(a, g.kt, g.dil[0])).collect()
}

#[inline]
fn shifted(t: usize, off: isize, len: usize) -> Option<usize> {
    let s = t as isize + off;
    (s >= 0 && s < len as isize).then_some(s as usize)
}

fn pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1
}

pub(crate) fn conv3d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let vol = g.volume();
    let mut out = vec![0.0; g.c_out * vol];
    if pointwise(g) {
        let plane = g.h * g.w;
        let offs = temporal_offsets(g);
        for (p0, n) in tiles(plane) {
            for t in 0..g.t {
                for co in 0..g.c_out {
                    let o = co * vol + t * plane + p0;
                    let dst = &mut out[o..o + n];
                    for ci in 0..g.c_in {
                        for (a, &off) in offs.iter().enumerate() {
                            let Some(ti) = shifted(t, off, g.t) else {
                                continue;
                            };
                            let i = ci * vol + ti * plane + p0;
                            axpy(
                                kernel[g.kernel_index(co, ci, a, 0, 0)],
                                &input[i..i + n],
                                dst,
                            );
                        }
                    }
                }
            }
        }
        return out;
    }
    for co in 0..g.c_out {
        let out_c = &mut out[co * vol..(co + 1) * vol];
        for ci in 0..g.c_in {
            let in_c = &input[ci * vol..(ci + 1) * vol];
            for_each_run(g, co, ci, |k, o, i, n| {
                axpy(kernel[k], &in_c[i..i + n], &mut out_c[o..o + n]);
            });
        }
    }
    out
}

pub(crate) fn conv3d_backward_input(
    g: &ConvGeom,
    grad_out: &[f64],
    kernel: &[f64],
    grad_in: &mut [f64],
) {
    let vol = g.volume();
    if pointwise(g) {
        let plane = g.h * g.w;
        let offs = temporal_offsets(g);
        for (p0, n) in tiles(plane) {
            for ti in 0..g.t {
                for ci in 0..g.c_in {
                    let i = ci * vol + ti * plane + p0;
                    let dst = &mut grad_in[i..i + n];
                    for co in 0..g.c_out {
                        for (a, &off) in offs.iter().enumerate() {
                            // Output frame t reads input frame t + off.
                            let Some(t) = shifted(ti, -off, g.t) else {
                                continue;
                            };
                            let o = co * vol + t * plane + p0;
                            axpy(
                                kernel[g.kernel_index(co, ci, a, 0, 0)],
                                &grad_out[o..o + n],
                                dst,
                            );
                        }
                    }
                }
            }
        }
        return;
    }
    for ci in 0..g.c_in {
        let gin_c = &mut grad_in[ci * vol..(ci + 1) * vol];
        for co in 0..g.c_out {
            let gout_c = &grad_out[co * vol..(co + 1) * vol];
            for_each_run(g, co, ci, |k, o, i, n| {
                axpy(kernel[k], &gout_c[o..o + n], &mut gin_c[i..i + n]);
            });
        }
    }
}

pub(crate) fn conv3d_backward_kernel(
    g: &ConvGeom,
    grad_out: &[f64],
    input: &[f64],
    grad_k: &mut [f64],
) {
    let vol = g.volume();
    if pointwise(g) {
        let plane = g.h * g.w;
        let offs = temporal_offsets(g);
        for (p0, n) in tiles(plane) {
            for t in 0..g.t {
                for co in 0..g.c_out {
                    let o = co * vol + t * plane + p0;
                    let go = &grad_out[o..o + n];
                    for ci in 0..g.c_in {
                        for (a, &off) in offs.iter().enumerate() {
                            let Some(ti) = shifted(t, off, g.t) else {
                                continue;
                            };
                            let i = ci * vol + ti * plane + p0;
                            grad_k[g.kernel_index(co, ci, a, 0, 0)] += dot(go, &input[i..i + n]);
                        }
                    }
                }
            }
        }
        return;
    }
    for co in 0..g.c_out {
        let gout_c = &grad_out[co * vol..(co + 1) * vol];
        for ci in 0..g.c_in {
            let in_c = &input[ci * vol..(ci + 1) * vol];
            for_each_run(g, co, ci, |k, o, i, n| {
                grad_k[k] += dot(&gout_c[o..o + n], &in_c[i..i + n]);
            });
        }
    }
}

/// `out[c, t', p] = sum_t x[c, t, p] * w[t, t']` for `x: [C, T, P]`, `w: [T, T]`.
pub(crate) fn matmul_time_forward(c: usize, t: usize, p: usize, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c * t * p];
    for (p0, n) in tiles(p) {
        for ch in 0..c {
            let base = ch * t * p + p0;
            for tp in 0..t {
                let (o0, o1) = (base + tp * p, base + tp * p + n);
                for ti in 0..t {
                    let i0 = base + ti * p;
                    axpy(w[ti * t + tp], &x[i0..i0 + n], &mut out[o0..o1]);
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_time_backward(
    c: usize,
    t: usize,
    p: usize,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    mut grad_x: Option<&mut [f64]>,
    mut grad_w: Option<&mut [f64]>,
) {
    for (p0, n) in tiles(p) {
        for ch in 0..c {
            let base = ch * t * p + p0;
            if let Some(gx) = grad_x.as_deref_mut() {
                for ti in 0..t {
                    let (o0, o1) = (base + ti * p, base + ti * p + n);
                    for tp in 0..t {
                        let g0 = base + tp * p;
                        axpy(w[ti * t + tp], &grad_out[g0..g0 + n], &mut gx[o0..o1]);
                    }
                }
            }
            if let Some(gw) = grad_w.as_deref_mut() {
                for ti in 0..t {
                    let xs = &x[base + ti * p..base + ti * p + n];
                    for tp in 0..t {
                        let g0 = base + tp * p;
                        gw[ti * t + tp] += dot(xs, &grad_out[g0..g0 + n]);
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling over the last two axes of `planes` stacked
/// `[N, H, W]` planes. Returns pooled values and the flat argmax of each cell;
/// ties resolve to the first element in row-major order.
pub(crate) fn max_pool2(planes: usize, h: usize, w: usize, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for n in 0..planes {
        let base = n * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let cands = [
                    base + (2 * i) * w + 2 * j,
                    base + (2 * i) * w + 2 * j + 1,
                    base + (2 * i + 1) * w + 2 * j,
                    base + (2 * i + 1) * w + 2 * j + 1,
                ];
                let mut best = cands[0];
                for &k in &cands[1..] {
                    if x[k] > x[best] {
                        best = k;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2(planes: usize, h: usize, w: usize, x: &[f64]) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * ho * wo];
    for n in 0..planes {
        for i in 0..ho {
            let src = &x[n * h * w + (i / 2) * w..n * h * w + (i / 2 + 1) * w];
            let dst = &mut out[n * ho * wo + i * wo..n * ho * wo + (i + 1) * wo];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = src[j / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(
    planes: usize,
    h: usize,
    w: usize,
    grad_out: &[f64],
    grad_in: &mut [f64],
) {
    let (ho, wo) = (2 * h, 2 * w);
    for n in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                grad_in[n * h * w + (i / 2) * w + j / 2] += grad_out[n * ho * wo + i * wo + j];
            }
        }
    }
}

/// Rewrites a temporal-difference kernel `[Co, Ci, l, kh, kw]` into the direct
/// kernel `[Co, Ci, l + 2, kh, kw]` whose tap `s` carries
/// `2 w[s-1] - w[s] - w[s-2]`, with weights outside `0..l` equal to zero.
pub(crate) fn td_kernel_forward(shape: &[usize], w: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let (pairs, l, sp) = (shape[0] * shape[1], shape[2], shape[3] * shape[4]);
    let le = l + 2;
    let at = |pair: usize, j: isize, s: usize| -> f64 {
        if j < 0 || j >= l as isize {
            0.0
        } else {
            w[(pair * l + j as usize) * sp + s]
        }
    };
    let mut out = vec![0.0; pairs * le * sp];
    for pair in 0..pairs {
        for s in 0..le {
            let j = s as isize;
            for q in 0..sp {
                out[(pair * le + s) * sp + q] =
                    2.0 * at(pair, j - 1, q) - at(pair, j, q) - at(pair, j - 2, q);
            }
        }
    }
    (vec![shape[0], shape[1], le, shape[3], shape[4]], out)
}

pub(crate) fn td_kernel_backward(shape: &[usize], grad_eff: &[f64], grad_w: &mut [f64]) {
    let (pairs, l, sp) = (shape[0] * shape[1], shape[2], shape[3] * shape[4]);
    let le = l + 2;
    for pair in 0..pairs {
        for j in 0..l {
            for q in 0..sp {
                let g = |s: usize| grad_eff[(pair * le + s) * sp + q];
                grad_w[(pair * l + j) * sp + q] += 2.0 * g(j + 1) - g(j) - g(j + 2);
            }
        }
    }
}

/// Rewrites a spatial-difference kernel `[Co, Ci, l, k, k]` into a plain kernel
/// of the same shape: the center tap holds the sum over all taps, the others
/// their negation.
pub(crate) fn sd_kernel_forward(shape: &[usize], w: &[f64]) -> Vec<f64> {
    let (groups, sp) = (shape[0] * shape[1] * shape[2], shape[3] * shape[4]);
    let center = sp / 2;
    let mut out = vec![0.0; w.len()];
    for gi in 0..groups {
        let src = &w[gi * sp..(gi + 1) * sp];
        let dst = &mut out[gi * sp..(gi + 1) * sp];
        let total: f64 = src.iter().sum();
        for q in 0..sp {
            dst[q] = if q == center { total } else { -src[q] };
        }
    }
    out
}

pub(crate) fn sd_kernel_backward(shape: &[usize], grad_eff: &[f64], grad_w: &mut [f64]) {
    let (groups, sp) = (shape[0] * shape[1] * shape[2], shape[3] * shape[4]);
    let center = sp / 2;
    for gi in 0..groups {
        let ge = &grad_eff[gi * sp..(gi + 1) * sp];
        let gc = ge[center];
        for q in 0..sp {
            grad_w[gi * sp + q] += if q == center { gc } else { gc - ge[q] };
        }
    }
}
