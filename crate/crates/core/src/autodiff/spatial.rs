//! Normalization, pooling and resampling kernels over NCHW-style layouts.

use crate::grid::Real;

/// `[outer, channels, inner]` view used by per-channel reductions.
#[derive(Debug, Clone, Copy)]
pub struct ChannelLayout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl ChannelLayout {
    /// Axis 1 is the channel axis; everything after it is flattened.
    pub fn of(shape: &[usize]) -> Option<Self> {
        if shape.len() < 2 {
            return None;
        }
        Some(Self {
            outer: shape[0],
            channels: shape[1],
            inner: shape[2..].iter().product(),
        })
    }

    pub fn count(&self) -> usize {
        self.outer * self.inner
    }

    /// Contiguous runs belonging to channel `c`, as offsets.
    fn runs(&self, c: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.outer).map(move |o| (o * self.channels + c) * self.inner)
    }
}

/// Sum with eight independent accumulators (fixed order, so deterministic).
fn lane_sum<T: Real>(xs: impl Iterator<Item = T>) -> T {
    let mut acc = [T::zero(); 8];
    for (i, v) in xs.enumerate() {
        acc[i & 7] += v;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

fn chunked_sum<T: Real>(xs: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let mut chunks = xs.chunks_exact(8);
    for ch in &mut chunks {
        for k in 0..8 {
            acc[k] += f(ch[k]);
        }
    }
    let tail = lane_sum(chunks.remainder().iter().map(|&v| f(v)));
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn chunked_dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail = lane_sum(
        ca.remainder()
            .iter()
            .zip(cb.remainder())
            .map(|(&x, &y)| x * y),
    );
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub struct BatchNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch normalization. With `running = None` statistics come from the batch
/// (biased variance); otherwise the supplied mean/variance are used.
pub fn batch_norm_forward<T: Real>(
    l: ChannelLayout,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    running: Option<(&[T], &[T])>,
) -> (Vec<T>, BatchNormSaved<T>) {
    let n = T::from_usize(l.count()).unwrap();
    let inner = l.inner;
    let mut mean = vec![T::zero(); l.channels];
    let mut var = vec![T::zero(); l.channels];
    match running {
        Some((rm, rv)) => {
            mean.copy_from_slice(rm);
            var.copy_from_slice(rv);
        }
        None => {
            for c in 0..l.channels {
                let s = lane_sum(
                    l.runs(c)
                        .map(|off| chunked_sum(&x[off..off + inner], |v| v)),
                );
                let mu = s / n;
                let ss = lane_sum(
                    l.runs(c)
                        .map(|off| chunked_sum(&x[off..off + inner], |v| (v - mu) * (v - mu))),
                );
                mean[c] = mu;
                var[c] = ss / n;
            }
        }
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for c in 0..l.channels {
        let (mu, is, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
        for off in l.runs(c) {
            let r = off..off + inner;
            for ((h, o), &v) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&x[r]) {
                *h = (v - mu) * is;
                *o = g * *h + b;
            }
        }
    }
    (
        y,
        BatchNormSaved {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

/// Returns (dx, dgamma, dbeta).
pub fn batch_norm_backward<T: Real>(
    l: ChannelLayout,
    saved: &BatchNormSaved<T>,
    gamma: &[T],
    gy: &[T],
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = T::from_usize(l.count()).unwrap();
    let inner = l.inner;
    let mut dx = vec![T::zero(); gy.len()];
    let mut dgamma = vec![T::zero(); l.channels];
    let mut dbeta = vec![T::zero(); l.channels];
    for c in 0..l.channels {
        let sg = lane_sum(
            l.runs(c)
                .map(|off| chunked_sum(&gy[off..off + inner], |v| v)),
        );
        let sgx = lane_sum(
            l.runs(c)
                .map(|off| chunked_dot(&gy[off..off + inner], &saved.xhat[off..off + inner])),
        );
        dbeta[c] = sg;
        dgamma[c] = sgx;
        let k = gamma[c] * saved.inv_std[c];
        let (mg, mgx) = if batch_stats {
            (sg / n, sgx / n)
        } else {
            (T::zero(), T::zero())
        };
        for off in l.runs(c) {
            let r = off..off + inner;
            for ((d, &g), &h) in dx[r.clone()]
                .iter_mut()
                .zip(&gy[r.clone()])
                .zip(&saved.xhat[r])
            {
                *d = k * (g - mg - h * mgx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Per-axis bilinear sampling taps with half-pixel centers
/// (`src = (dst + 0.5)·in/out − 0.5`, clamped at 0).
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_forward<T: Real>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gy) = (T::lit(fy), T::lit(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gx) = (T::lit(fx), T::lit(1.0 - fx));
                dst[oy * ow + ox] = gy * (gx * src[y0 * w + x0] + fx * src[y0 * w + x1])
                    + fy * (gx * src[y1 * w + x0] + fx * src[y1 * w + x1]);
            }
        }
    }
    out
}

pub fn upsample_backward<T: Real>(
    gy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &gy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let (fy, gyw) = (T::lit(fy), T::lit(1.0 - fy));
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let (fx, gxw) = (T::lit(fx), T::lit(1.0 - fx));
                let g = src[oy * ow + ox];
                dst[y0 * w + x0] += gyw * gxw * g;
                dst[y0 * w + x1] += gyw * fx * g;
                dst[y1 * w + x0] += fy * gxw * g;
                dst[y1 * w + x1] += fy * fx * g;
            }
        }
    }
    dx
}

/// Patch grid geometry for region average pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeom {
    pub rows: usize,
    pub cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl PatchGeom {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

/// `[B, C, H, W]` → `[B, K, C]`, patch `k = r·cols + c`.
pub fn patch_pool_forward<T: Real>(x: &[T], shape: &[usize], g: PatchGeom) -> Vec<T> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let k = g.count();
    let area = T::from_usize(g.patch_h * g.patch_w).unwrap();
    let mut out = vec![T::zero(); b * k * c];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for r in 0..g.rows {
                for q in 0..g.cols {
                    let mut s = T::zero();
                    for y in r * g.patch_h..(r + 1) * g.patch_h {
                        let row = &plane[y * w + q * g.patch_w..y * w + (q + 1) * g.patch_w];
                        s += row.iter().copied().sum::<T>();
                    }
                    out[(bi * k + r * g.cols + q) * c + ci] = s / area;
                }
            }
        }
    }
    out
}

pub fn patch_pool_backward<T: Real>(gy: &[T], shape: &[usize], g: PatchGeom) -> Vec<T> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let k = g.count();
    let area = T::from_usize(g.patch_h * g.patch_w).unwrap();
    let mut dx = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &mut dx[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for r in 0..g.rows {
                for q in 0..g.cols {
                    let v = gy[(bi * k + r * g.cols + q) * c + ci] / area;
                    for y in r * g.patch_h..(r + 1) * g.patch_h {
                        plane[y * w + q * g.patch_w..y * w + (q + 1) * g.patch_w]
                            .iter_mut()
                            .for_each(|d| *d += v);
                    }
                }
            }
        }
    }
    dx
}
