//! 2-D convolution kernels (NCHW).
//!
//! Stride-1 kernels run as one gemm per kernel tap over a zero-padded copy of
//! the image, reading shifted strided views. Strided kernels and inputs with
//! very few channels use im2col.
//!
//! Images are processed independently in parallel. Weight gradients are
//! accumulated per fixed-size chunk of images and the chunk partials are
//! summed in chunk order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{gemm, Real};

/// Images per weight-gradient partial sum.
const WGRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[batch, cin, h, w], &[cout, wcin, kh, kw]) = (input, weight) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW input and OIHW weight, got {input:?} and {weight:?}"),
            ));
        };
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        if cin != wcin {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {cin} vs weight channels {wcin}"),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.ho, self.wo]
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.cout * self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn is_shifted(&self) -> bool {
        self.stride == 1 && self.cin >= SHIFTED_MIN_CIN && !self.is_pointwise()
    }

    /// Padded rows and columns.
    fn padded(&self) -> (usize, usize) {
        (self.h + 2 * self.pad, self.w + 2 * self.pad)
    }

    fn channel_stride(&self) -> usize {
        let (hp, wp) = self.padded();
        hp * wp
    }

    /// Padded buffer length. Tap views of the last channel overhang the final
    /// plane by up to `kw - 1` junk columns.
    fn padded_len(&self) -> usize {
        self.cin * self.channel_stride() + self.kw
    }

    fn tap_offset(&self, ky: usize, kx: usize) -> usize {
        ky * self.padded().1 + kx
    }

    fn row_offset(&self, y: usize) -> usize {
        (y + self.pad) * self.padded().1 + self.pad
    }
}

/// Below this many input channels the per-tap gemms are too thin.
const SHIFTED_MIN_CIN: usize = 4;

/// Copy one image into the interior of a zeroed padded buffer.
fn pad_image<T: Real>(g: &ConvGeom, img: &[T], xp: &mut [T]) {
    let cs = g.channel_stride();
    for ci in 0..g.cin {
        for y in 0..g.h {
            let src = &img[(ci * g.h + y) * g.w..][..g.w];
            xp[ci * cs + g.row_offset(y)..][..g.w].copy_from_slice(src);
        }
    }
}

/// Crop an image gradient out of a padded buffer.
fn unpad_image<T: Real>(g: &ConvGeom, xp: &[T], img: &mut [T]) {
    let cs = g.channel_stride();
    for ci in 0..g.cin {
        for y in 0..g.h {
            img[(ci * g.h + y) * g.w..][..g.w]
                .copy_from_slice(&xp[ci * cs + g.row_offset(y)..][..g.w]);
        }
    }
}

/// Output on the padded-width grid: `ho` rows of `wp` columns, of which the
/// first `wo` are real.
fn wide_len(g: &ConvGeom) -> usize {
    g.ho * g.padded().1
}

/// `y_wide = Σ_taps W_tap · shift_tap(xp)`.
fn shifted_forward<T: Real>(g: &ConvGeom, xp: &[T], weight: &[T], y_wide: &mut [T]) {
    let cs = g.channel_stride();
    let n = wide_len(g);
    let taps = g.kh * g.kw;
    assert!(xp.len() >= g.padded_len() && y_wide.len() == g.cout * n);
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let t = ky * g.kw + kx;
            let beta = if t == 0 { T::zero() } else { T::one() };
            // SAFETY: the largest B offset is (cin-1)·hp·wp + (kh-1)·wp +
            // kw-1 + ho·wp - 1 < padded_len; A and C are in bounds by shape.
            unsafe {
                T::gemm_raw(
                    g.cout,
                    g.cin,
                    n,
                    T::one(),
                    weight.as_ptr().add(t),
                    (g.cin * taps) as isize,
                    taps as isize,
                    xp.as_ptr().add(g.tap_offset(ky, kx)),
                    cs as isize,
                    1,
                    beta,
                    y_wide.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
    }
}

/// Accumulate `dW_tap += gy_wide · shift_tap(xp)ᵀ` into `dw`.
fn shifted_weight_grad<T: Real>(g: &ConvGeom, xp: &[T], gy_wide: &[T], dw: &mut [T]) {
    let cs = g.channel_stride();
    let n = wide_len(g);
    let taps = g.kh * g.kw;
    assert!(xp.len() >= g.padded_len() && gy_wide.len() == g.cout * n);
    assert_eq!(dw.len(), g.cout * g.cin * taps);
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let t = ky * g.kw + kx;
            // SAFETY: as in `shifted_forward`; C rows and columns address
            // distinct weight entries.
            unsafe {
                T::gemm_raw(
                    g.cout,
                    n,
                    g.cin,
                    T::one(),
                    gy_wide.as_ptr(),
                    n as isize,
                    1,
                    xp.as_ptr().add(g.tap_offset(ky, kx)),
                    1,
                    cs as isize,
                    T::one(),
                    dw.as_mut_ptr().add(t),
                    (g.cin * taps) as isize,
                    taps as isize,
                );
            }
        }
    }
}

/// Accumulate `shift_tapᵀ(W_tapᵀ · gy_wide)` into the padded gradient `dxp`.
/// Junk columns of `gy_wide` must be zero.
fn shifted_input_grad<T: Real>(g: &ConvGeom, weight: &[T], gy_wide: &[T], dxp: &mut [T]) {
    let cs = g.channel_stride();
    let n = wide_len(g);
    let taps = g.kh * g.kw;
    assert!(dxp.len() >= g.padded_len() && gy_wide.len() == g.cout * n);
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let t = ky * g.kw + kx;
            // SAFETY: bounds as in `shifted_forward`. Within one call the C
            // view never aliases itself because ho·wp <= hp·wp.
            unsafe {
                T::gemm_raw(
                    g.cin,
                    g.cout,
                    n,
                    T::one(),
                    weight.as_ptr().add(t),
                    taps as isize,
                    (g.cin * taps) as isize,
                    gy_wide.as_ptr(),
                    n as isize,
                    1,
                    T::one(),
                    dxp.as_mut_ptr().add(g.tap_offset(ky, kx)),
                    cs as isize,
                    1,
                );
            }
        }
    }
}

/// Unfold one image into a `[cin·kh·kw, ho·wo]` column matrix.
fn im2col<T: Real>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let n = g.ho * g.wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into an image gradient.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let n = g.ho * g.wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (k, n) = (g.k(), g.ho * g.wo);
    let mut out = vec![T::zero(); g.batch * g.out_len()];
    let add_bias = |dst: &mut [T]| {
        if let Some(b) = bias {
            for (co, plane) in dst.chunks_mut(n).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    };
    if g.is_shifted() {
        let wp = g.padded().1;
        out.par_chunks_mut(g.out_len())
            .zip(input.par_chunks(g.in_len()))
            .for_each_init(
                || {
                    (
                        vec![T::zero(); g.padded_len()],
                        vec![T::zero(); g.cout * wide_len(g)],
                    )
                },
                |(xp, wide), (dst, img)| {
                    pad_image(g, img, xp);
                    shifted_forward(g, xp, weight, wide);
                    for (d, w) in dst.chunks_mut(g.wo).zip(wide.chunks(wp)) {
                        d.copy_from_slice(&w[..g.wo]);
                    }
                    add_bias(dst);
                },
            );
        return out;
    }
    out.par_chunks_mut(g.out_len())
        .zip(input.par_chunks(g.in_len()))
        .for_each_init(
            || {
                if g.is_pointwise() {
                    Vec::new()
                } else {
                    vec![T::zero(); k * n]
                }
            },
            |cols, (dst, img)| {
                let cols: &[T] = if g.is_pointwise() {
                    img
                } else {
                    im2col(g, img, cols);
                    cols
                };
                gemm(
                    g.cout,
                    k,
                    n,
                    T::one(),
                    weight,
                    false,
                    cols,
                    false,
                    T::zero(),
                    dst,
                );
                add_bias(dst);
            },
        );
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let (k, n) = (g.k(), g.ho * g.wo);
    let wlen = g.cout * k;
    let chunks = g.batch.div_ceil(WGRAD_CHUNK);
    let mut dinput = if need_input {
        vec![T::zero(); g.batch * g.in_len()]
    } else {
        Vec::new()
    };

    let work = |ci: usize, mut din: Option<&mut [T]>| -> Vec<T> {
        let start = ci * WGRAD_CHUNK;
        let end = (start + WGRAD_CHUNK).min(g.batch);
        let mut dw = if need_weight {
            vec![T::zero(); wlen]
        } else {
            Vec::new()
        };
        if g.is_shifted() {
            let wp = g.padded().1;
            let mut xp = vec![T::zero(); g.padded_len()];
            let mut dxp = vec![T::zero(); if need_input { g.padded_len() } else { 0 }];
            let mut gy_wide = vec![T::zero(); g.cout * wide_len(g)];
            for b in start..end {
                let gy = &grad_out[b * g.out_len()..(b + 1) * g.out_len()];
                for (w, r) in gy_wide.chunks_mut(wp).zip(gy.chunks(g.wo)) {
                    w[..g.wo].copy_from_slice(r);
                }
                if need_weight {
                    pad_image(g, &input[b * g.in_len()..(b + 1) * g.in_len()], &mut xp);
                    shifted_weight_grad(g, &xp, &gy_wide, &mut dw);
                }
                if let Some(din) = din.as_deref_mut() {
                    let local = b - start;
                    let dimg = &mut din[local * g.in_len()..(local + 1) * g.in_len()];
                    dxp.fill(T::zero());
                    shifted_input_grad(g, weight, &gy_wide, &mut dxp);
                    unpad_image(g, &dxp, dimg);
                }
            }
            return dw;
        }
        let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * n }];
        let mut dcols = vec![T::zero(); if need_input { k * n } else { 0 }];
        for b in start..end {
            let gy = &grad_out[b * g.out_len()..(b + 1) * g.out_len()];
            if need_weight {
                let img = &input[b * g.in_len()..(b + 1) * g.in_len()];
                let cols_ref: &[T] = if g.is_pointwise() {
                    img
                } else {
                    im2col(g, img, &mut cols);
                    &cols
                };
                gemm(
                    g.cout,
                    n,
                    k,
                    T::one(),
                    gy,
                    false,
                    cols_ref,
                    true,
                    T::one(),
                    &mut dw,
                );
            }
            if let Some(din) = din.as_deref_mut() {
                let local = b - start;
                let dimg = &mut din[local * g.in_len()..(local + 1) * g.in_len()];
                if g.is_pointwise() {
                    gemm(
                        k,
                        g.cout,
                        n,
                        T::one(),
                        weight,
                        true,
                        gy,
                        false,
                        T::zero(),
                        dimg,
                    );
                } else {
                    gemm(
                        k,
                        g.cout,
                        n,
                        T::one(),
                        weight,
                        true,
                        gy,
                        false,
                        T::zero(),
                        &mut dcols,
                    );
                    col2im(g, &dcols, dimg);
                }
            }
        }
        dw
    };
    let partials: Vec<Vec<T>> = if need_input {
        dinput
            .par_chunks_mut(WGRAD_CHUNK * g.in_len())
            .enumerate()
            .map(|(ci, d)| work(ci, Some(d)))
            .collect()
    } else {
        (0..chunks)
            .into_par_iter()
            .map(|ci| work(ci, None))
            .collect()
    };

    let weight_grad = need_weight.then(|| {
        let mut dw = vec![T::zero(); wlen];
        for p in &partials {
            dw.iter_mut().zip(p).for_each(|(a, &b)| *a += b);
        }
        dw
    });
    let bias_grad = need_bias.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for b in 0..g.batch {
            for (co, acc) in db.iter_mut().enumerate() {
                let off = b * g.out_len() + co * n;
                *acc += grad_out[off..off + n].iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads {
        input: need_input.then_some(dinput),
        weight: weight_grad,
        bias: bias_grad,
    }
}
