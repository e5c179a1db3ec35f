//! Two-view augmentation for contrastive pretraining.

use rand::Rng;

use crate::autodiff::bilinear_taps;
use crate::error::{Error, Result};
use crate::grid::{Grid, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Area fraction range of the random resized crop.
    pub crop_scale: (f64, f64),
    /// Aspect ratio range of the crop.
    pub crop_ratio: (f64, f64),
    pub flip_prob: f64,
    /// Brightness and contrast factors are drawn from `[1 - j, 1 + j]`.
    pub jitter: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter: 0.4,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: &str| Err(Error::invalid("augment_config", d));
        let (s0, s1) = self.crop_scale;
        if !(0.0 < s0 && s0 <= s1 && s1 <= 1.0) {
            return bad("crop scale must satisfy 0 < min <= max <= 1");
        }
        let (r0, r1) = self.crop_ratio;
        if !(0.0 < r0 && r0 <= r1) {
            return bad("crop ratio range must be positive and ordered");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(0.0..=1.0).contains(&self.blur_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad("jitter must lie in [0, 1)");
        }
        let (b0, b1) = self.blur_sigma;
        if !(0.0 < b0 && b0 <= b1) {
            return bad("blur sigma range must be positive and ordered");
        }
        Ok(())
    }
}

/// Crop window `(top, left, height, width)` in pixels.
type Window = (usize, usize, usize, usize);

fn random_crop(rng: &mut impl Rng, h: usize, w: usize, cfg: &AugmentConfig) -> Window {
    let area = (h * w) as f64;
    let (lr0, lr1) = (cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(cfg.crop_scale.0..=cfg.crop_scale.1);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    (0, 0, h, w)
}

/// Bilinear resample of a window back to the full `h × w` frame.
fn resize_window(img: &[f64], c: usize, h: usize, w: usize, win: Window) -> Vec<f64> {
    let (top, left, ch, cw) = win;
    let ty = bilinear_taps(ch, h);
    let tx = bilinear_taps(cw, w);
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        let at = |y: usize, x: usize| plane[(top + y) * w + left + x];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let a = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let b = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(ci * h + oy) * w + ox] = a * (1.0 - fy) + b * fy;
            }
        }
    }
    out
}

fn flip(img: &mut [f64], w: usize) {
    for row in img.chunks_mut(w) {
        row.reverse();
    }
}

/// Separable Gaussian blur with radius `ceil(3σ)` and replicated borders.
fn blur(img: &mut [f64], c: usize, h: usize, w: usize, sigma: f64) {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let mut tmp = vec![0.0; h * w];
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * plane[y * w + xx];
                }
                tmp[y * w + x] = acc;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let yy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[yy * w + x];
                }
                plane[y * w + x] = acc;
            }
        }
    }
}

/// Brightness then contrast around the post-brightness mean.
fn jitter(img: &mut [f64], rng: &mut impl Rng, amount: f64) {
    if amount == 0.0 {
        return;
    }
    let b = rng.random_range(1.0 - amount..=1.0 + amount);
    let c = rng.random_range(1.0 - amount..=1.0 + amount);
    img.iter_mut().for_each(|v| *v *= b);
    let mean = img.iter().sum::<f64>() / img.len() as f64;
    img.iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
}

/// One augmented view of a `[C, H, W]` image. Geometric steps are skipped in
/// local mode so both views stay pixel aligned.
pub fn augment_view<T: Real>(
    image: &Grid<T>,
    rng: &mut impl Rng,
    local_mode: bool,
    cfg: &AugmentConfig,
) -> Result<Grid<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(
            "augment",
            format!("expected [C, H, W], got {:?}", image.shape()),
        ));
    };
    let mut img: Vec<f64> = image.data().iter().map(|v| v.as_f64()).collect();
    if !local_mode {
        let win = random_crop(rng, h, w, cfg);
        img = resize_window(&img, c, h, w, win);
        if rng.random_bool(cfg.flip_prob) {
            flip(&mut img, w);
        }
    }
    jitter(&mut img, rng, cfg.jitter);
    if cfg.blur_prob > 0.0 && rng.random_bool(cfg.blur_prob) {
        let sigma = rng.random_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
        blur(&mut img, c, h, w, sigma);
    }
    Grid::new(
        vec![c, h, w],
        img.into_iter().map(|v| T::lit(v.clamp(0.0, 1.0))).collect(),
    )
}

/// Query and key views of one image, drawn in that order from `rng`.
pub fn augment_pair<T: Real>(
    image: &Grid<T>,
    rng: &mut impl Rng,
    local_mode: bool,
    cfg: &AugmentConfig,
) -> Result<(Grid<T>, Grid<T>)> {
    let q = augment_view(image, rng, local_mode, cfg)?;
    let k = augment_view(image, rng, local_mode, cfg)?;
    Ok((q, k))
}
