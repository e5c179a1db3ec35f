//! Synthetic anatomy phantoms: one shared template of elliptical organs,
//! per-sample smooth sinusoidal warps and texture noise, with exact masks.

use std::f64::consts::{PI, SQRT_2};
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DatasetError, Error, Result};
use crate::grid::Grid;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.bin";
pub const MASKS_FILE: &str = "masks.bin";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub image_size: usize,
    /// Background plus organs.
    pub num_classes: usize,
    pub num_samples: usize,
    pub template_seed: u64,
    pub sample_seed_base: u64,
    /// Peak displacement as a fraction of the image size.
    pub deform_amplitude: f64,
    /// Standard deviation of additive pixel noise.
    pub texture_noise: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 5,
            num_samples: 2048,
            template_seed: 0,
            sample_seed_base: 0,
            deform_amplitude: 0.15,
            texture_noise: 0.05,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("phantom_config", d));
        if self.num_classes < 2 || self.num_classes > 256 {
            return bad(format!(
                "num_classes must lie in 2..=256, got {}",
                self.num_classes
            ));
        }
        if self.image_size < 4 {
            return bad(format!(
                "image_size must be at least 4, got {}",
                self.image_size
            ));
        }
        if !(0.0..0.5).contains(&self.deform_amplitude) {
            return bad(format!(
                "deform_amplitude must lie in [0, 0.5), got {}",
                self.deform_amplitude
            ));
        }
        if !(self.texture_noise >= 0.0) {
            return bad(format!(
                "texture_noise must be non-negative, got {}",
                self.texture_noise
            ));
        }
        Ok(())
    }

    /// Intensity band `[lo, hi]` of a class in the noise-free template.
    pub fn band(&self, class: usize) -> (f64, f64) {
        if class == 0 {
            return (0.0, BACKGROUND_BODY);
        }
        let w = ORGAN_SPAN / (self.num_classes - 1) as f64;
        let lo = ORGAN_BASE + (class - 1) as f64 * w;
        (lo, lo + BAND_FILL * w)
    }
}

const BACKGROUND_BODY: f64 = 0.2;
const ORGAN_BASE: f64 = 0.3;
const ORGAN_SPAN: f64 = 0.7;
/// Fraction of each class slot used by its band, leaving gaps between bands.
const BAND_FILL: f64 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Grid<f32>,
    /// Row-major `H × W` class ids.
    pub mask: Vec<u8>,
    pub sample_id: usize,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized squared radius; `< 1` inside.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

/// Shared anatomy in unit coordinates `[0, 1]²`: a body outline and one
/// ellipse per organ, painted in class order.
#[derive(Debug, Clone)]
struct Template {
    body: Ellipse,
    organs: Vec<Ellipse>,
}

impl Template {
    fn new(cfg: &PhantomConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.template_seed);
        let body = Ellipse {
            cx: 0.5,
            cy: 0.5,
            a: 0.45,
            b: 0.4,
            cos: 1.0,
            sin: 0.0,
        };
        let k = cfg.num_classes - 1;
        let scale = (4.0 / k as f64).sqrt().min(1.0);
        let offset = rng.random_range(0.0..2.0 * PI);
        let organs = (0..k)
            .map(|i| {
                let t = offset + 2.0 * PI * i as f64 / k as f64 + rng.random_range(-0.2..0.2);
                let r = if k == 1 {
                    0.0
                } else {
                    rng.random_range(0.17..0.21)
                };
                let theta: f64 = rng.random_range(0.0..PI);
                Ellipse {
                    cx: 0.5 + r * t.cos(),
                    cy: 0.5 + r * t.sin() * 0.85,
                    a: scale * rng.random_range(0.17..0.21),
                    b: scale * rng.random_range(0.11..0.14),
                    cos: theta.cos(),
                    sin: theta.sin(),
                }
            })
            .collect();
        Self { body, organs }
    }

    /// Class and noise-free intensity at a unit-coordinate point.
    fn eval(&self, cfg: &PhantomConfig, x: f64, y: f64) -> (u8, f64) {
        for (i, e) in self.organs.iter().enumerate().rev() {
            let rho = e.rho(x, y);
            if rho < 1.0 {
                let c = i + 1;
                let (lo, hi) = cfg.band(c);
                return (c as u8, hi - (hi - lo) * rho);
            }
        }
        let v = if self.body.rho(x, y) < 1.0 {
            BACKGROUND_BODY
        } else {
            0.0
        };
        (0, v)
    }
}

/// Smooth displacement field: a sum of 4 to 8 low-frequency sinusoids per
/// axis, normalized so the displacement length never exceeds `amplitude`.
#[derive(Debug, Clone)]
struct Warp {
    /// `(weight, fx, fy, phase)` per component, for each axis.
    comps: [Vec<(f64, f64, f64, f64)>; 2],
}

impl Warp {
    fn new(rng: &mut impl Rng, amplitude: f64) -> Self {
        let mut axis = || {
            let n = rng.random_range(4..=8);
            let raw: Vec<(f64, f64, f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.random_range(0.2..1.0),
                        rng.random_range(-0.75..0.75),
                        rng.random_range(-0.75..0.75),
                        rng.random_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            let total: f64 = raw.iter().map(|c| c.0).sum();
            raw.into_iter()
                .map(|(w, fx, fy, p)| (amplitude * w / (total * SQRT_2), fx, fy, p))
                .collect()
        };
        let ax = axis();
        let ay = axis();
        Self { comps: [ax, ay] }
    }

    fn at(&self, x: f64, y: f64) -> (f64, f64) {
        let f = |c: &[(f64, f64, f64, f64)]| {
            c.iter()
                .map(|&(w, fx, fy, p)| w * (2.0 * PI * (fx * x + fy * y) + p).sin())
                .sum::<f64>()
        };
        (f(&self.comps[0]), f(&self.comps[1]))
    }
}

/// Sample `index` of the dataset. The template and the sample's warp are
/// evaluated analytically at each warped pixel centre, so the image and mask
/// share boundaries exactly.
pub fn generate_phantom(cfg: &PhantomConfig, index: usize) -> Result<PhantomSample> {
    cfg.validate()?;
    if index >= cfg.num_samples {
        return Err(DatasetError::IndexOutOfRange {
            index,
            count: cfg.num_samples,
        }
        .into());
    }
    Ok(Generator::new(cfg).sample(index))
}

/// Template built once, reused for many samples.
struct Generator {
    cfg: PhantomConfig,
    template: Template,
}

impl Generator {
    fn new(cfg: &PhantomConfig) -> Self {
        Self {
            cfg: *cfg,
            template: Template::new(cfg),
        }
    }

    fn sample(&self, index: usize) -> PhantomSample {
        let cfg = &self.cfg;
        let n = cfg.image_size;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed_base.wrapping_add(index as u64));
        let warp = Warp::new(&mut rng, cfg.deform_amplitude);
        let mut image = Vec::with_capacity(n * n);
        let mut mask = Vec::with_capacity(n * n);
        for py in 0..n {
            for px in 0..n {
                let x = (px as f64 + 0.5) / n as f64;
                let y = (py as f64 + 0.5) / n as f64;
                let (dx, dy) = warp.at(x, y);
                let (c, v) = self.template.eval(cfg, x + dx, y + dy);
                mask.push(c);
                image.push(v);
            }
        }
        if cfg.texture_noise > 0.0 {
            for v in image.iter_mut() {
                *v += cfg.texture_noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let image = image
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0) as f32)
            .collect();
        PhantomSample {
            image: Grid::new(vec![1, n, n], image).expect("phantom shape"),
            mask,
            sample_id: index,
        }
    }
}

/// Every sample of the configured dataset.
pub fn generate_all(cfg: &PhantomConfig) -> Result<Vec<PhantomSample>> {
    cfg.validate()?;
    let g = Generator::new(cfg);
    Ok((0..cfg.num_samples).map(|i| g.sample(i)).collect())
}

/// Offset between the sample seed ranges of the standard splits.
pub const SPLIT_SEED_STRIDE: u64 = 1_000_000_000;

/// The pretraining set `base` plus downstream train and validation sets of
/// the given sizes. All three share the template and draw samples from
/// disjoint seed ranges.
pub fn standard_splits(
    base: &PhantomConfig,
    downstream_train: usize,
    downstream_val: usize,
) -> [(&'static str, PhantomConfig); 3] {
    let off = |k: u64| base.sample_seed_base.wrapping_add(k * SPLIT_SEED_STRIDE);
    [
        ("pretrain", *base),
        (
            "train",
            PhantomConfig {
                num_samples: downstream_train,
                sample_seed_base: off(1),
                ..*base
            },
        ),
        (
            "val",
            PhantomConfig {
                num_samples: downstream_val,
                sample_seed_base: off(2),
                ..*base
            },
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub count: usize,
    pub config: PhantomConfig,
}

/// Stacked images `[N, 1, H, W]` and masks `N × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Grid<f32>,
    pub masks: Vec<u8>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_samples(samples: &[PhantomSample]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::invalid("batch", "no samples"));
        };
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(first.image.shape());
        let mut images = Vec::with_capacity(samples.len() * first.image.len());
        let mut masks = Vec::with_capacity(samples.len() * first.mask.len());
        for s in samples {
            images.extend_from_slice(s.image.data());
            masks.extend_from_slice(&s.mask);
        }
        Ok(Self {
            images: Grid::new(shape, images)?,
            masks,
        })
    }
}

/// Write `manifest.json`, `images.bin` and `masks.bin` into `dir`.
pub fn write_dataset(cfg: &PhantomConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = Generator::new(cfg);
    let open = |name: &str| {
        let p = dir.join(name);
        File::create(&p)
            .map(BufWriter::new)
            .map_err(|e| Error::io(&p, e))
    };
    let mut images = open(IMAGES_FILE)?;
    let mut masks = open(MASKS_FILE)?;
    for i in 0..cfg.num_samples {
        let s = g.sample(i);
        let bytes: Vec<u8> = s
            .image
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        images
            .write_all(&bytes)
            .map_err(|e| Error::io(dir.join(IMAGES_FILE), e))?;
        masks
            .write_all(&s.mask)
            .map_err(|e| Error::io(dir.join(MASKS_FILE), e))?;
    }
    images
        .flush()
        .map_err(|e| Error::io(dir.join(IMAGES_FILE), e))?;
    masks
        .flush()
        .map_err(|e| Error::io(dir.join(MASKS_FILE), e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        count: cfg.num_samples,
        config: *cfg,
    };
    let p = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialize");
    std::fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| DatasetError::Manifest(format!("{}: {e}", p.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(DatasetError::Version {
            expected: FORMAT_VERSION,
            found: m.format_version,
        }
        .into());
    }
    if m.count != m.config.num_samples {
        return Err(DatasetError::Manifest(format!(
            "count {} disagrees with num_samples {}",
            m.count, m.config.num_samples
        ))
        .into());
    }
    m.config
        .validate()
        .map_err(|e| DatasetError::Manifest(e.to_string()))?;
    Ok(m)
}

fn check_size(path: &Path, expected: u64) -> Result<File> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = f.metadata().map_err(|e| Error::io(path, e))?.len();
    if len != expected {
        return Err(DatasetError::Size(path.display().to_string()).into());
    }
    Ok(f)
}

/// Samples `indices`, in that order, from a dataset directory.
pub fn load_batch(dir: &Path, indices: &[usize]) -> Result<Batch> {
    let m = read_manifest(dir)?;
    let n = m.config.image_size;
    let px = n * n;
    let ip = dir.join(IMAGES_FILE);
    let mp = dir.join(MASKS_FILE);
    let mut images = check_size(&ip, (m.count * px * 4) as u64)?;
    let mut masks = check_size(&mp, (m.count * px) as u64)?;
    let mut out_i = Vec::with_capacity(indices.len() * px);
    let mut out_m = vec![0u8; indices.len() * px];
    let mut buf = vec![0u8; px * 4];
    for (k, &i) in indices.iter().enumerate() {
        if i >= m.count {
            return Err(DatasetError::IndexOutOfRange {
                index: i,
                count: m.count,
            }
            .into());
        }
        images
            .seek(SeekFrom::Start((i * px * 4) as u64))
            .and_then(|_| images.read_exact(&mut buf))
            .map_err(|e| Error::io(&ip, e))?;
        out_i.extend(
            buf.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
        );
        masks
            .seek(SeekFrom::Start((i * px) as u64))
            .and_then(|_| masks.read_exact(&mut out_m[k * px..(k + 1) * px]))
            .map_err(|e| Error::io(&mp, e))?;
    }
    Ok(Batch {
        images: Grid::new(vec![indices.len(), 1, n, n], out_i)?,
        masks: out_m,
    })
}

/// Every sample of a dataset directory.
pub fn load_all(dir: &Path) -> Result<Batch> {
    let m = read_manifest(dir)?;
    load_batch(dir, &(0..m.count).collect::<Vec<_>>())
}

/// Labelled subset of `round(fraction · n)` indices, sorted. Fraction 1
/// returns every index.
pub fn split_labels(n: usize, fraction: f64, combination_seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(
            "split_labels",
            format!("fraction must lie in (0, 1], got {fraction}"),
        ));
    }
    let k = (fraction * n as f64).round() as usize;
    if k == 0 {
        return Err(Error::invalid(
            "split_labels",
            format!("fraction {fraction} of {n} samples selects none"),
        ));
    }
    if k == n {
        return Ok((0..n).collect());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(combination_seed));
    let mut pick = idx[..k].to_vec();
    pick.sort_unstable();
    Ok(pick)
}
