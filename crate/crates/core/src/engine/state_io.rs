//! Mapping between training state and the `MMC1` container, and the
//! whitening to batch-norm conversion used before fine-tuning.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Architecture, MocoState, TrainConfig};
use crate::checkpoint::{ArrayData, Container, NamedArray};
use crate::error::{CheckpointError, Error, Result};
use crate::grid::{Grid, Real};
use crate::linalg::symmetric_eigen;
use crate::nets::{
    Encoder, EncoderConfig, FinalNorm, Params, Projector, ProjectorConfig, BN_EPS, FINAL_NORM,
};

const ARCH: &str = "meta/arch";

fn malformed(detail: impl Into<String>) -> Error {
    CheckpointError::Malformed(detail.into()).into()
}

fn encode_arch(a: &Architecture) -> Vec<u64> {
    let e = &a.encoder;
    let mut v = vec![e.in_channels as u64, e.stage_channels.len() as u64];
    v.extend(e.stage_channels.iter().map(|&c| c as u64));
    v.extend(e.stage_strides.iter().map(|&s| s as u64));
    v.push(e.blocks_per_stage as u64);
    v.push(e.final_norm.code());
    v.push(a.whitening_iterations as u64);
    v.push(a.projector.in_dim as u64);
    v.push(a.projector.hidden.unwrap_or(0) as u64);
    v.push(a.projector.out_dim as u64);
    v
}

fn decode_arch(v: &[u64]) -> Result<Architecture> {
    let bad = || malformed(format!("{ARCH} has an unexpected layout: {v:?}"));
    let n = *v.get(1).ok_or_else(bad)? as usize;
    if v.len() != 2 + 2 * n + 6 {
        return Err(bad());
    }
    let u = |i: usize| v[i] as usize;
    let final_norm = FinalNorm::from_code(v[2 + 2 * n + 1]).ok_or_else(bad)?;
    let encoder = EncoderConfig {
        in_channels: u(0),
        stage_channels: (0..n).map(|i| u(2 + i)).collect(),
        stage_strides: (0..n).map(|i| u(2 + n + i)).collect(),
        blocks_per_stage: u(2 + 2 * n),
        final_norm,
    };
    encoder.validate().map_err(|_| bad())?;
    let hidden = u(2 + 2 * n + 4);
    Ok(Architecture {
        encoder,
        whitening_iterations: u(2 + 2 * n + 2),
        projector: ProjectorConfig {
            in_dim: u(2 + 2 * n + 3),
            hidden: (hidden > 0).then_some(hidden),
            out_dim: u(2 + 2 * n + 5),
        },
    })
}

/// Architecture recorded in a checkpoint.
pub fn architecture_of(c: &Container) -> Result<Architecture> {
    decode_arch(c.require(ARCH)?.as_u64()?)
}

fn push_params<T: Real>(c: &mut Container, prefix: &str, p: &Params<T>) {
    for (name, g) in p.iter() {
        c.push(NamedArray::from_grid(format!("{prefix}/{name}"), g));
    }
}

fn push_encoder<T: Real>(c: &mut Container, prefix: &str, e: &Encoder<T>) {
    push_params(c, prefix, &e.params);
    for (layer, st) in e.norms.iter() {
        for (suffix, g) in st.arrays() {
            c.push(NamedArray::from_grid(
                format!("{prefix}/{layer}/{suffix}"),
                g,
            ));
        }
    }
}

fn rng_words(rng: &ChaCha8Rng) -> Vec<u64> {
    let seed = rng.get_seed();
    let mut v: Vec<u64> = seed
        .chunks(8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    v.push(rng.get_stream());
    let pos = rng.get_word_pos();
    v.push(pos as u64);
    v.push((pos >> 64) as u64);
    v
}

fn rng_from_words(v: &[u64]) -> Result<ChaCha8Rng> {
    if v.len() != 7 {
        return Err(malformed(format!(
            "meta/rng has {} words, expected 7",
            v.len()
        )));
    }
    let mut seed = [0u8; 32];
    for (i, w) in v[..4].iter().enumerate() {
        seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(v[4]);
    rng.set_word_pos(v[5] as u128 | ((v[6] as u128) << 64));
    Ok(rng)
}

/// Copy `name` into `dst`, checking dtype and shape.
fn fill<T: Real>(c: &Container, name: &str, dst: &mut Grid<T>) -> Result<()> {
    let a = c.require(name)?;
    if a.shape != dst.shape() {
        return Err(CheckpointError::ShapeMismatch {
            name: name.to_string(),
            expected: dst.shape().to_vec(),
            found: a.shape.clone(),
        }
        .into());
    }
    *dst = a.to_grid()?;
    Ok(())
}

fn u64_scalar(c: &Container, name: &str) -> Result<u64> {
    match c.require(name)?.as_u64()? {
        [v] => Ok(*v),
        other => Err(malformed(format!(
            "{name} has {} values, expected 1",
            other.len()
        ))),
    }
}

/// Reject a checkpoint whose normalization layer is of the other kind,
/// naming the layer.
fn check_norm_kinds<T: Real>(c: &Container, prefix: &str, e: &Encoder<T>) -> Result<()> {
    for (layer, st) in e.norms.iter() {
        let base = format!("{prefix}/{layer}");
        let want = st.arrays();
        if want
            .iter()
            .all(|(s, _)| c.get(&format!("{base}/{s}")).is_some())
        {
            continue;
        }
        let other: Vec<&NamedArray> = c
            .arrays
            .iter()
            .filter(|a| a.name.starts_with(&format!("{base}/running_")))
            .collect();
        if let Some(found) = other.last() {
            return Err(CheckpointError::ShapeMismatch {
                name: base,
                expected: want
                    .last()
                    .map(|(_, g)| g.shape().to_vec())
                    .unwrap_or_default(),
                found: found.shape.clone(),
            }
            .into());
        }
    }
    Ok(())
}

fn fill_encoder<T: Real>(c: &Container, prefix: &str, e: &mut Encoder<T>) -> Result<Vec<String>> {
    check_norm_kinds(c, prefix, e)?;
    let mut used = Vec::new();
    let names: Vec<String> = e.params.iter().map(|(n, _)| n.to_string()).collect();
    for (i, n) in names.iter().enumerate() {
        let name = format!("{prefix}/{n}");
        fill(c, &name, e.params.value_mut(i))?;
        used.push(name);
    }
    for (layer, st) in e.norms.iter_mut() {
        for (suffix, g) in st.arrays_mut() {
            let name = format!("{prefix}/{layer}/{suffix}");
            fill(c, &name, g)?;
            used.push(name);
        }
    }
    Ok(used)
}

fn fill_params<T: Real>(c: &Container, prefix: &str, p: &mut Params<T>) -> Result<Vec<String>> {
    let mut used = Vec::new();
    let names: Vec<String> = p.iter().map(|(n, _)| n.to_string()).collect();
    for (i, n) in names.iter().enumerate() {
        let name = format!("{prefix}/{n}");
        fill(c, &name, p.value_mut(i))?;
        used.push(name);
    }
    Ok(used)
}

/// Encoder (online branch) from a checkpoint, using its recorded architecture.
pub fn load_encoder<T: Real>(c: &Container) -> Result<Encoder<T>> {
    let arch = architecture_of(c)?;
    let mut e = arch.build_encoder(&mut ChaCha8Rng::seed_from_u64(0))?;
    fill_encoder(c, "encoder", &mut e)?;
    Ok(e)
}

/// Online projector from a checkpoint.
pub fn load_projector<T: Real>(c: &Container) -> Result<Projector<T>> {
    let arch = architecture_of(c)?;
    let mut p = Projector::new(arch.projector, &mut ChaCha8Rng::seed_from_u64(0))?;
    fill_params(c, "projector", &mut p.params)?;
    Ok(p)
}

impl<T: Real> MocoState<T> {
    fn velocity_names(&self) -> Vec<String> {
        self.encoder
            .params
            .iter()
            .map(|(n, _)| format!("optim/velocity/encoder/{n}"))
            .chain(
                self.projector
                    .params
                    .iter()
                    .map(|(n, _)| format!("optim/velocity/projector/{n}")),
            )
            .collect()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        push_encoder(&mut c, "encoder", &self.encoder);
        push_params(&mut c, "projector", &self.projector.params);
        push_encoder(&mut c, "momentum/encoder", &self.momentum_encoder);
        push_params(
            &mut c,
            "momentum/projector",
            &self.momentum_projector.params,
        );
        for (name, v) in self.velocity_names().into_iter().zip(&self.velocity) {
            c.push(NamedArray::from_grid(name, v));
        }
        c.push(NamedArray::from_grid("queue/data", &self.queue.data));
        c.push(NamedArray::from_u64(
            "queue/cursor",
            vec![self.queue.cursor as u64],
        ));
        c.push(NamedArray::from_u64(
            "queue/fill",
            vec![self.queue.fill as u64],
        ));
        c.push(NamedArray::from_u64("meta/step", vec![self.step]));
        c.push(NamedArray::from_u64("meta/rng", rng_words(&self.rng)));
        c.push(NamedArray::from_u64(ARCH, encode_arch(&self.arch)));
        c
    }

    /// Rebuild a state laid out for `cfg` and `arch` from a container. Every
    /// array must be present with the expected shape and dtype, and nothing
    /// else may be present.
    pub fn from_container(c: &Container, cfg: &TrainConfig, arch: &Architecture) -> Result<Self> {
        let mut s = MocoState::new(cfg, arch)?;
        let mut used = fill_encoder(c, "encoder", &mut s.encoder)?;
        used.extend(fill_params(c, "projector", &mut s.projector.params)?);
        used.extend(fill_encoder(
            c,
            "momentum/encoder",
            &mut s.momentum_encoder,
        )?);
        used.extend(fill_params(
            c,
            "momentum/projector",
            &mut s.momentum_projector.params,
        )?);
        let vnames = s.velocity_names();
        for (name, v) in vnames.iter().zip(s.velocity.iter_mut()) {
            fill(c, name, v)?;
            used.push(name.clone());
        }
        fill(c, "queue/data", &mut s.queue.data)?;
        let cap = s.queue.capacity() as u64;
        let (cursor, fill_count) = (u64_scalar(c, "queue/cursor")?, u64_scalar(c, "queue/fill")?);
        if cursor >= cap || fill_count > cap {
            return Err(malformed(format!(
                "queue cursor {cursor} / fill {fill_count} exceed capacity {cap}"
            )));
        }
        s.queue.cursor = cursor as usize;
        s.queue.fill = fill_count as usize;
        s.step = u64_scalar(c, "meta/step")?;
        s.rng = rng_from_words(c.require("meta/rng")?.as_u64()?)?;
        let recorded = architecture_of(c)?;
        if recorded != *arch {
            return Err(CheckpointError::ShapeMismatch {
                name: ARCH.to_string(),
                expected: encode_arch(arch).iter().map(|&v| v as usize).collect(),
                found: encode_arch(&recorded).iter().map(|&v| v as usize).collect(),
            }
            .into());
        }
        used.extend(
            [
                "queue/data",
                "queue/cursor",
                "queue/fill",
                "meta/step",
                "meta/rng",
                ARCH,
            ]
            .map(String::from),
        );
        if let Some(extra) = c.arrays.iter().find(|a| !used.contains(&a.name)) {
            return Err(CheckpointError::UnexpectedArray(extra.name.clone()).into());
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path, cfg: &TrainConfig, arch: &Architecture) -> Result<Self> {
        Self::from_container(&Container::load(path)?, cfg, arch)
    }
}

/// Replace whitening final layers (online and momentum) with batch-norm
/// running statistics: mean = running_mu, var = diag(running_W⁻²) clamped to
/// at least the batch-norm eps. Everything else is copied unchanged.
pub fn whitening_to_bn_convert(c: &Container) -> Result<Container> {
    let conv = |d: String| Error::from(CheckpointError::Conversion(d));
    let mut arch = architecture_of(c)?;
    if arch.encoder.final_norm != FinalNorm::ZcaWhitening {
        return Err(conv("checkpoint has no whitening layer".into()));
    }
    arch.encoder.final_norm = FinalNorm::BatchNorm;
    let mut out = c.clone();
    for prefix in ["encoder", "momentum/encoder"] {
        let base = format!("{prefix}/{FINAL_NORM}");
        let (mu_name, w_name) = (format!("{base}/running_mu"), format!("{base}/running_W"));
        let Some(w) = c.get(&w_name) else {
            if prefix == "encoder" {
                return Err(CheckpointError::MissingArray(w_name).into());
            }
            continue;
        };
        let mu = c.require(&mu_name)?;
        let d = mu.shape.iter().product::<usize>();
        if w.shape != [d, d] {
            return Err(CheckpointError::ShapeMismatch {
                name: w_name,
                expected: vec![d, d],
                found: w.shape.clone(),
            }
            .into());
        }
        let wf: Vec<f64> = match &w.data {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
            ArrayData::U64(_) => return Err(conv(format!("{w_name} is not floating point"))),
        };
        let e = symmetric_eigen(&Grid::new(vec![d, d], wf)?)
            .map_err(|e| conv(format!("{w_name}: {e}")))?;
        let big = e.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let small = e.values.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
        if !(small > 1e-12 * big) {
            return Err(conv(format!(
                "{w_name} is singular (|eigenvalues| in [{small:e}, {big:e}])"
            )));
        }
        let v = e.vectors.data();
        let var: Vec<f64> = (0..d)
            .map(|i| {
                let s: f64 = (0..d)
                    .map(|k| v[i * d + k] * v[i * d + k] / (e.values[k] * e.values[k]))
                    .sum();
                s.max(BN_EPS)
            })
            .collect();
        let var_data = match &w.data {
            ArrayData::F32(_) => ArrayData::F32(var.iter().map(|&x| x as f32).collect()),
            _ => ArrayData::F64(var),
        };
        let mean = out.get_mut(&mu_name).expect("present");
        mean.name = format!("{base}/running_mean");
        let wslot = out.get_mut(&w_name).expect("present");
        *wslot = NamedArray {
            name: format!("{base}/running_var"),
            shape: vec![d],
            data: var_data,
        };
    }
    *out.get_mut(ARCH).expect("architecture present") =
        NamedArray::from_u64(ARCH, encode_arch(&arch));
    Ok(out)
}
