//! Residual CNN encoder, MLP projector and linear segmentation head.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{NormStats, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{Grid, Real};
use crate::whitening::{whitening_layer_tape, BatchWhitening, WhiteningState};
use crate::Mode;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PROJECTOR_EPS: f64 = 1e-12;

/// Normalization applied after the last encoder stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalNorm {
    BatchNorm,
    ZcaWhitening,
}

impl FinalNorm {
    pub fn code(self) -> u64 {
        match self {
            FinalNorm::BatchNorm => 0,
            FinalNorm::ZcaWhitening => 1,
        }
    }

    pub fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(FinalNorm::BatchNorm),
            1 => Some(FinalNorm::ZcaWhitening),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub blocks_per_stage: usize,
    pub final_norm: FinalNorm,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stage_channels: vec![16, 32, 64, 128],
            stage_strides: vec![1, 2, 2, 2],
            blocks_per_stage: 1,
            final_norm: FinalNorm::BatchNorm,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("encoder_config", d));
        if self.stage_channels.len() != self.stage_strides.len() || self.stage_channels.len() < 2 {
            return bad(format!(
                "need matching stage_channels/stage_strides of length >= 2, got {} and {}",
                self.stage_channels.len(),
                self.stage_strides.len()
            ));
        }
        if self.in_channels == 0 || self.stage_channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.stage_strides.contains(&0) || self.blocks_per_stage == 0 {
            return bad("strides and blocks_per_stage must be positive".into());
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().unwrap()
    }

    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectorConfig {
    pub in_dim: usize,
    /// Hidden width; `None` gives a single affine layer.
    pub hidden: Option<usize>,
    pub out_dim: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            in_dim: 128,
            hidden: Some(128),
            out_dim: 64,
        }
    }
}

/// Ordered named parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    names: Vec<String>,
    values: Vec<Grid<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl<T: Real> Params<T> {
    pub fn push(&mut self, name: impl Into<String>, value: Grid<T>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Grid<T>> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &Grid<T> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Grid<T> {
        &mut self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Grid<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Grid<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Grid<T>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Grid::len).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            values: self.values.iter().map(Grid::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// How parameters enter a tape: as trainable parameters numbered from an
/// offset, or as constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bind {
    Train(usize),
    Frozen,
}

fn bind<T: Real>(tape: &mut Tape<T>, p: &Params<T>, name: &str, how: Bind) -> Var {
    let i = p
        .index_of(name)
        .unwrap_or_else(|| panic!("layout has no parameter {name}"));
    match how {
        Bind::Train(off) => tape.param(ParamId(off + i), &p.values[i]),
        Bind::Frozen => tape.constant(p.values[i].clone()),
    }
}

/// Running statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub enum NormState<T> {
    Batch { mean: Grid<T>, var: Grid<T> },
    Whitening(WhiteningState<T>),
}

impl<T: Real> NormState<T> {
    pub fn batch(c: usize) -> Self {
        NormState::Batch {
            mean: Grid::zeros(&[c]),
            var: Grid::ones(&[c]),
        }
    }

    /// Stored arrays as `(suffix, value)`.
    pub fn arrays(&self) -> Vec<(&'static str, &Grid<T>)> {
        match self {
            NormState::Batch { mean, var } => vec![("running_mean", mean), ("running_var", var)],
            NormState::Whitening(w) => {
                vec![("running_mu", &w.running_mu), ("running_W", &w.running_w)]
            }
        }
    }

    pub fn arrays_mut(&mut self) -> Vec<(&'static str, &mut Grid<T>)> {
        match self {
            NormState::Batch { mean, var } => vec![("running_mean", mean), ("running_var", var)],
            NormState::Whitening(w) => {
                vec![
                    ("running_mu", &mut w.running_mu),
                    ("running_W", &mut w.running_w),
                ]
            }
        }
    }

    pub fn cast<U: Real>(&self) -> NormState<U> {
        match self {
            NormState::Batch { mean, var } => NormState::Batch {
                mean: mean.cast(),
                var: var.cast(),
            },
            NormState::Whitening(w) => NormState::Whitening(WhiteningState {
                iterations: w.iterations,
                eps: w.eps,
                running_mu: w.running_mu.cast(),
                running_w: w.running_w.cast(),
                running_momentum: w.running_momentum,
            }),
        }
    }
}

/// Batch statistics observed by a train-mode forward, applied afterwards.
#[derive(Debug, Clone)]
pub enum NormUpdate<T> {
    Batch {
        layer: String,
        mean: Vec<T>,
        var: Vec<T>,
    },
    Whitening {
        layer: String,
        batch: BatchWhitening<T>,
    },
}

/// Named normalization-layer states in construction order.
#[derive(Debug, Clone, PartialEq)]
pub struct Norms<T> {
    layers: Vec<(String, NormState<T>)>,
}

impl<T: Real> Norms<T> {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &NormState<T>)> {
        self.layers.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut NormState<T>)> {
        self.layers.iter_mut().map(|(n, s)| (n.as_str(), s))
    }

    pub fn get(&self, layer: &str) -> Option<&NormState<T>> {
        self.layers.iter().find(|(n, _)| n == layer).map(|(_, s)| s)
    }

    pub fn get_mut(&mut self, layer: &str) -> Option<&mut NormState<T>> {
        self.layers
            .iter_mut()
            .find(|(n, _)| n == layer)
            .map(|(_, s)| s)
    }

    pub fn replace(&mut self, layer: &str, state: NormState<T>) -> Result<()> {
        let slot = self
            .get_mut(layer)
            .ok_or_else(|| Error::invalid("norms", format!("no normalization layer {layer}")))?;
        *slot = state;
        Ok(())
    }

    pub fn apply(&mut self, updates: &[NormUpdate<T>]) {
        let a = T::lit(BN_MOMENTUM);
        let keep = T::one() - a;
        for u in updates {
            match u {
                NormUpdate::Batch {
                    layer,
                    mean: bm,
                    var: bv,
                } => {
                    if let Some(NormState::Batch { mean, var }) = self.get_mut(layer) {
                        for (r, &b) in mean.data_mut().iter_mut().zip(bm) {
                            *r = keep * *r + a * b;
                        }
                        for (r, &b) in var.data_mut().iter_mut().zip(bv) {
                            *r = keep * *r + a * b;
                        }
                    }
                }
                NormUpdate::Whitening { layer, batch } => {
                    if let Some(NormState::Whitening(w)) = self.get_mut(layer) {
                        w.update(batch);
                    }
                }
            }
        }
    }

    pub fn cast<U: Real>(&self) -> Norms<U> {
        Norms {
            layers: self
                .layers
                .iter()
                .map(|(n, s)| (n.clone(), s.cast()))
                .collect(),
        }
    }
}

fn he_normal<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Grid<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Grid::from_fn(shape, |_| {
        T::lit(std * rng.sample::<f64, _>(StandardNormal))
    })
}

/// Encoder representations at the three levels used by the objectives.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// Output of stage 1, `[B, C1, H1, W1]`.
    pub stage1_fm: Var,
    /// Final feature map after the final normalization, `[B, Cd, Hd, Wd]`.
    pub final_fm: Var,
    /// Spatial mean of `final_fm`, `[B, Cd]`.
    pub pooled: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub params: Params<T>,
    pub norms: Norms<T>,
}

/// Name of the final normalization layer.
pub const FINAL_NORM: &str = "final_norm";

fn block_names(config: &EncoderConfig) -> Vec<(String, usize, usize, usize)> {
    let mut out = Vec::new();
    let mut cin = config.in_channels;
    for (s, (&c, &stride)) in config
        .stage_channels
        .iter()
        .zip(&config.stage_strides)
        .enumerate()
    {
        for b in 0..config.blocks_per_stage {
            let st = if b == 0 { stride } else { 1 };
            out.push((format!("stage{}/block{}", s + 1, b), cin, c, st));
            cin = c;
        }
    }
    out
}

impl<T: Real> Encoder<T> {
    /// He fan-in normal initialization for convolutions; unit scale and
    /// zero shift for every normalization layer.
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Params::default();
        let mut layers = Vec::new();
        let add_bn = |params: &mut Params<T>,
                      layers: &mut Vec<(String, NormState<T>)>,
                      name: String,
                      c: usize| {
            params.push(format!("{name}/gamma"), Grid::ones(&[c]));
            params.push(format!("{name}/beta"), Grid::zeros(&[c]));
            layers.push((name, NormState::batch(c)));
        };
        for (name, cin, cout, stride) in block_names(&config) {
            params.push(
                format!("{name}/conv1/weight"),
                he_normal(rng, &[cout, cin, 3, 3], cin * 9),
            );
            add_bn(&mut params, &mut layers, format!("{name}/bn1"), cout);
            params.push(
                format!("{name}/conv2/weight"),
                he_normal(rng, &[cout, cout, 3, 3], cout * 9),
            );
            add_bn(&mut params, &mut layers, format!("{name}/bn2"), cout);
            if cin != cout || stride != 1 {
                params.push(
                    format!("{name}/shortcut/weight"),
                    he_normal(rng, &[cout, cin, 1, 1], cin),
                );
                add_bn(
                    &mut params,
                    &mut layers,
                    format!("{name}/shortcut_bn"),
                    cout,
                );
            }
        }
        let d = config.out_channels();
        params.push(format!("{FINAL_NORM}/gamma"), Grid::ones(&[d]));
        params.push(format!("{FINAL_NORM}/beta"), Grid::zeros(&[d]));
        let state = match config.final_norm {
            FinalNorm::BatchNorm => NormState::batch(d),
            FinalNorm::ZcaWhitening => NormState::Whitening(WhiteningState::new(d)),
        };
        layers.push((FINAL_NORM.to_string(), state));
        Ok(Self {
            config,
            params,
            norms: Norms { layers },
        })
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            params: self.params.cast(),
            norms: self.norms.cast(),
        }
    }

    fn batch_norm(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        layer: &str,
        mode: Mode,
        how: Bind,
        updates: &mut Vec<NormUpdate<T>>,
    ) -> Result<Var> {
        let gamma = bind(tape, &self.params, &format!("{layer}/gamma"), how);
        let beta = bind(tape, &self.params, &format!("{layer}/beta"), how);
        let Some(NormState::Batch { mean, var }) = self.norms.get(layer) else {
            return Err(Error::invalid(
                "encoder_forward",
                format!("{layer} is not a batch-norm layer"),
            ));
        };
        let stats = match mode {
            Mode::Train => NormStats::Batch,
            Mode::Eval => NormStats::Running {
                mean: mean.data().to_vec(),
                var: var.data().to_vec(),
            },
        };
        let y = tape.batch_norm(x, gamma, beta, BN_EPS, stats)?;
        if mode == Mode::Train {
            let (m, v) = tape.batch_norm_stats(y).expect("batch-norm node");
            updates.push(NormUpdate::Batch {
                layer: layer.to_string(),
                mean: m.to_vec(),
                var: v.to_vec(),
            });
        }
        Ok(y)
    }

    /// Forward pass. Train mode normalizes with batch statistics and
    /// returns them; apply them with [`Norms::apply`] to update running state.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        images: Var,
        mode: Mode,
        how: Bind,
    ) -> Result<(EncoderOutput, Vec<NormUpdate<T>>)> {
        let &[b, c, h, w] = tape.shape(images) else {
            return Err(Error::shape(
                "encoder_forward",
                format!("expected [B, C, H, W], got {:?}", tape.shape(images)),
            ));
        };
        if c != self.config.in_channels {
            return Err(Error::shape(
                "encoder_forward",
                format!(
                    "{c} input channels, encoder expects {}",
                    self.config.in_channels
                ),
            ));
        }
        let s = self.config.total_stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::shape(
                "encoder_forward",
                format!("input {h}x{w} is not divisible by the total stride {s}"),
            ));
        }
        if mode == Mode::Train && self.config.final_norm == FinalNorm::ZcaWhitening && b < 2 {
            return Err(Error::degenerate(
                "encoder_forward",
                "whitening needs at least 2 images per batch in train mode",
            ));
        }
        let mut updates = Vec::new();
        let mut x = images;
        let mut stage1 = None;
        for (name, cin, cout, stride) in block_names(&self.config) {
            let w1 = bind(tape, &self.params, &format!("{name}/conv1/weight"), how);
            let hcv = tape.conv2d(x, w1, None, stride, 1)?;
            let hcv =
                self.batch_norm(tape, hcv, &format!("{name}/bn1"), mode, how, &mut updates)?;
            let hcv = tape.relu(hcv)?;
            let w2 = bind(tape, &self.params, &format!("{name}/conv2/weight"), how);
            let hcv = tape.conv2d(hcv, w2, None, 1, 1)?;
            let hcv =
                self.batch_norm(tape, hcv, &format!("{name}/bn2"), mode, how, &mut updates)?;
            let sc = if cin != cout || stride != 1 {
                let ws = bind(tape, &self.params, &format!("{name}/shortcut/weight"), how);
                let sc = tape.conv2d(x, ws, None, stride, 0)?;
                self.batch_norm(
                    tape,
                    sc,
                    &format!("{name}/shortcut_bn"),
                    mode,
                    how,
                    &mut updates,
                )?
            } else {
                x
            };
            let sum = tape.add(hcv, sc)?;
            x = tape.relu(sum)?;
            if name.starts_with("stage1/") {
                stage1 = Some(x);
            }
        }
        let final_fm = match self.config.final_norm {
            FinalNorm::BatchNorm => {
                self.batch_norm(tape, x, FINAL_NORM, mode, how, &mut updates)?
            }
            FinalNorm::ZcaWhitening => {
                let Some(NormState::Whitening(state)) = self.norms.get(FINAL_NORM) else {
                    return Err(Error::invalid(
                        "encoder_forward",
                        "final norm state is not a whitening layer",
                    ));
                };
                let (y, batch) = whitening_layer_tape(tape, x, state, mode)?;
                if let Some(batch) = batch {
                    updates.push(NormUpdate::Whitening {
                        layer: FINAL_NORM.to_string(),
                        batch,
                    });
                }
                let gamma = bind(tape, &self.params, &format!("{FINAL_NORM}/gamma"), how);
                let beta = bind(tape, &self.params, &format!("{FINAL_NORM}/beta"), how);
                tape.channel_affine(y, gamma, beta)?
            }
        };
        let pooled = tape.global_avg_pool(final_fm)?;
        Ok((
            EncoderOutput {
                stage1_fm: stage1.expect("stage 1 exists"),
                final_fm,
                pooled,
            },
            updates,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projector<T> {
    pub config: ProjectorConfig,
    pub params: Params<T>,
}

impl<T: Real> Projector<T> {
    pub fn new(config: ProjectorConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.in_dim == 0 || config.out_dim == 0 || config.hidden == Some(0) {
            return Err(Error::invalid(
                "projector_config",
                "dimensions must be positive",
            ));
        }
        let mut params = Params::default();
        match config.hidden {
            Some(h) => {
                params.push(
                    "fc1/weight",
                    he_normal(rng, &[h, config.in_dim], config.in_dim),
                );
                params.push("fc1/bias", Grid::zeros(&[h]));
                params.push("fc2/weight", he_normal(rng, &[config.out_dim, h], 2 * h));
                params.push("fc2/bias", Grid::zeros(&[config.out_dim]));
            }
            None => {
                params.push(
                    "fc1/weight",
                    he_normal(rng, &[config.out_dim, config.in_dim], 2 * config.in_dim),
                );
                params.push("fc1/bias", Grid::zeros(&[config.out_dim]));
            }
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> Projector<U> {
        Projector {
            config: self.config,
            params: self.params.cast(),
        }
    }

    /// `[B, in_dim]` → unit rows `[B, out_dim]`.
    pub fn forward(&self, tape: &mut Tape<T>, pooled: Var, how: Bind) -> Result<Var> {
        match tape.shape(pooled) {
            &[_, d] if d == self.config.in_dim => {}
            s => {
                return Err(Error::shape(
                    "projector_forward",
                    format!("input {s:?}, projector expects [B, {}]", self.config.in_dim),
                ))
            }
        }
        let affine = |tape: &mut Tape<T>, x: Var, layer: &str| -> Result<Var> {
            let w = bind(tape, &self.params, &format!("{layer}/weight"), how);
            let b = bind(tape, &self.params, &format!("{layer}/bias"), how);
            let y = tape.matmul_t(x, false, w, true)?;
            tape.add_bias(y, b)
        };
        let mut z = affine(tape, pooled, "fc1")?;
        if self.config.hidden.is_some() {
            z = tape.relu(z)?;
            z = affine(tape, z, "fc2")?;
        }
        tape.l2_normalize(z, PROJECTOR_EPS)
    }
}

/// 1×1 linear classifier followed by bilinear upsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SegHead<T> {
    pub in_channels: usize,
    pub num_classes: usize,
    pub params: Params<T>,
}

impl<T: Real> SegHead<T> {
    pub fn new(in_channels: usize, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(
                "seg_head",
                format!("need at least 2 classes, got {num_classes}"),
            ));
        }
        let mut params = Params::default();
        params.push(
            "weight",
            he_normal(rng, &[num_classes, in_channels, 1, 1], 2 * in_channels),
        );
        params.push("bias", Grid::zeros(&[num_classes]));
        Ok(Self {
            in_channels,
            num_classes,
            params,
        })
    }

    /// `[B, Cd, Hd, Wd]` → logits `[B, num_classes, H, W]`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        fm: Var,
        out_hw: (usize, usize),
        how: Bind,
    ) -> Result<Var> {
        let w = bind(tape, &self.params, "weight", how);
        let b = bind(tape, &self.params, "bias", how);
        let logits = tape.conv2d(fm, w, Some(b), 1, 0)?;
        tape.upsample_bilinear(logits, out_hw.0, out_hw.1)
    }
}
