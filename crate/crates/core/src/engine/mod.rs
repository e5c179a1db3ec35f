//! Momentum-contrast pretraining: online and momentum encoders, key queue,
//! SGD with momentum, metrics stream and checkpoints.

mod augment;
mod queue;
mod state_io;

use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, ParamId, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{Grid, Real};
use crate::losses::{global_loss_tape, local_loss_tape, Contrast};
use crate::nets::{
    Bind, Encoder, EncoderConfig, FinalNorm, NormState, NormUpdate, Params, Projector,
    ProjectorConfig,
};
use crate::whitening::DEFAULT_ITERATIONS;
use crate::Mode;

pub use augment::{augment_pair, augment_view, AugmentConfig};
pub use queue::{Queue, KEY_NORM_TOL};
pub use state_io::{architecture_of, load_encoder, load_projector, whitening_to_bn_convert};

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_global: f64,
    pub loss_local: f64,
    pub loss_total: f64,
    pub queue_fill: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub queue_size: usize,
    /// EMA coefficient of the momentum encoder.
    pub momentum: f64,
    pub tau: f64,
    pub lambda: f64,
    /// Patches per image for the local loss.
    pub patches: usize,
    pub epochs: usize,
    /// Peak learning rate, decayed by a half cosine over the run.
    pub lr: f64,
    pub weight_decay: f64,
    pub sgd_momentum: f64,
    pub enable_local: bool,
    pub enable_whitening: bool,
    pub denominator_includes_positive: bool,
    pub whitening_iterations: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            queue_size: 1024,
            momentum: 0.999,
            tau: 0.2,
            lambda: 1.0,
            patches: 20,
            epochs: 20,
            lr: 0.03,
            weight_decay: 1e-4,
            sgd_momentum: 0.9,
            enable_local: true,
            enable_whitening: true,
            denominator_includes_positive: true,
            whitening_iterations: DEFAULT_ITERATIONS,
            seed: 0,
            checkpoint_every: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("train_config", d));
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if self.queue_size == 0 || !self.queue_size.is_multiple_of(self.batch_size) {
            return bad(format!(
                "queue_size {} must be a positive multiple of batch_size {}",
                self.queue_size, self.batch_size
            ));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.enable_local && self.patches < 2 {
            return bad(format!(
                "the local loss needs at least 2 patches, got {}",
                self.patches
            ));
        }
        if !(self.lr >= 0.0)
            || !(self.weight_decay >= 0.0)
            || !(0.0..1.0).contains(&self.sgd_momentum)
        {
            return bad(
                "lr and weight_decay must be non-negative and sgd_momentum in [0, 1)".into(),
            );
        }
        self.augment.validate()
    }

    pub fn contrast(&self) -> Contrast {
        Contrast {
            tau: self.tau,
            include_positive: self.denominator_includes_positive,
        }
    }

    /// Cosine-decayed learning rate for 0-based step `step` of `total`.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if total == 0 {
            return self.lr;
        }
        let t = (step.min(total) as f64) / total as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Network shapes shared by the online and momentum branches.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub whitening_iterations: usize,
}

impl Architecture {
    /// Default network with the final normalization chosen by the config.
    pub fn from_config(cfg: &TrainConfig) -> Self {
        let encoder = EncoderConfig {
            final_norm: if cfg.enable_whitening {
                FinalNorm::ZcaWhitening
            } else {
                FinalNorm::BatchNorm
            },
            ..Default::default()
        };
        Self {
            projector: ProjectorConfig {
                in_dim: encoder.out_channels(),
                ..Default::default()
            },
            encoder,
            whitening_iterations: cfg.whitening_iterations,
        }
    }

    pub fn build_encoder<T: Real>(&self, rng: &mut ChaCha8Rng) -> Result<Encoder<T>> {
        let mut e = Encoder::new(self.encoder.clone(), rng)?;
        for (_, st) in e.norms.iter_mut() {
            if let NormState::Whitening(w) = st {
                w.iterations = self.whitening_iterations;
            }
        }
        Ok(e)
    }
}

/// `θ_k ← m·θ_k + (1 − m)·θ_q` for every parameter.
pub fn ema_update<T: Real>(online: &Params<T>, target: &mut Params<T>, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::invalid(
            "ema_update",
            format!("momentum must lie in [0, 1), got {m}"),
        ));
    }
    if online.len() != target.len() {
        return Err(Error::shape(
            "ema_update",
            format!("{} vs {} parameters", online.len(), target.len()),
        ));
    }
    for i in 0..online.len() {
        if online.name(i) != target.name(i) || online.value(i).shape() != target.value(i).shape() {
            return Err(Error::shape(
                "ema_update",
                format!(
                    "{} {:?} vs {} {:?}",
                    online.name(i),
                    online.value(i).shape(),
                    target.name(i),
                    target.value(i).shape()
                ),
            ));
        }
    }
    let (mm, a) = (T::lit(m), T::lit(1.0 - m));
    for (k, q) in target.values_mut().iter_mut().zip(online.values()) {
        for (kv, &qv) in k.data_mut().iter_mut().zip(q.data()) {
            *kv = mm * *kv + a * qv;
        }
    }
    Ok(())
}

/// Outputs of the momentum branch for one batch of key views.
#[derive(Debug, Clone)]
pub struct KeyOutputs<T> {
    /// Unit-norm keys `[B, d_z]`.
    pub z: Grid<T>,
    /// Stage-1 feature map, kept only when the local loss needs it.
    pub stage1: Option<Grid<T>>,
    pub updates: Vec<NormUpdate<T>>,
}

/// Loss nodes of one query-branch forward pass.
#[derive(Debug, Clone)]
pub struct LossGraph<T> {
    pub global: Var,
    pub local: Option<Var>,
    pub total: Var,
    pub updates: Vec<NormUpdate<T>>,
}

#[derive(Debug, Clone)]
pub struct MocoState<T> {
    pub arch: Architecture,
    pub encoder: Encoder<T>,
    pub projector: Projector<T>,
    pub momentum_encoder: Encoder<T>,
    pub momentum_projector: Projector<T>,
    pub queue: Queue<T>,
    /// SGD momentum buffers, encoder parameters first, then projector.
    pub velocity: Vec<Grid<T>>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Metrics of the last completed step (not checkpointed).
    pub last_metrics: Option<StepMetrics>,
}

impl<T: Real> MocoState<T> {
    /// Fresh state; the momentum branch starts as a copy of the online one.
    pub fn new(cfg: &TrainConfig, arch: &Architecture) -> Result<Self> {
        cfg.validate()?;
        if arch.projector.in_dim != arch.encoder.out_channels() {
            return Err(Error::invalid(
                "moco_state",
                format!(
                    "projector input {} vs encoder output {}",
                    arch.projector.in_dim,
                    arch.encoder.out_channels()
                ),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let encoder: Encoder<T> = arch.build_encoder(&mut rng)?;
        let projector = Projector::new(arch.projector, &mut rng)?;
        let velocity = encoder
            .params
            .values()
            .iter()
            .chain(projector.params.values())
            .map(|g| Grid::zeros(g.shape()))
            .collect();
        Ok(Self {
            arch: arch.clone(),
            momentum_encoder: encoder.clone(),
            momentum_projector: projector.clone(),
            queue: Queue::new(cfg.queue_size, arch.projector.out_dim),
            encoder,
            projector,
            velocity,
            step: 0,
            rng,
            last_metrics: None,
        })
    }

    fn projector_offset(&self) -> usize {
        self.encoder.params.len()
    }

    /// Augmented query and key batches, images drawn in order.
    pub fn augment_batch(
        &mut self,
        batch: &Grid<T>,
        cfg: &TrainConfig,
    ) -> Result<(Grid<T>, Grid<T>)> {
        let &[b, c, h, w] = batch.shape() else {
            return Err(Error::shape(
                "train_step",
                format!("expected [B, C, H, W], got {:?}", batch.shape()),
            ));
        };
        let per = c * h * w;
        let (mut q, mut k) = (Vec::with_capacity(b * per), Vec::with_capacity(b * per));
        for img in batch.data().chunks(per) {
            let img = Grid::new(vec![c, h, w], img.to_vec())?;
            let (vq, vk) = augment_pair(&img, &mut self.rng, cfg.enable_local, &cfg.augment)?;
            q.extend_from_slice(vq.data());
            k.extend_from_slice(vk.data());
        }
        Ok((
            Grid::new(vec![b, c, h, w], q)?,
            Grid::new(vec![b, c, h, w], k)?,
        ))
    }

    /// Momentum-branch forward in train mode, without gradients.
    pub fn momentum_forward(&self, views: &Grid<T>, keep_stage1: bool) -> Result<KeyOutputs<T>> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(views.clone());
        let (out, updates) =
            self.momentum_encoder
                .forward(&mut tape, x, Mode::Train, Bind::Frozen)?;
        let z = self
            .momentum_projector
            .forward(&mut tape, out.pooled, Bind::Frozen)?;
        Ok(KeyOutputs {
            z: tape.value(z).clone(),
            stage1: keep_stage1.then(|| tape.value(out.stage1_fm).clone()),
            updates,
        })
    }

    /// Online-branch forward and losses. Encoder parameters are bound as
    /// `ParamId(0..)`, projector parameters right after them.
    pub fn query_losses(
        &self,
        tape: &mut Tape<T>,
        views: &Grid<T>,
        keys: &KeyOutputs<T>,
        cfg: &TrainConfig,
    ) -> Result<LossGraph<T>> {
        let x = tape.constant(views.clone());
        let (out, updates) = self.encoder.forward(tape, x, Mode::Train, Bind::Train(0))?;
        let z = self
            .projector
            .forward(tape, out.pooled, Bind::Train(self.projector_offset()))?;
        let queue = self.queue.filled();
        let global = global_loss_tape(tape, z, &keys.z, &queue, cfg.contrast())?;
        let (local, total) = if cfg.enable_local {
            let fm_k = keys.stage1.as_ref().ok_or_else(|| {
                Error::invalid("train_step", "local loss needs key stage-1 features")
            })?;
            let local = local_loss_tape(tape, out.stage1_fm, fm_k, cfg.patches, cfg.contrast())?;
            let weighted = tape.scale(local, cfg.lambda)?;
            (Some(local), tape.add(global, weighted)?)
        } else {
            (None, global)
        };
        Ok(LossGraph {
            global,
            local,
            total,
            updates,
        })
    }

    /// Online parameters in binding order.
    pub fn online_params(&self) -> Vec<Grid<T>> {
        self.encoder
            .params
            .values()
            .iter()
            .chain(self.projector.params.values())
            .cloned()
            .collect()
    }

    fn sgd_update(&mut self, grads: &GradientMap<T>, lr: f64, cfg: &TrainConfig) {
        let (lr, wd, mu) = (
            T::lit(lr),
            T::lit(cfg.weight_decay),
            T::lit(cfg.sgd_momentum),
        );
        let params = self
            .encoder
            .params
            .values_mut()
            .iter_mut()
            .chain(self.projector.params.values_mut().iter_mut());
        for (i, (p, v)) in params.zip(self.velocity.iter_mut()).enumerate() {
            let g = grads.get(&ParamId(i));
            for (j, (pv, vv)) in p.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
                let gj = g.map_or(T::zero(), |g| g.data()[j]);
                *vv = mu * *vv + gj + wd * *pv;
                *pv -= lr * *vv;
            }
        }
    }

    fn non_finite(&self) -> Error {
        Error::NonFiniteLoss {
            step: self.step,
            last_finite: self.last_metrics.clone().map(Box::new),
        }
    }

    /// One optimization step on a `[B, C, H, W]` batch. `total_steps` sets
    /// the learning-rate schedule.
    pub fn train_step(
        &mut self,
        batch: &Grid<T>,
        cfg: &TrainConfig,
        total_steps: u64,
    ) -> Result<StepMetrics> {
        if batch.rank() != 4 || batch.dim(0) != cfg.batch_size {
            return Err(Error::shape(
                "train_step",
                format!("batch {:?} vs batch_size {}", batch.shape(), cfg.batch_size),
            ));
        }
        let lr = cfg.lr_at(self.step, total_steps);
        let (vq, vk) = self.augment_batch(batch, cfg)?;
        let numeric = |e: Error, s: &Self| match e {
            Error::NonFinite { .. } | Error::Divergence { .. } => s.non_finite(),
            e => e,
        };
        let keys = self
            .momentum_forward(&vk, cfg.enable_local)
            .map_err(|e| numeric(e, self))?;
        let mut tape = Tape::new();
        let graph = self
            .query_losses(&mut tape, &vq, &keys, cfg)
            .map_err(|e| numeric(e, self))?;
        let loss_global = tape.value(graph.global).item().as_f64();
        let loss_local = graph.local.map_or(0.0, |l| tape.value(l).item().as_f64());
        let loss_total = tape.value(graph.total).item().as_f64();
        if ![loss_global, loss_local, loss_total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(self.non_finite());
        }
        let grads = tape
            .backward_scalar(graph.total)
            .map_err(|e| numeric(e, self))?;
        self.sgd_update(&grads, lr, cfg);
        self.encoder.norms.apply(&graph.updates);
        self.momentum_encoder.norms.apply(&keys.updates);
        ema_update(
            &self.encoder.params,
            &mut self.momentum_encoder.params,
            cfg.momentum,
        )?;
        ema_update(
            &self.projector.params,
            &mut self.momentum_projector.params,
            cfg.momentum,
        )?;
        self.queue.push(&keys.z)?;
        self.step += 1;
        let m = StepMetrics {
            step: self.step,
            loss_global,
            loss_local,
            loss_total,
            queue_fill: self.queue.fill,
            lr,
        };
        self.last_metrics = Some(m.clone());
        Ok(m)
    }

    /// Pooled (pre-projector) eval-mode features of the online encoder.
    pub fn pooled_features(&self, images: &Grid<T>, chunk: usize) -> Result<Grid<T>> {
        encoder_features(&self.encoder, None, images, chunk)
    }
}

/// Eval-mode pooled features `[N, d]`, or projector embeddings when a
/// projector is given, computed `chunk` images at a time.
pub fn encoder_features<T: Real>(
    encoder: &Encoder<T>,
    projector: Option<&Projector<T>>,
    images: &Grid<T>,
    chunk: usize,
) -> Result<Grid<T>> {
    let &[n, c, h, w] = images.shape() else {
        return Err(Error::shape(
            "features",
            format!("expected [N, C, H, W], got {:?}", images.shape()),
        ));
    };
    let per = c * h * w;
    let mut out = Vec::new();
    let mut dim = 0;
    for start in (0..n).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(n);
        let mut tape = Tape::no_grad();
        let x = tape.constant(Grid::new(
            vec![end - start, c, h, w],
            images.data()[start * per..end * per].to_vec(),
        )?);
        let (o, _) = encoder.forward(&mut tape, x, Mode::Eval, Bind::Frozen)?;
        let f = match projector {
            Some(p) => p.forward(&mut tape, o.pooled, Bind::Frozen)?,
            None => o.pooled,
        };
        dim = tape.shape(f)[1];
        out.extend_from_slice(tape.value(f).data());
    }
    Grid::new(vec![n, dim], out)
}

/// Gather rows `indices` of a `[N, ...]` grid.
pub fn gather<T: Real>(g: &Grid<T>, indices: &[usize]) -> Result<Grid<T>> {
    let n = g.dim(0);
    let per = g.len() / n.max(1);
    let mut data = Vec::with_capacity(indices.len() * per);
    for &i in indices {
        if i >= n {
            return Err(Error::invalid(
                "gather",
                format!("index {i} out of range for {n} rows"),
            ));
        }
        data.extend_from_slice(&g.data()[i * per..(i + 1) * per]);
    }
    let mut shape = g.shape().to_vec();
    shape[0] = indices.len();
    Grid::new(shape, data)
}

/// Sample order of one epoch; depends only on the seed and epoch index, so
/// resumed runs see the same batches.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step}.mmc1")
}

pub const METRICS_FILE: &str = "metrics.jsonl";

/// Files written by [`pretrain`].
#[derive(Debug, Clone, Default)]
pub struct PretrainOutput {
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
}

/// Train from `state.step` to the end of the configured epochs. Incomplete
/// final batches are dropped. With an output directory, metrics are appended
/// to `metrics.jsonl` and checkpoints written as `ckpt_<step>.mmc1`.
pub fn pretrain<T: Real>(
    state: &mut MocoState<T>,
    images: &Grid<T>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&StepMetrics),
) -> Result<PretrainOutput> {
    pretrain_with(state, images, cfg, out_dir, |m| {
        progress(m);
        ControlFlow::Continue(())
    })
}

/// [`pretrain`] that stops early when `progress` breaks. A checkpoint of the
/// step reached is then written so the run can be resumed.
pub fn pretrain_with<T: Real>(
    state: &mut MocoState<T>,
    images: &Grid<T>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&StepMetrics) -> ControlFlow<()>,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    let n = images.dim(0);
    let per_epoch = (n / cfg.batch_size) as u64;
    if per_epoch == 0 {
        return Err(Error::invalid(
            "pretrain",
            format!("{n} samples cannot fill one batch of {}", cfg.batch_size),
        ));
    }
    let total = per_epoch * cfg.epochs as u64;
    let mut out = PretrainOutput::default();
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(state.step > 0)
                .write(true)
                .truncate(state.step == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(file)))
        }
        None => None,
    };
    let mut order = Vec::new();
    let mut order_epoch = u64::MAX;
    while state.step < total {
        let epoch = state.step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(cfg.seed, epoch, n);
            order_epoch = epoch;
        }
        let pos = (state.step % per_epoch) as usize * cfg.batch_size;
        let batch = gather(images, &order[pos..pos + cfg.batch_size])?;
        let m = state.train_step(&batch, cfg, total)?;
        if let Some((path, w)) = log.as_mut() {
            let line = serde_json::to_string(&m).expect("metrics serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(&*path, e))?;
        }
        let stop = progress(&m).is_break();
        out.metrics.push(m);
        let last = state.step == total || stop;
        if let Some(dir) = out_dir {
            if last || (cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every))
            {
                if let Some((path, w)) = log.as_mut() {
                    w.flush().map_err(|e| Error::io(&*path, e))?;
                }
                let path = dir.join(checkpoint_name(state.step));
                state.save(&path)?;
                out.checkpoints.push(path);
            }
        }
        if stop {
            break;
        }
    }
    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(out)
}
