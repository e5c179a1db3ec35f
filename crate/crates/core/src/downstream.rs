//! Segmentation evaluation with a linear head on a frozen or fine-tuned
//! backbone, Dice scoring, and the pretraining ablation table.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, ParamId, Tape};
use crate::checkpoint::Container;
use crate::engine::{epoch_order, gather, load_encoder, whitening_to_bn_convert};
use crate::error::{Error, Result};
use crate::grid::{Grid, Real};
use crate::nets::{Bind, Encoder, EncoderConfig, FinalNorm, Params, SegHead};
use crate::phantom::{split_labels, Batch};
use crate::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Frozen,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub label_fraction: f64,
    pub combination_seed: u64,
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Replace a whitening final layer by batch norm before fine-tuning.
    pub convert_whitening: bool,
    /// Head initialization and batch order.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Frozen,
            label_fraction: 1.0,
            combination_seed: 0,
            iterations: 2000,
            lr: 0.05,
            batch_size: 16,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            convert_whitening: true,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("eval_config", d));
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return bad(format!(
                "label_fraction must lie in (0, 1], got {}",
                self.label_fraction
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr >= 0.0)
            || !(self.weight_decay >= 0.0)
            || !(0.0..1.0).contains(&self.sgd_momentum)
        {
            return bad(
                "lr and weight_decay must be non-negative and sgd_momentum in [0, 1)".into(),
            );
        }
        Ok(())
    }
}

/// `2·|pred = c ∧ gt = c| / (|pred = c| + |gt = c|)`, 1 when both are empty.
pub fn dice_score(pred: &[u8], gt: &[u8], class_id: u8) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "dice_score",
            format!("{} vs {} pixels", pred.len(), gt.len()),
        ));
    }
    if class_id == 0 {
        return Err(Error::invalid("dice_score", "class 0 is background"));
    }
    let (i, p, g) = counts(pred, gt, class_id);
    Ok(ratio(i, p, g))
}

fn counts(pred: &[u8], gt: &[u8], c: u8) -> (usize, usize, usize) {
    let mut out = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        out.0 += (p == c && g == c) as usize;
        out.1 += (p == c) as usize;
        out.2 += (g == c) as usize;
    }
    out
}

fn ratio(i: usize, p: usize, g: usize) -> f64 {
    if p + g == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + g) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceResult {
    /// Classes `1..num_classes`, pooled over every evaluation pixel.
    pub per_class: Vec<f64>,
    /// Classes neither predicted nor present anywhere; left out of `mean`.
    pub excluded: Vec<usize>,
    pub mean: f64,
    pub num_eval_images: usize,
}

/// Dice of concatenated predicted and ground-truth masks.
pub fn dice_result(
    pred: &[u8],
    gt: &[u8],
    num_classes: usize,
    num_images: usize,
) -> Result<DiceResult> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            "dice_result",
            format!("{} vs {} pixels", pred.len(), gt.len()),
        ));
    }
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    let mut kept = Vec::new();
    for c in 1..num_classes {
        let (i, p, g) = counts(pred, gt, c as u8);
        let d = ratio(i, p, g);
        per_class.push(d);
        if p + g == 0 {
            excluded.push(c);
        } else {
            kept.push(d);
        }
    }
    let mean = if kept.is_empty() {
        1.0
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    };
    Ok(DiceResult {
        per_class,
        excluded,
        mean,
        num_eval_images: num_images,
    })
}

/// Order-sensitive hash of parameter names and exact values.
pub fn params_hash<T: Real>(p: &Params<T>) -> u64 {
    let mut h = DefaultHasher::new();
    for (name, g) in p.iter() {
        name.hash(&mut h);
        g.shape().hash(&mut h);
        for v in g.data() {
            v.as_f64().to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Where the backbone comes from.
#[derive(Debug, Clone)]
pub enum Backbone<'a> {
    Checkpoint(&'a Container),
    /// Randomly initialized encoder (no pretraining).
    RandomInit {
        config: EncoderConfig,
        seed: u64,
    },
}

/// Per-channel affine map fitted on training features.
#[derive(Debug, Clone)]
struct Standardize<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Real> Standardize<T> {
    fn fit(fm: &Grid<T>) -> Self {
        let [n, c, h, w] = [fm.dim(0), fm.dim(1), fm.dim(2), fm.dim(3)];
        let hw = h * w;
        let count = (n * hw) as f64;
        let mut mean = Vec::with_capacity(c);
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let vals = || (0..n).flat_map(move |b| (0..hw).map(move |i| (b * c + ch) * hw + i));
            let m = vals().map(|i| fm.data()[i].as_f64()).sum::<f64>() / count;
            let v = vals()
                .map(|i| (fm.data()[i].as_f64() - m).powi(2))
                .sum::<f64>()
                / count;
            mean.push(T::lit(m));
            inv_std.push(T::lit(1.0 / (v + 1e-5).sqrt()));
        }
        Self { mean, inv_std }
    }

    fn apply(&self, fm: &mut Grid<T>) {
        let c = fm.dim(1);
        let hw = fm.dim(2) * fm.dim(3);
        for (k, plane) in fm.data_mut().chunks_mut(hw).enumerate() {
            let ch = k % c;
            plane
                .iter_mut()
                .for_each(|v| *v = (*v - self.mean[ch]) * self.inv_std[ch]);
        }
    }
}

/// Eval-mode final feature maps `[N, Cd, Hd, Wd]`.
fn final_features<T: Real>(
    encoder: &Encoder<T>,
    images: &Grid<T>,
    chunk: usize,
) -> Result<Grid<T>> {
    let n = images.dim(0);
    let per = images.len() / n.max(1);
    let mut out = Vec::new();
    let mut shape = Vec::new();
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let mut tape = Tape::no_grad();
        let mut s = images.shape().to_vec();
        s[0] = end - start;
        let x = tape.constant(Grid::new(
            s,
            images.data()[start * per..end * per].to_vec(),
        )?);
        let (o, _) = encoder.forward(&mut tape, x, Mode::Eval, Bind::Frozen)?;
        shape = tape.shape(o.final_fm).to_vec();
        out.extend_from_slice(tape.value(o.final_fm).data());
    }
    shape[0] = n;
    Grid::new(shape, out)
}

fn argmax_classes<T: Real>(logits: &Grid<T>) -> Vec<u8> {
    let [b, c, h, w] = [logits.dim(0), logits.dim(1), logits.dim(2), logits.dim(3)];
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for i in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(bi * c + k) * hw + i] > d[(bi * c + best) * hw + i] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

fn sgd_step<'a, T: Real>(
    params: impl Iterator<Item = &'a mut Grid<T>>,
    velocity: &mut [Grid<T>],
    grads: &GradientMap<T>,
    lr: f64,
    cfg: &EvalConfig,
) {
    let (lr, wd, mu) = (
        T::lit(lr),
        T::lit(cfg.weight_decay),
        T::lit(cfg.sgd_momentum),
    );
    for (i, (p, v)) in params.zip(velocity.iter_mut()).enumerate() {
        let Some(g) = grads.get(&ParamId(i)) else {
            continue;
        };
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mu * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
}

/// Result of one evaluation run.
#[derive(Debug, Clone)]
pub struct EvalOutcome<T> {
    pub dice: DiceResult,
    /// Training loss per iteration.
    pub losses: Vec<f64>,
    pub backbone_hash_before: u64,
    pub backbone_hash_after: u64,
    pub encoder: Encoder<T>,
    pub head: SegHead<T>,
}

/// What `results.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub dice: DiceResult,
    pub num_train_images: usize,
    pub final_loss: f64,
    pub backbone_hash_before: u64,
    pub backbone_hash_after: u64,
}

impl<T: Real> EvalOutcome<T> {
    pub fn report(&self, cfg: &EvalConfig, num_train_images: usize) -> EvalReport {
        EvalReport {
            config: cfg.clone(),
            dice: self.dice.clone(),
            num_train_images,
            final_loss: self.losses.last().copied().unwrap_or(f64::NAN),
            backbone_hash_before: self.backbone_hash_before,
            backbone_hash_after: self.backbone_hash_after,
        }
    }
}

pub fn write_results(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn build_backbone<T: Real>(cfg: &EvalConfig, backbone: &Backbone) -> Result<Encoder<T>> {
    match backbone {
        Backbone::Checkpoint(c) => {
            let whitened =
                crate::engine::architecture_of(c)?.encoder.final_norm == FinalNorm::ZcaWhitening;
            if cfg.mode == EvalMode::Finetune && cfg.convert_whitening && whitened {
                load_encoder(&whitening_to_bn_convert(c)?)
            } else {
                load_encoder(c)
            }
        }
        Backbone::RandomInit { config, seed } => {
            Encoder::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(*seed))
        }
    }
}

/// Batch indices of iteration `it` over a labelled subset, reshuffled each
/// pass.
fn batch_indices(labelled: &[usize], it: usize, batch: usize, seed: u64) -> Vec<usize> {
    let n = labelled.len();
    let b = batch.min(n);
    let per_pass = n / b;
    let pass = it / per_pass;
    let order = epoch_order(seed, pass as u64, n);
    let pos = (it % per_pass) * b;
    order[pos..pos + b].iter().map(|&k| labelled[k]).collect()
}

/// Train a linear head (and in fine-tune mode the backbone) with pixel-wise
/// cross-entropy on the labelled part of `train`, then score argmax
/// predictions on `val`. Frozen mode fits the head on eval-mode features
/// standardized with training-set channel statistics.
pub fn train_eval_segmentation<T: Real>(
    cfg: &EvalConfig,
    backbone: &Backbone,
    train: &Batch,
    val: &Batch,
    num_classes: usize,
) -> Result<EvalOutcome<T>> {
    cfg.validate()?;
    let mut encoder: Encoder<T> = build_backbone(cfg, backbone)?;
    let hash_before = params_hash(&encoder.params);
    let labelled = split_labels(train.len(), cfg.label_fraction, cfg.combination_seed)?;
    let train_images: Grid<T> = train.images.cast();
    let val_images: Grid<T> = val.images.cast();
    let (h, w) = (train.images.dim(2), train.images.dim(3));
    let hw = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = SegHead::new(encoder.config.out_channels(), num_classes, &mut rng)?;
    let mut losses = Vec::with_capacity(cfg.iterations);
    let targets_of = |idx: &[usize]| -> Vec<usize> {
        idx.iter()
            .flat_map(|&i| {
                train.masks[i * hw..(i + 1) * hw]
                    .iter()
                    .map(|&m| m as usize)
            })
            .collect()
    };
    let check = |loss: f64, it: usize| {
        if loss.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFiniteLoss {
                step: it as u64,
                last_finite: None,
            })
        }
    };
    let lr_at = |it: usize| {
        0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * it as f64 / cfg.iterations as f64).cos())
    };
    let chunk = 32;

    let pred = match cfg.mode {
        EvalMode::Frozen => {
            let mut train_fm = final_features(&encoder, &gather(&train_images, &labelled)?, chunk)?;
            let std = Standardize::fit(&train_fm);
            std.apply(&mut train_fm);
            let mut velocity: Vec<Grid<T>> = head
                .params
                .values()
                .iter()
                .map(|g| Grid::zeros(g.shape()))
                .collect();
            let positions: Vec<usize> = (0..labelled.len()).collect();
            for it in 0..cfg.iterations {
                let pick = batch_indices(&positions, it, cfg.batch_size, cfg.seed);
                let fm = gather(&train_fm, &pick)?;
                let rows: Vec<usize> = pick.iter().map(|&k| labelled[k]).collect();
                let mut tape = Tape::new();
                let x = tape.constant(fm);
                let logits = head.forward(&mut tape, x, (h, w), Bind::Train(0))?;
                let loss = tape.cross_entropy(logits, targets_of(&rows), true)?;
                let l = tape.value(loss).item().as_f64();
                check(l, it)?;
                losses.push(l);
                let grads = tape.backward_scalar(loss)?;
                sgd_step(
                    head.params.values_mut().iter_mut(),
                    &mut velocity,
                    &grads,
                    lr_at(it),
                    cfg,
                );
            }
            let mut val_fm = final_features(&encoder, &val_images, chunk)?;
            std.apply(&mut val_fm);
            let mut pred = Vec::with_capacity(val.len() * hw);
            for start in (0..val.len()).step_by(chunk) {
                let idx: Vec<usize> = (start..(start + chunk).min(val.len())).collect();
                let mut tape = Tape::no_grad();
                let x = tape.constant(gather(&val_fm, &idx)?);
                let logits = head.forward(&mut tape, x, (h, w), Bind::Frozen)?;
                pred.extend(argmax_classes(tape.value(logits)));
            }
            pred
        }
        EvalMode::Finetune => {
            let n_enc = encoder.params.len();
            let mut velocity: Vec<Grid<T>> = encoder
                .params
                .values()
                .iter()
                .chain(head.params.values())
                .map(|g| Grid::zeros(g.shape()))
                .collect();
            for it in 0..cfg.iterations {
                let rows = batch_indices(&labelled, it, cfg.batch_size, cfg.seed);
                let mut tape = Tape::new();
                let x = tape.constant(gather(&train_images, &rows)?);
                let (o, updates) = encoder.forward(&mut tape, x, Mode::Train, Bind::Train(0))?;
                let logits = head.forward(&mut tape, o.final_fm, (h, w), Bind::Train(n_enc))?;
                let loss = tape.cross_entropy(logits, targets_of(&rows), true)?;
                let l = tape.value(loss).item().as_f64();
                check(l, it)?;
                losses.push(l);
                let grads = tape.backward_scalar(loss)?;
                let params = encoder
                    .params
                    .values_mut()
                    .iter_mut()
                    .chain(head.params.values_mut().iter_mut());
                sgd_step(params, &mut velocity, &grads, lr_at(it), cfg);
                encoder.norms.apply(&updates);
            }
            let mut pred = Vec::with_capacity(val.len() * hw);
            for start in (0..val.len()).step_by(chunk) {
                let idx: Vec<usize> = (start..(start + chunk).min(val.len())).collect();
                let mut tape = Tape::no_grad();
                let x = tape.constant(gather(&val_images, &idx)?);
                let (o, _) = encoder.forward(&mut tape, x, Mode::Eval, Bind::Frozen)?;
                let logits = head.forward(&mut tape, o.final_fm, (h, w), Bind::Frozen)?;
                pred.extend(argmax_classes(tape.value(logits)));
            }
            pred
        }
    };
    Ok(EvalOutcome {
        dice: dice_result(&pred, &val.masks, num_classes, val.len())?,
        losses,
        backbone_hash_before: hash_before,
        backbone_hash_after: params_hash(&encoder.params),
        encoder,
        head,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const ABLATION_ROWS: [&str; 5] = ["No SSL", "baseline", "+local", "+decorr", "+both"];

/// `(enable_local, enable_whitening)` of the four pretrained rows.
pub const ABLATION_FLAGS: [(bool, bool); 4] =
    [(false, false), (true, false), (false, true), (true, true)];

/// Pretrained checkpoints of one seed, in `ABLATION_ROWS[1..]` order.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub seed: u64,
    pub checkpoints: [Option<Container>; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    /// Mean Dice per seed.
    pub frozen: Vec<f64>,
    pub finetune: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// `config,frozen,finetune` with seed-averaged mean Dice.
    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        writeln!(out, "config,frozen,finetune").expect("write to vec");
        for r in &self.rows {
            writeln!(
                out,
                "{},{:?},{:?}",
                r.name,
                mean_std(&r.frozen).0,
                mean_std(&r.finetune).0
            )
            .expect("write to vec");
        }
        String::from_utf8(out).expect("ascii")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Settings shared by every cell of the ablation table.
#[derive(Debug, Clone)]
pub struct AblationSpec {
    /// Architecture of the random-init row.
    pub no_ssl: EncoderConfig,
    pub frozen: EvalConfig,
    pub finetune: EvalConfig,
    pub num_classes: usize,
}

/// Frozen and fine-tune Dice of a random-init backbone and the four
/// pretrained configurations, for every seed. Each run's seed drives the
/// random initialization, head initialization and batch order.
pub fn ablation_matrix<T: Real>(
    runs: &[AblationRun],
    spec: &AblationSpec,
    train: &Batch,
    val: &Batch,
    mut progress: impl FnMut(&str, EvalMode, u64, f64),
) -> Result<AblationTable> {
    for run in runs {
        for (k, c) in run.checkpoints.iter().enumerate() {
            if c.is_none() {
                return Err(Error::MissingCheckpoint(format!(
                    "{} (seed {})",
                    ABLATION_ROWS[k + 1],
                    run.seed
                )));
            }
        }
    }
    let mut rows: Vec<AblationRow> = ABLATION_ROWS
        .iter()
        .map(|n| AblationRow {
            name: n.to_string(),
            frozen: Vec::new(),
            finetune: Vec::new(),
        })
        .collect();
    for run in runs {
        for (r, row) in rows.iter_mut().enumerate() {
            let backbone = match r {
                0 => Backbone::RandomInit {
                    config: spec.no_ssl.clone(),
                    seed: run.seed,
                },
                k => Backbone::Checkpoint(run.checkpoints[k - 1].as_ref().expect("checked")),
            };
            for base in [&spec.frozen, &spec.finetune] {
                let cfg = EvalConfig {
                    seed: run.seed,
                    combination_seed: run.seed,
                    ..base.clone()
                };
                let d =
                    train_eval_segmentation::<T>(&cfg, &backbone, train, val, spec.num_classes)?
                        .dice
                        .mean;
                progress(&row.name, cfg.mode, run.seed, d);
                match cfg.mode {
                    EvalMode::Frozen => row.frozen.push(d),
                    EvalMode::Finetune => row.finetune.push(d),
                }
            }
        }
    }
    Ok(AblationTable { rows })
}
