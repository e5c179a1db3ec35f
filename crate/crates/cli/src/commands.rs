//! One function per subcommand. Each reads inputs named by the resolved
//! config and writes its artifacts under the run directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use medmoco::checkpoint::Container;
use medmoco::diagnostics::{export_spectrum_csv, FeatureSource, SpectrumReport};
use medmoco::downstream::{
    ablation_matrix, train_eval_segmentation, write_results, AblationRun, AblationSpec, Backbone,
    EvalConfig, EvalMode, ABLATION_FLAGS, ABLATION_ROWS,
};
use medmoco::engine::{
    checkpoint_name, encoder_features, load_encoder, load_projector, pretrain as run_pretrain,
    Architecture, MocoState, StepMetrics, TrainConfig,
};
use medmoco::phantom::{load_all, read_manifest, write_dataset, Batch};
use medmoco::{Error, Grid, Result};

use crate::config::RunConfig;

pub const RESOLVED_FILE: &str = "config.resolved";
/// Pretraining steps and wall-clock seconds spent in a run directory,
/// summed over resumed invocations.
pub const TIMING_FILE: &str = "timing.json";
const FEATURE_CHUNK: usize = 32;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io(path))
}

/// Create the run directory and record the resolved config in it.
pub fn prepare_run_dir(out: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(out).map_err(io(out))?;
    write_text(&out.join(RESOLVED_FILE), &cfg.resolved_text())
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    for (split, p) in cfg.phantom_sets() {
        let dir = out.join(split);
        let m = write_dataset(&p, &dir)?;
        eprintln!("gen-data: {} samples -> {}", m.count, dir.display());
    }
    Ok(())
}

fn log_step(m: &StepMetrics) {
    if m.step.is_multiple_of(10) {
        eprintln!(
            "step {} loss {:.4} (global {:.4}, local {:.4}) queue {} lr {:.5}",
            m.step, m.loss_total, m.loss_global, m.loss_local, m.queue_fill, m.lr
        );
    }
}

/// Steps and seconds recorded in a run directory, zero when absent.
pub fn read_timing(dir: &Path) -> (u64, f64) {
    let Ok(text) = std::fs::read_to_string(dir.join(TIMING_FILE)) else {
        return (0, 0.0);
    };
    let v: serde_json::Value = serde_json::from_str(&text).unwrap_or_default();
    (
        v["steps"].as_u64().unwrap_or(0),
        v["seconds"].as_f64().unwrap_or(0.0),
    )
}

/// Pretrain into `out`, resuming from `resume` when given. Returns the final
/// checkpoint path.
fn pretrain_into(
    train: &TrainConfig,
    images: &Grid<f32>,
    out: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    let arch = Architecture::from_config(train);
    let mut state = match resume {
        Some(path) => MocoState::<f32>::load(path, train, &arch)?,
        None => MocoState::<f32>::new(train, &arch)?,
    };
    let (prev_steps, prev_seconds) = match state.step {
        0 => (0, 0.0),
        _ => read_timing(out),
    };
    let start = (state.step, Instant::now());
    let result = run_pretrain(&mut state, images, train, Some(out), log_step)?;
    let timing = json!({
        "steps": prev_steps + state.step - start.0,
        "seconds": prev_seconds + start.1.elapsed().as_secs_f64(),
    });
    write_text(&out.join(TIMING_FILE), &format!("{timing}\n"))?;
    match result.checkpoints.last() {
        Some(p) => Ok(p.clone()),
        // Resumed at or past the final step: nothing left to train.
        None => {
            let path = out.join(checkpoint_name(state.step));
            state.save(&path)?;
            Ok(path)
        }
    }
}

pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = load_all(&cfg.data_dir().join("pretrain"))?;
    let last = pretrain_into(&cfg.train(), &data.images, out, cfg.resume().as_deref())?;
    eprintln!("pretrain: final checkpoint {}", last.display());
    Ok(())
}

fn require_checkpoint(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.checkpoint()
        .ok_or_else(|| Error::MissingCheckpoint("diagnose (pass a checkpoint path)".into()))
}

pub fn diagnose(cfg: &RunConfig, out: &Path) -> Result<()> {
    let c = Container::load(&require_checkpoint(cfg)?)?;
    let images: Grid<f32> = load_all(&cfg.data_dir().join("val"))?.images;
    let encoder = load_encoder::<f32>(&c)?;
    let projector = match cfg.source() {
        FeatureSource::ProjectorEmbedding => Some(load_projector::<f32>(&c)?),
        FeatureSource::PooledBackbone => None,
    };
    let features: Grid<f64> =
        encoder_features(&encoder, projector.as_ref(), &images, FEATURE_CHUNK)?.cast();
    let report = SpectrumReport::from_features(&features, cfg.source(), cfg.collapse_ratio())?;
    export_spectrum_csv(&report, &out.join("spectrum.csv"))?;
    let json = serde_json::to_string_pretty(&report).expect("report serialize");
    write_text(&out.join("report.json"), &(json + "\n"))?;
    eprintln!(
        "diagnose: effective rank {:.3}, collapse index {} of {}",
        report.effective_rank, report.collapse_index, report.feature_dim
    );
    Ok(())
}

fn downstream_sets(cfg: &RunConfig) -> Result<(Batch, Batch, usize)> {
    let dir = cfg.data_dir();
    let num_classes = read_manifest(&dir.join("train"))?.config.num_classes;
    Ok((
        load_all(&dir.join("train"))?,
        load_all(&dir.join("val"))?,
        num_classes,
    ))
}

/// Random-init encoder with the default batch-norm architecture.
fn no_ssl_backbone(cfg: &RunConfig) -> Architecture {
    Architecture::from_config(&TrainConfig {
        enable_whitening: false,
        ..cfg.train()
    })
}

pub fn evaluate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train, val, num_classes) = downstream_sets(cfg)?;
    let eval = cfg.eval();
    let container = cfg.checkpoint().map(|p| Container::load(&p)).transpose()?;
    let backbone = match &container {
        Some(c) => Backbone::Checkpoint(c),
        None => Backbone::RandomInit {
            config: no_ssl_backbone(cfg).encoder,
            seed: eval.seed,
        },
    };
    let outcome = train_eval_segmentation::<f32>(&eval, &backbone, &train, &val, num_classes)?;
    let report = outcome.report(&eval, train.len());
    write_results(&report, &out.join("results.json"))?;
    eprintln!("evaluate: mean dice {:.4}", report.dice.mean);
    Ok(())
}

/// Directory name of one pretraining run in the ablation matrix.
pub fn ablation_run_dir(row: usize, seed: u64) -> String {
    let slug = ["baseline", "local", "decorr", "both"][row];
    format!("{slug}_seed{seed}")
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let pretrain_images = load_all(&cfg.data_dir().join("pretrain"))?.images;
    let (train, val, num_classes) = downstream_sets(cfg)?;
    let mut runs = Vec::new();
    for seed in cfg.ablation_seeds() {
        let mut checkpoints: [Option<Container>; 4] = Default::default();
        for (k, &(local, whitening)) in ABLATION_FLAGS.iter().enumerate() {
            let mut run_cfg = cfg.clone();
            run_cfg.set("seed", &seed.to_string()).expect("known key");
            run_cfg
                .set("enable_local", &local.to_string())
                .expect("known key");
            run_cfg
                .set("enable_whitening", &whitening.to_string())
                .expect("known key");
            let train_cfg = run_cfg.train();
            let dir = out.join(ablation_run_dir(k, seed));
            let per_epoch = (pretrain_images.dim(0) / train_cfg.batch_size) as u64;
            let final_path = dir.join(checkpoint_name(per_epoch * train_cfg.epochs as u64));
            let path = if final_path.exists() {
                eprintln!("ablate: reusing {}", final_path.display());
                final_path
            } else {
                eprintln!("ablate: pretraining {} (seed {seed})", ABLATION_ROWS[k + 1]);
                prepare_run_dir(&dir, &run_cfg)?;
                pretrain_into(&train_cfg, &pretrain_images, &dir, None)?
            };
            checkpoints[k] = Some(Container::load(&path)?);
        }
        runs.push(AblationRun { seed, checkpoints });
    }
    let base = cfg.eval();
    let spec = AblationSpec {
        no_ssl: no_ssl_backbone(cfg).encoder,
        frozen: EvalConfig {
            mode: EvalMode::Frozen,
            ..base.clone()
        },
        finetune: EvalConfig {
            mode: EvalMode::Finetune,
            iterations: cfg.finetune_iterations(),
            ..base
        },
        num_classes,
    };
    let table = ablation_matrix::<f32>(&runs, &spec, &train, &val, |row, mode, seed, dice| {
        eprintln!("ablate: {row} {mode:?} seed {seed}: dice {dice:.4}");
    })?;
    table.write_csv(&out.join("ablation.csv"))?;
    let json = serde_json::to_string_pretty(&table).expect("table serialize");
    write_text(&out.join("ablation.json"), &(json + "\n"))?;
    print!("{}", table.to_csv());
    Ok(())
}
