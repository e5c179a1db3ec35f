//! Acceptance criteria 1 to 8. Prints one PASS/FAIL line per criterion.
//!
//! FAIL lines do not fail the process unless `MEDMOCO_ACCEPTANCE_STRICT=1`.
//! Criterion 6 pretrains twelve full-size runs under a 60 minute budget. Runs
//! live in `MEDMOCO_ACCEPTANCE_RUNS` (default `target/medmoco-acceptance/collapse`,
//! the layout written by `medmoco ablate`) and finished runs are reused with
//! their recorded wall time. Unfinished runs resume where they stopped. With
//! `MEDMOCO_ACCEPTANCE_FULL=1` training continues past the budget so the
//! directional checks can still be evaluated. `MEDMOCO_ACCEPTANCE_ONLY=1,3,5`
//! runs a subset; the others print as SKIP.

use std::collections::VecDeque;
use std::ops::ControlFlow;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use medmoco::autodiff::{ParamId, Tape};
use medmoco::checkpoint::Container;
use medmoco::diagnostics::{
    effective_rank, representation_covariance, singular_spectrum, FeatureSource, SpectrumReport,
    DEFAULT_COLLAPSE_RATIO,
};
use medmoco::downstream::{
    train_eval_segmentation, Backbone, EvalConfig, EvalMode, ABLATION_FLAGS,
};
use medmoco::engine::{
    checkpoint_name, ema_update, encoder_features, load_encoder, pretrain, pretrain_with,
    whitening_to_bn_convert, Architecture, MocoState, Queue, TrainConfig, METRICS_FILE,
};
use medmoco::losses::{
    global_loss, info_nce, local_loss, sample_patch_grid, Contrast, SimilarityScores,
};
use medmoco::nets::{EncoderConfig, FinalNorm, Params, ProjectorConfig};
use medmoco::phantom::{generate_all, standard_splits, Batch, PhantomConfig};
use medmoco::whitening::{zca_exact, zca_newton, WhiteningState, DEFAULT_EPS};
use medmoco::{Grid, Mode};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn env_flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| v == "1")
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Grid<f64> {
    Grid::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Grid<f64> {
    let mut g = gaussian(rng, &[n, d]);
    for row in g.data_mut().chunks_mut(d.max(1)) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    g
}

fn to_na(g: &Grid<f64>) -> DMatrix<f64> {
    let (r, c) = (g.dim(0), g.dim(1));
    DMatrix::from_row_slice(r, c, g.data())
}

fn from_na(m: &DMatrix<f64>) -> Grid<f64> {
    let (r, c) = m.shape();
    Grid::from_fn(&[r, c], |i| m[(i / c, i % c)])
}

fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| rng.sample(StandardNormal))
        .qr()
        .q()
}

/// `Σ^p` of a symmetric positive definite matrix.
fn spd_power(m: &DMatrix<f64>, p: f64) -> DMatrix<f64> {
    let e = m.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.powf(p)));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// `[d, m]` data whose population covariance is exactly `sigma`.
fn data_with_covariance(rng: &mut ChaCha8Rng, sigma: &DMatrix<f64>, m: usize) -> Grid<f64> {
    let d = sigma.nrows();
    let mut z = DMatrix::from_fn(d, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    for mut row in z.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    let cz = &z * z.transpose() / m as f64;
    from_na(&(spd_power(sigma, 0.5) * spd_power(&cz, -0.5) * z))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------- criterion 1

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_match, mut worst_identity, mut matched) = (0.0f64, 0.0f64, 0);
    let mut worst_case = (0, 0.0);
    for _ in 0..100 {
        let d = rng.random_range(1..=16);
        let cond: f64 = 100f64.powf(rng.random_range(0.0..=1.0));
        let mut ev: Vec<f64> = (0..d)
            .map(|_| cond.powf(rng.random_range(0.0..=1.0)))
            .collect();
        ev[0] = 1.0;
        if d > 1 {
            ev[1] = cond;
        }
        let q = random_rotation(&mut rng, d);
        let sigma = &q * DMatrix::from_diagonal(&ev.clone().into()) * q.transpose();
        let x = data_with_covariance(&mut rng, &sigma, 256);

        let mut state = WhiteningState::<f64>::new(d);
        state.iterations = 5;
        let y = zca_newton(&x, &mut state, Mode::Train).expect("zca_newton");
        let (y_exact, _) = zca_exact(&x, DEFAULT_EPS).expect("zca_exact");
        let err = max_abs_diff(y.data(), y_exact.data());
        let cov = to_na(&y) * to_na(&y).transpose() / 256.0;
        let ident = (cov - DMatrix::<f64>::identity(d, d)).abs().max();
        if err <= 1e-3 && ident <= 1e-2 {
            matched += 1;
        }
        if err > worst_match {
            worst_case = (d, cond);
        }
        worst_match = worst_match.max(err);
        worst_identity = worst_identity.max(ident);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        matched == 100 && secs < 10.0,
        format!(
            "{matched}/100 covariances within tolerance; worst |newton - exact|_inf = {worst_match:.3e} \
             (d = {}, cond = {:.1}), worst |cov - I|_inf = {worst_identity:.3e}; {secs:.2} s of 10 s",
            worst_case.0, worst_case.1
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let arch = Architecture {
        encoder: EncoderConfig {
            in_channels: 1,
            stage_channels: vec![4, 8],
            stage_strides: vec![1, 2],
            blocks_per_stage: 1,
            final_norm: FinalNorm::ZcaWhitening,
        },
        projector: ProjectorConfig {
            in_dim: 8,
            hidden: Some(16),
            out_dim: 8,
        },
        whitening_iterations: 5,
    };
    let cfg = TrainConfig {
        batch_size: 2,
        queue_size: 4,
        patches: 4,
        seed: 3,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let images =
        |rng: &mut ChaCha8Rng| Grid::from_fn(&[2, 1, 16, 16], |_| rng.random_range(0.0..1.0));
    let mut s = MocoState::<f64>::new(&cfg, &arch).expect("state");
    for _ in 0..2 {
        s.train_step(&images(&mut rng), &cfg, 10)
            .expect("warm-up step");
    }
    let batch = images(&mut rng);
    let (vq, vk) = s.augment_batch(&batch, &cfg).expect("augment");
    let keys = s.momentum_forward(&vk, true).expect("keys");
    let point = s.online_params();
    let ids: Vec<ParamId> = (0..point.len()).map(ParamId).collect();

    let losses = |params: &[Grid<f64>], grad_of: Option<usize>| {
        let mut tape = if grad_of.is_some() {
            Tape::new()
        } else {
            Tape::no_grad()
        };
        for (i, p) in params.iter().enumerate() {
            tape.param(ParamId(i), p);
        }
        let g = s.query_losses(&mut tape, &vq, &keys, &cfg).expect("losses");
        let vars = [g.global, g.local.expect("local loss"), g.total];
        let values = vars.map(|v| tape.value(v).item());
        let grads = grad_of.map(|k| {
            tape.backward(vars[k], &Grid::scalar(1.0), &ids)
                .expect("backward")
        });
        (values, grads)
    };

    let flat = |grads: &std::collections::BTreeMap<ParamId, Grid<f64>>| -> Vec<f64> {
        ids.iter()
            .zip(&point)
            .flat_map(|(id, p)| match grads.get(id) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; p.len()],
            })
            .collect()
    };
    let analytic: Vec<Vec<f64>> = (0..3)
        .map(|k| flat(&losses(&point, Some(k)).1.unwrap()))
        .collect();

    let mut numeric = vec![Vec::new(); 3];
    let mut perturbed = point.clone();
    for i in 0..point.len() {
        for j in 0..point[i].len() {
            let x0 = point[i].data()[j];
            let h = 1e-6 * x0.abs().max(1.0);
            perturbed[i].data_mut()[j] = x0 + h;
            let (up, _) = losses(&perturbed, None);
            perturbed[i].data_mut()[j] = x0 - h;
            let (down, _) = losses(&perturbed, None);
            perturbed[i].data_mut()[j] = x0;
            for k in 0..3 {
                numeric[k].push((up[k] - down[k]) / (2.0 * h));
            }
        }
    }

    let mut parts = Vec::new();
    let mut pass = true;
    for (k, name) in ["global", "local", "total"].iter().enumerate() {
        let (a, n) = (&analytic[k], &numeric[k]);
        let diff = a
            .iter()
            .zip(n)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = n.iter().map(|y| y * y).sum::<f64>().sqrt();
        let rel = diff / norm.max(f64::MIN_POSITIVE);
        let coord = a
            .iter()
            .zip(n)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
            .fold(0.0, f64::max);
        pass &= rel < 1e-3 && coord < 1e-3 && norm > 0.0;
        parts.push(format!("{name}: rel {rel:.2e}, coord {coord:.2e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    outcome(
        pass,
        format!(
            "{} parameters; {}; {secs:.1} s of 60 s",
            analytic[0].len(),
            parts.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn brute_info_nce(pos: f64, negs: &[f64], tau: f64, include_positive: bool) -> f64 {
    if negs.is_empty() {
        return 0.0;
    }
    let mut z: f64 = negs.iter().map(|n| (n / tau).exp()).sum();
    if include_positive {
        z += (pos / tau).exp();
    }
    -((pos / tau).exp() / z).ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

fn brute_global(zq: &Grid<f64>, zk: &Grid<f64>, queue: &Grid<f64>, c: Contrast) -> f64 {
    let (b, d) = (zq.dim(0), zq.dim(1));
    let row = |g: &Grid<f64>, i: usize| g.data()[i * d..(i + 1) * d].to_vec();
    let mut total = 0.0;
    for i in 0..b {
        let q = row(zq, i);
        let pos = dot(&q, &row(zk, i));
        let negs: Vec<f64> = (0..queue.dim(0)).map(|j| dot(&q, &row(queue, j))).collect();
        total += brute_info_nce(pos, &negs, c.tau, c.include_positive);
    }
    total / b as f64
}

/// Patch pooling and local InfoNCE written out with loops.
fn brute_local(
    fq: &Grid<f64>,
    fk: &Grid<f64>,
    rows: usize,
    cols: usize,
    ph: usize,
    pw: usize,
    c: Contrast,
) -> f64 {
    let [b, ch, h, w] = [fq.dim(0), fq.dim(1), fq.dim(2), fq.dim(3)];
    let pool = |f: &Grid<f64>, bi: usize, r: usize, q: usize| -> Vec<f64> {
        (0..ch)
            .map(|ci| {
                let mut s = 0.0;
                for y in r * ph..(r + 1) * ph {
                    for x in q * pw..(q + 1) * pw {
                        s += f.data()[((bi * ch + ci) * h + y) * w + x];
                    }
                }
                s / (ph * pw) as f64
            })
            .collect()
    };
    let k = rows * cols;
    let mut total = 0.0;
    for bi in 0..b {
        let qs: Vec<Vec<f64>> = (0..k)
            .map(|p| normalized(&pool(fq, bi, p / cols, p % cols)))
            .collect();
        let ks: Vec<Vec<f64>> = (0..k)
            .map(|p| normalized(&pool(fk, bi, p / cols, p % cols)))
            .collect();
        for i in 0..k {
            let pos = dot(&qs[i], &ks[i]);
            let negs: Vec<f64> = (0..k)
                .filter(|&j| j != i)
                .map(|j| dot(&qs[i], &ks[j]))
                .collect();
            total += brute_info_nce(pos, &negs, c.tau, c.include_positive);
        }
    }
    total / (b * k) as f64
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut worst_global, mut worst_local) = (0.0f64, 0.0f64);
    for n in 0..50 {
        let contrast = Contrast {
            tau: rng.random_range(0.05..1.0),
            include_positive: n % 5 != 4,
        };
        let b = rng.random_range(1..=4);
        let q = rng.random_range(0..=32);
        let d = rng.random_range(2..=16);
        let zq = unit_rows(&mut rng, b, d);
        let zk = unit_rows(&mut rng, b, d);
        let queue = if q == 0 {
            Grid::zeros(&[0, d])
        } else {
            unit_rows(&mut rng, q, d)
        };
        let got = global_loss(&zq, &zk, &queue, contrast).expect("global_loss");
        worst_global = worst_global.max((got - brute_global(&zq, &zk, &queue, contrast)).abs());

        let k = if n % 2 == 0 { 4 } else { 20 };
        let (h, w) = (rng.random_range(5..=24), rng.random_range(5..=24));
        let ch = rng.random_range(2..=8);
        let fq = gaussian(&mut rng, &[b, ch, h, w]);
        let fk = gaussian(&mut rng, &[b, ch, h, w]);
        let grid = sample_patch_grid(&fq, &fk, k).expect("patch grid");
        let g = grid.geom;
        let got = local_loss(&grid, contrast).expect("local_loss");
        let want = brute_local(&fq, &fk, g.rows, g.cols, g.patch_h, g.patch_w, contrast);
        worst_local = worst_local.max((got - want).abs());
    }
    let empty = [true, false].map(|inc| {
        info_nce(
            &SimilarityScores {
                pos: 0.37,
                negs: vec![],
                tau: 0.2,
            },
            inc,
        )
        .expect("info_nce")
    });
    let empty_zero = empty.iter().all(|&v| v == 0.0);
    outcome(
        worst_global <= 1e-8 && worst_local <= 1e-8 && empty_zero,
        format!(
            "50 instances: worst global error {worst_global:.2e}, worst local error {worst_local:.2e}; \
             empty negatives give {empty:?}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut online = Params::<f64>::default();
    let mut target = Params::<f64>::default();
    for (name, shape) in [("a", vec![3, 4]), ("b", vec![5]), ("c", vec![2, 2, 3])] {
        online.push(name, gaussian(&mut rng, &shape));
        target.push(name, gaussian(&mut rng, &shape));
    }
    let initial = target.clone();
    let m: f64 = 0.999;
    let mut worst_ema = 0.0f64;
    for n in 1..=1000 {
        ema_update(&online, &mut target, m).expect("ema_update");
        let decay = m.powi(n);
        for i in 0..online.len() {
            let (q, k0, k) = (
                online.value(i).data(),
                initial.value(i).data(),
                target.value(i).data(),
            );
            for j in 0..q.len() {
                let want = q[j] + (k0[j] - q[j]) * decay;
                worst_ema = worst_ema.max((k[j] - want).abs());
            }
        }
    }

    let (cap, b, d) = (12, 3, 2);
    let key = |tag: u64| {
        let a = tag as f64 * 0.01;
        [a.cos(), a.sin()]
    };
    let mut queue = Queue::<f64>::new(cap, d);
    let mut fifo: VecDeque<u64> = VecDeque::new();
    let mut tag = 0;
    let mut queue_ok = true;
    let pushes = 3 * cap / b + 1;
    for _ in 0..pushes {
        let tags: Vec<u64> = (0..b as u64).map(|i| tag + i).collect();
        tag += b as u64;
        let keys = Grid::new(vec![b, d], tags.iter().flat_map(|&t| key(t)).collect()).unwrap();
        queue.push(&keys).expect("queue push");
        for t in tags {
            fifo.push_back(t);
            if fifo.len() > cap {
                fifo.pop_front();
            }
        }
        queue_ok &= queue.fill == fifo.len() && queue.filled().dim(0) == fifo.len();
        // Oldest entry sits at the cursor once the ring is full, else at row 0.
        let first = if fifo.len() == cap { queue.cursor } else { 0 };
        for (i, &t) in fifo.iter().enumerate() {
            let slot = (first + i) % cap;
            queue_ok &= queue.data.data()[slot * d..(slot + 1) * d] == key(t);
        }
    }
    outcome(
        worst_ema <= 1e-12 && queue_ok,
        format!(
            "EMA worst deviation from closed form over 1000 steps {worst_ema:.2e}; \
             queue matches tagged FIFO over {pushes} pushes ({} wrap-arounds): {queue_ok}",
            pushes * b / cap
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut worst_oracle, mut worst_rot, mut worst_scale) = (0.0f64, 0.0f64, 0.0f64);
    let mut min_ratio = f64::INFINITY;
    for _ in 0..20 {
        let n = rng.random_range(20..=80);
        let d = rng.random_range(2..=16);
        let mix = gaussian(&mut rng, &[d, d]);
        let f = gaussian(&mut rng, &[n, d]).matmul(&mix).unwrap();
        let spectrum_of =
            |f: &Grid<f64>| singular_spectrum(&representation_covariance(f).unwrap()).unwrap();
        let s = spectrum_of(&f);

        let c = representation_covariance(&f).unwrap();
        let mut oracle: Vec<f64> = to_na(&c)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .map(|v| v.max(0.0))
            .collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        worst_oracle = worst_oracle.max(max_abs_diff(&s, &oracle));

        let r = from_na(&random_rotation(&mut rng, d));
        worst_rot = worst_rot.max(max_abs_diff(&s, &spectrum_of(&f.matmul(&r).unwrap())));

        let k: f64 = rng.random_range(0.5..4.0);
        let scaled: Vec<f64> = s.iter().map(|v| v * k * k).collect();
        worst_scale = worst_scale.max(max_abs_diff(&scaled, &spectrum_of(&f.map(|v| v * k))));

        let m = 200;
        let g = gaussian(&mut rng, &[m, d]).matmul(&mix).unwrap();
        let (white, _) = zca_exact(&g.transpose().unwrap(), 0.0).unwrap();
        let er = effective_rank(&spectrum_of(&white.transpose().unwrap())).unwrap();
        min_ratio = min_ratio.min(er / d as f64);
    }
    outcome(
        worst_oracle <= 1e-8 && worst_rot <= 1e-8 && worst_scale <= 1e-8 && min_ratio >= 0.99,
        format!(
            "20 feature sets: oracle error {worst_oracle:.2e}, rotation {worst_rot:.2e}, \
             scale {worst_scale:.2e}; whitened effective_rank / d >= {min_ratio:.6}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

const SEEDS: [u64; 3] = [0, 1, 2];
const SLUGS: [&str; 4] = ["baseline", "local", "decorr", "both"];
const NAMES: [&str; 4] = ["baseline", "+local", "+decorr", "+both"];
const BUDGET_SECS: f64 = 3600.0;
const TIMING_FILE: &str = "timing.json";

fn runs_dir() -> PathBuf {
    match std::env::var_os("MEDMOCO_ACCEPTANCE_RUNS") {
        Some(p) => PathBuf::from(p),
        None => {
            Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/medmoco-acceptance/collapse")
        }
    }
}

fn run_config(seed: u64, k: usize) -> TrainConfig {
    let (enable_local, enable_whitening) = ABLATION_FLAGS[k];
    TrainConfig {
        seed,
        enable_local,
        enable_whitening,
        ..Default::default()
    }
}

fn read_timing(dir: &Path) -> (u64, f64) {
    let Ok(text) = std::fs::read_to_string(dir.join(TIMING_FILE)) else {
        return (0, 0.0);
    };
    let v: serde_json::Value = serde_json::from_str(&text).unwrap_or_default();
    (
        v["steps"].as_u64().unwrap_or(0),
        v["seconds"].as_f64().unwrap_or(0.0),
    )
}

/// Latest `ckpt_<n>.mmc1` in a directory.
fn latest_checkpoint(dir: &Path) -> Option<(u64, PathBuf)> {
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| {
            let p = e.ok()?.path();
            let n = p
                .file_name()?
                .to_str()?
                .strip_prefix("ckpt_")?
                .strip_suffix(".mmc1")?
                .parse()
                .ok()?;
            Some((n, p))
        })
        .max_by_key(|(n, _)| *n)
}

fn phantom_sets() -> [Batch; 3] {
    standard_splits(&PhantomConfig::default(), 256, 64)
        .map(|(_, cfg)| Batch::from_samples(&generate_all(&cfg).expect("phantoms")).expect("batch"))
}

struct Pretrained {
    /// `[seed][config]` final checkpoints, when every run finished.
    checkpoints: Option<Vec<Vec<Container>>>,
}

/// Pretrain (or resume, or reuse) one run. Returns whether it finished.
fn ensure_run(
    dir: &Path,
    cfg: &TrainConfig,
    images: &Grid<f32>,
    total: u64,
    deadline: Option<Instant>,
) -> bool {
    if dir.join(checkpoint_name(total)).exists() {
        return true;
    }
    if deadline.is_some_and(|d| Instant::now() >= d) {
        return false;
    }
    std::fs::create_dir_all(dir).expect("run dir");
    let arch = Architecture::from_config(cfg);
    let (mut state, prev) = match latest_checkpoint(dir) {
        Some((n, path)) if n > 0 => {
            let metrics = std::fs::read_to_string(dir.join(METRICS_FILE)).unwrap_or_default();
            let kept: String = metrics
                .lines()
                .take(n as usize)
                .map(|l| format!("{l}\n"))
                .collect();
            std::fs::write(dir.join(METRICS_FILE), kept).expect("metrics");
            (
                MocoState::<f32>::load(&path, cfg, &arch).expect("resume"),
                read_timing(dir),
            )
        }
        _ => (MocoState::<f32>::new(cfg, &arch).expect("state"), (0, 0.0)),
    };
    let start = (state.step, Instant::now());
    pretrain_with(&mut state, images, cfg, Some(dir), |m| {
        if m.step % 200 == 0 {
            eprintln!(
                "  {}: step {}/{total} loss {:.4}",
                dir.display(),
                m.step,
                m.loss_total
            );
        }
        match deadline {
            Some(d) if Instant::now() >= d => ControlFlow::Break(()),
            _ => ControlFlow::Continue(()),
        }
    })
    .expect("pretrain");
    let timing = serde_json::json!({
        "steps": prev.0 + state.step - start.0,
        "seconds": prev.1 + start.1.elapsed().as_secs_f64(),
    });
    std::fs::write(dir.join(TIMING_FILE), format!("{timing}\n")).expect("timing");
    state.step == total
}

fn criterion_6(pretrain_set: &Batch, val: &Batch, out: &mut Pretrained) -> Outcome {
    let full = env_flag("MEDMOCO_ACCEPTANCE_FULL");
    let root = runs_dir();
    let per_run = (pretrain_set.len() / TrainConfig::default().batch_size) as u64
        * TrainConfig::default().epochs as u64;
    let recorded = |root: &Path| -> (u64, f64) {
        let mut acc = (0, 0.0);
        for seed in SEEDS {
            for slug in SLUGS {
                let (s, t) = read_timing(&root.join(format!("{slug}_seed{seed}")));
                acc = (acc.0 + s, acc.1 + t);
            }
        }
        acc
    };
    let (_, spent) = recorded(&root);
    let remaining = (BUDGET_SECS - spent).max(0.0);
    let deadline = (!full).then(|| Instant::now() + Duration::from_secs_f64(remaining));
    eprintln!(
        "criterion 6: runs in {} ({spent:.0} s already recorded)",
        root.display()
    );
    let mut done = 0;
    for seed in SEEDS {
        for (k, slug) in SLUGS.iter().enumerate() {
            let dir = root.join(format!("{slug}_seed{seed}"));
            if ensure_run(
                &dir,
                &run_config(seed, k),
                &pretrain_set.images,
                per_run,
                deadline,
            ) {
                done += 1;
            }
        }
    }
    let (steps, secs) = recorded(&root);
    let budget_ok = secs < BUDGET_SECS && done == 12;
    let runtime = format!(
        "pretraining wall time {:.1} min for {steps} of {} steps (budget 60 min)",
        secs / 60.0,
        12 * per_run
    );
    if done < 12 {
        let projected = if steps > 0 {
            secs / steps as f64 * (12 * per_run) as f64 / 60.0
        } else {
            f64::NAN
        };
        return outcome(
            false,
            format!("{done}/12 runs finished; {runtime}; projected {projected:.0} min at the observed rate"),
        );
    }

    let mut ckpts = Vec::new();
    let (mut er, mut ci) = ([0.0f64; 4], [0.0f64; 4]);
    for seed in SEEDS {
        let mut row = Vec::new();
        for (k, slug) in SLUGS.iter().enumerate() {
            let path = root
                .join(format!("{slug}_seed{seed}"))
                .join(checkpoint_name(per_run));
            let c = Container::load(&path).expect("checkpoint");
            let enc = load_encoder::<f32>(&c).expect("encoder");
            let feats: Grid<f64> = encoder_features(&enc, None, &val.images, 32)
                .expect("features")
                .cast();
            let r = SpectrumReport::from_features(
                &feats,
                FeatureSource::PooledBackbone,
                DEFAULT_COLLAPSE_RATIO,
            )
            .expect("spectrum");
            er[k] += r.effective_rank / SEEDS.len() as f64;
            ci[k] += r.collapse_index as f64 / SEEDS.len() as f64;
            row.push(c);
        }
        ckpts.push(row);
    }
    out.checkpoints = Some(ckpts);
    let rank_ok = er[3] > er[0];
    let collapse_ok = ci[3] <= ci[0];
    let table: Vec<String> = (0..4)
        .map(|k| format!("{} rank {:.3} collapse {:.2}", NAMES[k], er[k], ci[k]))
        .collect();
    outcome(
        rank_ok && collapse_ok && budget_ok,
        format!(
            "seed means: {}; +both rank > baseline: {rank_ok}, +both collapse <= baseline: {collapse_ok}; {runtime}",
            table.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7(train: &Batch, val: &Batch, pre: &Pretrained) -> Outcome {
    let Some(ckpts) = &pre.checkpoints else {
        return outcome(
            false,
            "no pretrained backbones: criterion 6 runs are unfinished",
        );
    };
    let classes = PhantomConfig::default().num_classes;
    let no_ssl = Architecture::from_config(&TrainConfig {
        enable_whitening: false,
        ..Default::default()
    })
    .encoder;
    let mut means = [0.0f64; 5];
    for (si, &seed) in SEEDS.iter().enumerate() {
        let cfg = EvalConfig {
            mode: EvalMode::Frozen,
            label_fraction: 1.0,
            seed,
            combination_seed: seed,
            ..Default::default()
        };
        for (r, mean) in means.iter_mut().enumerate() {
            let backbone = match r {
                0 => Backbone::RandomInit {
                    config: no_ssl.clone(),
                    seed,
                },
                k => Backbone::Checkpoint(&ckpts[si][k - 1]),
            };
            let dice = train_eval_segmentation::<f32>(&cfg, &backbone, train, val, classes)
                .expect("evaluation")
                .dice
                .mean;
            eprintln!("  criterion 7: seed {seed} row {r}: dice {dice:.4}");
            *mean += dice / SEEDS.len() as f64;
        }
    }
    let best = (1..5)
        .max_by(|&a, &b| means[a].total_cmp(&means[b]))
        .unwrap();
    let order = if means[4] > means[1] { ">" } else { "<=" };
    outcome(
        means[best] > means[0],
        format!(
            "frozen mean Dice over seeds: No SSL {:.4}, {}; best SSL {} ({:.4}); +both {order} baseline",
            means[0],
            (1..5).map(|k| format!("{} {:.4}", NAMES[k - 1], means[k])).collect::<Vec<_>>().join(", "),
            NAMES[best - 1],
            means[best]
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let data = PhantomConfig {
        image_size: 32,
        num_samples: 64,
        ..Default::default()
    };
    let images = Batch::from_samples(&generate_all(&data).unwrap())
        .unwrap()
        .images;
    let cfg = TrainConfig {
        batch_size: 8,
        queue_size: 16,
        epochs: 2,
        checkpoint_every: 4,
        seed: 7,
        ..Default::default()
    };
    let arch = Architecture::from_config(&cfg);
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| -> Vec<PathBuf> {
        let dir = tmp.path().join(name);
        let mut s = MocoState::<f32>::new(&cfg, &arch).unwrap();
        let out = pretrain(&mut s, &images, &cfg, Some(&dir), |_| {}).unwrap();
        let mut files = vec![dir.join(METRICS_FILE)];
        files.extend(out.checkpoints);
        files
    };
    let (a, b) = (run("a"), run("b"));
    let names_match = a
        .iter()
        .map(|p| p.file_name())
        .eq(b.iter().map(|p| p.file_name()));
    let identical = names_match
        && a.iter()
            .zip(&b)
            .all(|(x, y)| std::fs::read(x).unwrap() == std::fs::read(y).unwrap());

    let last = a.last().unwrap();
    let bytes = std::fs::read(last).unwrap();
    let c = Container::from_bytes(&bytes).unwrap();
    let state = MocoState::<f32>::from_container(&c, &cfg, &arch).unwrap();
    let round_trip = c.to_bytes() == bytes && state.to_container().to_bytes() == bytes;

    let converted = whitening_to_bn_convert(&c).and_then(|bn| {
        let enc = load_encoder::<f32>(&bn)?;
        encoder_features(&enc, None, &images, 16)
    });
    let convert_ok = matches!(&converted, Ok(f) if f.is_finite());
    outcome(
        identical && round_trip && convert_ok,
        format!(
            "{} files byte-identical across two runs: {identical}; checkpoint round trip bit-exact: \
             {round_trip}; converted checkpoint eval-forwards: {}",
            a.len(),
            match &converted {
                Ok(_) => convert_ok.to_string(),
                Err(e) => format!("error: {e}"),
            }
        ),
    )
}

// ---------------------------------------------------------------- driver

fn selected(n: usize) -> bool {
    match std::env::var("MEDMOCO_ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').any(|t| t.trim().parse() == Ok(n)),
        Err(_) => true,
    }
}

fn run(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> Option<bool> {
    if !selected(n) {
        println!("SKIP criterion {n} ({name})");
        return None;
    }
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    let tag = if result.pass { "PASS" } else { "FAIL" };
    println!(
        "{tag} criterion {n} ({name}): {} [{:.1} s]",
        result.detail,
        start.elapsed().as_secs_f64()
    );
    Some(result.pass)
}

fn main() {
    let strict = env_flag("MEDMOCO_ACCEPTANCE_STRICT");
    let mut passed = vec![
        run(1, "whitening oracle", criterion_1),
        run(2, "gradient suite", criterion_2),
        run(3, "loss oracles", criterion_3),
        run(4, "EMA and queue laws", criterion_4),
        run(5, "spectral diagnostics", criterion_5),
    ];
    let sets = (selected(6) || selected(7)).then(phantom_sets);
    let [pretrain_set, train, val] = sets
        .as_ref()
        .map_or([None, None, None], |s| s.each_ref().map(Some));
    let mut pre = Pretrained { checkpoints: None };
    passed.push(run(6, "collapse reproduction", || {
        criterion_6(pretrain_set.unwrap(), val.unwrap(), &mut pre)
    }));
    passed.push(run(7, "downstream sanity", || {
        criterion_7(train.unwrap(), val.unwrap(), &pre)
    }));
    passed.push(run(8, "determinism", criterion_8));
    let failed = passed.iter().filter(|p| **p == Some(false)).count();
    let ok = passed.iter().filter(|p| **p == Some(true)).count();
    println!("acceptance: {ok} passed, {failed} failed");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
