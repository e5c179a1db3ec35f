//! Contrastive objectives: global InfoNCE against a queue of keys, local
//! patch InfoNCE between the two views of one image, and their sum.
//!
//! Every loss has a tape form (used for training) and a plain value form that
//! runs the same graph without gradients.

use crate::autodiff::{PatchGeom, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{Grid, Real};

pub const DEFAULT_TAU: f64 = 0.2;
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_PATCHES: usize = 20;
/// Norm guard for cosine similarity.
pub const SIM_EPS: f64 = 1e-12;
/// Allowed deviation of a row norm from 1 in the global loss inputs.
pub const UNIT_NORM_TOL: f64 = 1e-3;

/// Softmax temperature and denominator convention shared by both losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contrast {
    pub tau: f64,
    /// Include the positive term in the log-sum-exp denominator.
    pub include_positive: bool,
}

impl Default for Contrast {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            include_positive: true,
        }
    }
}

impl Contrast {
    fn validate(&self, op: &'static str) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(
                op,
                format!("temperature must be positive, got {}", self.tau),
            ));
        }
        Ok(())
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine_similarity: length mismatch");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(SIM_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(SIM_EPS);
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Similarities of one anchor to its positive and to its negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityScores {
    pub pos: f64,
    pub negs: Vec<f64>,
    pub tau: f64,
}

/// `−log(e^{pos/τ} / (e^{pos/τ} + Σ e^{neg/τ}))`, or with the positive left out
/// of the denominator when `include_positive` is false. No negatives gives 0.
pub fn info_nce(scores: &SimilarityScores, include_positive: bool) -> Result<f64> {
    let c = Contrast {
        tau: scores.tau,
        include_positive,
    };
    c.validate("info_nce")?;
    if std::iter::once(&scores.pos)
        .chain(&scores.negs)
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite { op: "info_nce" });
    }
    if scores.negs.is_empty() {
        return Ok(0.0);
    }
    let p = scores.pos / c.tau;
    let negs = scores.negs.iter().map(|n| n / c.tau);
    let mx = if include_positive {
        negs.clone().fold(p, f64::max)
    } else {
        negs.clone().fold(f64::NEG_INFINITY, f64::max)
    };
    let mut z: f64 = negs.map(|n| (n - mx).exp()).sum();
    if include_positive {
        z += (p - mx).exp();
    }
    Ok(mx + z.ln() - p)
}

fn check_unit_rows<T: Real>(what: &str, g: &Grid<T>) -> Result<()> {
    let d = *g.shape().last().unwrap_or(&0);
    if d == 0 {
        return Ok(());
    }
    for (i, row) in g.data().chunks(d).enumerate() {
        let n = row
            .iter()
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        if !((n - 1.0).abs() <= UNIT_NORM_TOL) {
            return Err(Error::Contract(format!(
                "{what} row {i} has norm {n}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Global InfoNCE on the tape. `z_k` and `queue` are treated as constants.
/// `queue` holds only the filled entries, `[Q, d]` with Q possibly 0.
pub fn global_loss_tape<T: Real>(
    tape: &mut Tape<T>,
    z_q: Var,
    z_k: &Grid<T>,
    queue: &Grid<T>,
    contrast: Contrast,
) -> Result<Var> {
    contrast.validate("global_loss")?;
    let (b, d) = match tape.shape(z_q) {
        &[b, d] => (b, d),
        s => {
            return Err(Error::shape(
                "global_loss",
                format!("queries {s:?}, expected [B, d]"),
            ))
        }
    };
    if z_k.shape() != [b, d] {
        return Err(Error::shape(
            "global_loss",
            format!("keys {:?} vs queries [{b}, {d}]", z_k.shape()),
        ));
    }
    let q_rows = match queue.shape() {
        &[q, qd] if qd == d => q,
        s => {
            return Err(Error::shape(
                "global_loss",
                format!("queue {s:?}, expected [Q, {d}]"),
            ))
        }
    };
    check_unit_rows("query", tape.value(z_q))?;
    check_unit_rows("key", z_k)?;
    check_unit_rows("queue", queue)?;

    let k = tape.constant(z_k.clone());
    let prod = tape.mul(z_q, k)?;
    let pos = tape.sum_last_dim(prod)?;
    let mut logits = tape.reshape(pos, &[b, 1])?;
    if q_rows > 0 {
        let qv = tape.constant(queue.clone());
        let negs = tape.matmul_t(z_q, false, qv, true)?;
        logits = tape.concat_last_dim(logits, negs)?;
    }
    let logits = tape.scale(logits, 1.0 / contrast.tau)?;
    tape.cross_entropy(logits, vec![0; b], contrast.include_positive)
}

pub fn global_loss<T: Real>(
    z_q: &Grid<T>,
    z_k: &Grid<T>,
    queue: &Grid<T>,
    contrast: Contrast,
) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let q = tape.constant(z_q.clone());
    let l = global_loss_tape(&mut tape, q, z_k, queue, contrast)?;
    Ok(tape.value(l).item().as_f64())
}

/// Pick the `rows × cols = k` grid whose aspect ratio is closest to `h/w`
/// (ties go to more rows) among those with patches of at least one pixel.
/// Remainder rows and columns are dropped.
pub fn patch_geometry(h: usize, w: usize, k: usize) -> Result<PatchGeom> {
    if k == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(
            "sample_patch_grid",
            format!("K={k} patches on a {h}x{w} map"),
        ));
    }
    // |r/c − h/w| = |r·w − c·h| / (c·w); compare across pairs without division.
    let mut best: Option<(usize, usize)> = None;
    for r in (1..=k).filter(|r| k.is_multiple_of(*r)) {
        let c = k / r;
        if r > h || c > w {
            continue;
        }
        let better = match best {
            None => true,
            Some((br, bc)) => {
                let dev = (r * w).abs_diff(c * h) as u128 * bc as u128;
                let bdev = (br * w).abs_diff(bc * h) as u128 * c as u128;
                dev < bdev || (dev == bdev && r > br)
            }
        };
        if better {
            best = Some((r, c));
        }
    }
    let (rows, cols) = best.ok_or_else(|| {
        Error::invalid(
            "sample_patch_grid",
            format!("K={k} cannot tile a {h}x{w} map with patches of at least 1x1"),
        )
    })?;
    Ok(PatchGeom {
        rows,
        cols,
        patch_h: h / rows,
        patch_w: w / cols,
    })
}

/// Patch grid with pooled vectors from both views, `[B, K, C1]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T> {
    pub geom: PatchGeom,
    pub pooled_q: Grid<T>,
    pub pooled_k: Grid<T>,
}

pub fn sample_patch_grid<T: Real>(
    fm_q: &Grid<T>,
    fm_k: &Grid<T>,
    k: usize,
) -> Result<PatchGrid<T>> {
    if fm_q.shape() != fm_k.shape() {
        return Err(Error::shape(
            "sample_patch_grid",
            format!("{:?} vs {:?}", fm_q.shape(), fm_k.shape()),
        ));
    }
    let &[_, _, h, w] = fm_q.shape() else {
        return Err(Error::shape(
            "sample_patch_grid",
            format!("expected [B, C, H, W], got {:?}", fm_q.shape()),
        ));
    };
    let geom = patch_geometry(h, w, k)?;
    let mut tape = Tape::no_grad();
    let q = tape.constant(fm_q.clone());
    let kk = tape.constant(fm_k.clone());
    let pq = tape.patch_avg_pool(q, geom)?;
    let pk = tape.patch_avg_pool(kk, geom)?;
    Ok(PatchGrid {
        geom,
        pooled_q: tape.value(pq).clone(),
        pooled_k: tape.value(pk).clone(),
    })
}

/// Local patch InfoNCE on pooled vectors `[B, K, C]`. `pooled_k` is a
/// constant; negatives for patch i are the other key patches of its image.
pub fn local_loss_pooled_tape<T: Real>(
    tape: &mut Tape<T>,
    pooled_q: Var,
    pooled_k: &Grid<T>,
    contrast: Contrast,
) -> Result<Var> {
    contrast.validate("local_loss")?;
    let (b, k) = match tape.shape(pooled_q) {
        &[b, k, _] => (b, k),
        s => {
            return Err(Error::shape(
                "local_loss",
                format!("pooled queries {s:?}, expected [B, K, C]"),
            ))
        }
    };
    if pooled_k.shape() != tape.shape(pooled_q) {
        return Err(Error::shape(
            "local_loss",
            format!(
                "pooled keys {:?} vs queries {:?}",
                pooled_k.shape(),
                tape.shape(pooled_q)
            ),
        ));
    }
    if k < 2 {
        return Err(Error::invalid(
            "local_loss",
            format!("need K >= 2 patches, got {k}"),
        ));
    }
    let nq = tape.l2_normalize(pooled_q, SIM_EPS)?;
    let pk = tape.constant(pooled_k.clone());
    let nk = tape.l2_normalize(pk, SIM_EPS)?;
    // sims[b, j, i] = key_j · query_i: axis 1 is the class axis.
    let sims = tape.batched_matmul(nk, nq, true)?;
    let logits = tape.scale(sims, 1.0 / contrast.tau)?;
    let targets = (0..b).flat_map(|_| 0..k).collect();
    tape.cross_entropy(logits, targets, contrast.include_positive)
}

/// Local loss from the query-view feature map `[B, C1, H1, W1]` on the tape
/// and the key-view map as a constant.
pub fn local_loss_tape<T: Real>(
    tape: &mut Tape<T>,
    fm_q: Var,
    fm_k: &Grid<T>,
    k: usize,
    contrast: Contrast,
) -> Result<Var> {
    if tape.shape(fm_q) != fm_k.shape() {
        return Err(Error::shape(
            "local_loss",
            format!("{:?} vs {:?}", tape.shape(fm_q), fm_k.shape()),
        ));
    }
    let &[_, _, h, w] = fm_k.shape() else {
        return Err(Error::shape(
            "local_loss",
            format!("expected [B, C, H, W], got {:?}", fm_k.shape()),
        ));
    };
    let geom = patch_geometry(h, w, k)?;
    let pq = tape.patch_avg_pool(fm_q, geom)?;
    let mut side = Tape::no_grad();
    let kv = side.constant(fm_k.clone());
    let pk = side.patch_avg_pool(kv, geom)?;
    local_loss_pooled_tape(tape, pq, side.value(pk), contrast)
}

pub fn local_loss<T: Real>(patches: &PatchGrid<T>, contrast: Contrast) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let q = tape.constant(patches.pooled_q.clone());
    let l = local_loss_pooled_tape(&mut tape, q, &patches.pooled_k, contrast)?;
    Ok(tape.value(l).item().as_f64())
}

pub fn total_loss(l_global: f64, l_local: f64, lambda: f64) -> f64 {
    l_global + lambda * l_local
}
