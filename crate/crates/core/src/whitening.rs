//! Batch standardization, exact ZCA whitening, and the Newton-iteration
//! whitening layer used as the final backbone normalization.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{Grid, Real};
use crate::linalg::{spectral_map, symmetric_eigen};
use crate::Mode;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_ITERATIONS: usize = 5;
pub const DEFAULT_RUNNING_MOMENTUM: f64 = 0.1;

/// Per-feature standardization of `x: [d, m]` with population variance.
/// Rows whose variance falls below `eps` are divided by `sqrt(eps)` instead,
/// so constant rows map to zeros.
pub fn batch_standardize(x: &Grid<f64>, eps: f64) -> Result<Grid<f64>> {
    let (d, m) = x.as_matrix("batch_standardize")?;
    if m < 2 {
        return Err(Error::degenerate(
            "batch_standardize",
            format!("need m >= 2 samples, got {m}"),
        ));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(m).take(d) {
        let mu = row.iter().sum::<f64>() / m as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
        let s = var.max(eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mu) / s);
    }
    Grid::new(vec![d, m], out)
}

fn row_means<T: Real>(x: &Grid<T>) -> Vec<T> {
    let m = x.dim(1);
    x.data()
        .chunks(m.max(1))
        .map(|r| r.iter().copied().sum::<T>() / T::from_usize(m).unwrap())
        .collect()
}

/// `(1/m)·Xc·Xcᵀ + eps·I` with `Xc` the row-centered input.
pub fn regularized_covariance(x: &Grid<f64>, eps: f64) -> Result<Grid<f64>> {
    let (d, m) = x.as_matrix("covariance")?;
    if m < 2 {
        return Err(Error::degenerate(
            "covariance",
            format!("need m >= 2 samples, got {m}"),
        ));
    }
    let mu = row_means(x);
    let xc = Grid::from_fn(&[d, m], |i| x.data()[i] - mu[i / m]);
    let mut s = xc.matmul(&xc.transpose()?)?.map(|v| v / m as f64);
    for i in 0..d {
        s.data_mut()[i * d + i] += eps;
    }
    Ok(s)
}

/// Exact ZCA whitening through a symmetric eigendecomposition. Returns the
/// whitened data `W·(X − μ1ᵀ)` and `W = DΛ^{-1/2}Dᵀ`.
pub fn zca_exact(x: &Grid<f64>, eps: f64) -> Result<(Grid<f64>, Grid<f64>)> {
    let (d, m) = x.as_matrix("zca_exact")?;
    let sigma = regularized_covariance(x, eps)?;
    let eig = symmetric_eigen(&sigma)?;
    if eig.values.last().is_some_and(|&l| l <= 0.0) {
        return Err(Error::degenerate(
            "zca_exact",
            "covariance is not positive definite",
        ));
    }
    let w = spectral_map(&eig, |l| 1.0 / l.sqrt());
    let mu = row_means(x);
    let xc = Grid::from_fn(&[d, m], |i| x.data()[i] - mu[i / m]);
    Ok((w.matmul(&xc)?, w))
}

/// Newton iteration for `Σ^{-1/2}` on the trace-normalized covariance,
/// outside the tape. Returns `W = P_T / sqrt(tr Σ)`.
pub fn newton_inverse_sqrt(sigma: &Grid<f64>, iterations: usize) -> Result<Grid<f64>> {
    let (d, c) = sigma.as_matrix("newton_inverse_sqrt")?;
    if d != c {
        return Err(Error::shape(
            "newton_inverse_sqrt",
            format!("non-square {d}x{c}"),
        ));
    }
    let tr: f64 = (0..d).map(|i| sigma.data()[i * d + i]).sum();
    if !(tr > 0.0) {
        return Err(Error::degenerate(
            "newton_inverse_sqrt",
            format!("trace {tr} is not positive"),
        ));
    }
    let sn = sigma.map(|v| v / tr);
    let mut p = Grid::eye(d);
    for k in 1..=iterations {
        let p3 = p.matmul(&p)?.matmul(&p)?.matmul(&sn)?;
        p = p.zip_map(&p3, |a, b| 0.5 * (3.0 * a - b))?;
        if !p.is_finite() {
            return Err(Error::Divergence { iteration: k });
        }
    }
    Ok(p.map(|v| v / tr.sqrt()))
}

/// Running state of one whitening layer.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteningState<T> {
    pub iterations: usize,
    pub eps: f64,
    pub running_mu: Grid<T>,
    pub running_w: Grid<T>,
    pub running_momentum: f64,
}

impl<T: Real> WhiteningState<T> {
    /// Defaults with `running_mu = 0` and `running_W = I`.
    pub fn new(d: usize) -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            eps: DEFAULT_EPS,
            running_mu: Grid::zeros(&[d]),
            running_w: Grid::eye(d),
            running_momentum: DEFAULT_RUNNING_MOMENTUM,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mu.len()
    }

    /// Move the running statistics toward a batch estimate. The batch
    /// matrix is symmetrized first.
    pub fn update(&mut self, batch: &BatchWhitening<T>) {
        let a = T::lit(self.running_momentum);
        let keep = T::one() - a;
        for (r, &b) in self.running_mu.data_mut().iter_mut().zip(&batch.mu) {
            *r = keep * *r + a * b;
        }
        let d = self.dim();
        let w = batch.w.data();
        let half = T::lit(0.5);
        for i in 0..d {
            for j in 0..d {
                let sym = half * (w[i * d + j] + w[j * d + i]);
                let r = &mut self.running_w.data_mut()[i * d + j];
                *r = keep * *r + a * sym;
            }
        }
    }
}

/// Batch estimate produced by a train-mode forward.
#[derive(Debug, Clone)]
pub struct BatchWhitening<T> {
    pub mu: Vec<T>,
    pub w: Grid<T>,
}

/// Newton-iteration ZCA whitening of `x: [d, m]` recorded on the tape.
/// Train mode whitens with batch statistics and returns them for the
/// running update; eval mode applies the running statistics.
pub fn zca_newton_tape<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    state: &WhiteningState<T>,
    mode: Mode,
) -> Result<(Var, Option<BatchWhitening<T>>)> {
    let &[d, m] = tape.shape(x) else {
        return Err(Error::shape(
            "zca_newton",
            format!("expected [d, m], got {:?}", tape.shape(x)),
        ));
    };
    if d != state.dim() {
        return Err(Error::shape(
            "zca_newton",
            format!("{d} features for a layer of width {}", state.dim()),
        ));
    }
    match mode {
        Mode::Eval => {
            let w = tape.constant(state.running_w.clone());
            let wx = tape.matmul(w, x)?;
            let shift = state
                .running_w
                .matmul(&state.running_mu.clone().reshape(&[d, 1])?)?;
            let wx3 = tape.reshape(wx, &[1, d, m])?;
            let ones = tape.constant(Grid::ones(&[d]));
            let neg = tape.constant(shift.map(|v| -v).reshape(&[d])?);
            let y = tape.channel_affine(wx3, ones, neg)?;
            Ok((tape.reshape(y, &[d, m])?, None))
        }
        Mode::Train => {
            if m < 2 {
                return Err(Error::degenerate(
                    "zca_newton",
                    format!("need m >= 2 samples, got {m}"),
                ));
            }
            let mu = row_means(tape.value(x));
            let xc = tape.center_rows(x)?;
            let s = tape.matmul_t(xc, false, xc, true)?;
            let s = tape.scale(s, 1.0 / m as f64)?;
            let reg = tape.constant(Grid::eye(d).map(|v| v * T::lit(state.eps)));
            let sigma = tape.add(s, reg)?;
            let tr = tape.trace(sigma)?;
            if !(tape.value(tr).item() > T::zero()) {
                return Err(Error::degenerate(
                    "zca_newton",
                    "covariance trace is not positive",
                ));
            }
            let sn = tape.div_scalar(sigma, tr)?;
            let mut p = tape.constant(Grid::eye(d));
            for k in 1..=state.iterations {
                let step = |tape: &mut Tape<T>| -> Result<Var> {
                    let p2 = tape.matmul(p, p)?;
                    let p3 = tape.matmul(p2, p)?;
                    let p3s = tape.matmul(p3, sn)?;
                    let a = tape.scale(p, 1.5)?;
                    let b = tape.scale(p3s, 0.5)?;
                    tape.sub(a, b)
                };
                p = step(tape).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Divergence { iteration: k },
                    e => e,
                })?;
            }
            let root = tape.sqrt(tr)?;
            let w = tape.div_scalar(p, root)?;
            let y = tape.matmul(w, xc)?;
            let batch = BatchWhitening {
                mu,
                w: tape.value(w).clone(),
            };
            Ok((y, Some(batch)))
        }
    }
}

/// Whitening of a `[B, C, H, W]` feature map over its `C` channels with
/// `B·H·W` samples, recorded on the tape.
pub fn whitening_layer_tape<T: Real>(
    tape: &mut Tape<T>,
    fm: Var,
    state: &WhiteningState<T>,
    mode: Mode,
) -> Result<(Var, Option<BatchWhitening<T>>)> {
    let &[b, c, h, w] = tape.shape(fm) else {
        return Err(Error::shape(
            "whitening_layer",
            format!("expected [B, C, H, W], got {:?}", tape.shape(fm)),
        ));
    };
    if mode == Mode::Train && b * h * w < 2 {
        return Err(Error::degenerate(
            "whitening_layer",
            format!(
                "need at least 2 samples across batch and space, got {}",
                b * h * w
            ),
        ));
    }
    let rows = tape.channels_to_rows(fm)?;
    let (y, batch) = zca_newton_tape(tape, rows, state, mode)?;
    Ok((tape.rows_to_channels(y, [b, c, h, w])?, batch))
}

/// Value-level [`zca_newton_tape`]; train mode updates the running state.
pub fn zca_newton<T: Real>(
    x: &Grid<T>,
    state: &mut WhiteningState<T>,
    mode: Mode,
) -> Result<Grid<T>> {
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let (y, batch) = zca_newton_tape(&mut tape, xv, state, mode)?;
    if let Some(b) = batch {
        state.update(&b);
    }
    Ok(tape.value(y).clone())
}

/// Value-level [`whitening_layer_tape`]; train mode updates the running state.
pub fn whitening_layer_apply<T: Real>(
    state: &mut WhiteningState<T>,
    fm: &Grid<T>,
    mode: Mode,
) -> Result<Grid<T>> {
    let mut tape = Tape::no_grad();
    let v = tape.constant(fm.clone());
    let (y, batch) = whitening_layer_tape(&mut tape, v, state, mode)?;
    if let Some(b) = batch {
        state.update(&b);
    }
    Ok(tape.value(y).clone())
}
