//! Primitive operations: forward evaluation and vector-Jacobian products.

use super::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use super::spatial::{
    batch_norm_backward, batch_norm_forward, patch_pool_backward, patch_pool_forward,
    upsample_backward, upsample_forward, BatchNormSaved, ChannelLayout, PatchGeom,
};
use super::{ParamId, Var};
use crate::error::{Error, Result};
use crate::grid::{gemm, Grid, Real};

/// Batch-norm statistics source.
#[derive(Debug, Clone)]
pub enum NormStats<T> {
    /// Statistics from the current batch.
    Batch,
    /// Fixed running mean and variance.
    Running { mean: Vec<T>, var: Vec<T> },
}

#[derive(Debug, Clone)]
pub enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    /// `a · s` with `s` a one-element grid.
    MulScalar(Var, Var),
    /// `a / s` with `s` a one-element grid.
    DivScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Trace(Var),
    /// `[.., n] → [.., 1]`.
    SumLastDim(Var),
    Reshape(Var, Vec<usize>),
    Transpose(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    /// `[B, m, k] × [B, k, n]` (or `[B, n, k]` when `tb`).
    BatchedMatMul {
        a: Var,
        b: Var,
        tb: bool,
    },
    /// `x[.., n] + bias[n]`.
    AddBias {
        x: Var,
        bias: Var,
    },
    ConcatLastDim(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: NormStats<T>,
    },
    GlobalAvgPool(Var),
    PatchAvgPool {
        input: Var,
        geom: PatchGeom,
    },
    /// Normalize along the last axis: `x / (‖x‖ + eps)`.
    L2Normalize {
        input: Var,
        eps: f64,
    },
    Upsample {
        input: Var,
        out_h: usize,
        out_w: usize,
    },
    /// Mean softmax cross-entropy over positions; the class axis is axis 1.
    /// With `include_target = false` the target logit is left out of the
    /// log-sum-exp denominator.
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        include_target: bool,
    },
    /// `[B, C, H, W] → [C, B·H·W]`.
    ChannelsToRows(Var),
    /// `[C, B·H·W] → [B, C, H, W]`.
    RowsToChannels(Var, [usize; 4]),
    /// Subtract each row's mean.
    CenterRows(Var),
    /// `gamma[c]·x + beta[c]` along axis 1.
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::DivScalar(..) => "div_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Trace(_) => "trace",
            Op::SumLastDim(_) => "sum_last_dim",
            Op::Reshape(..) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::MatMul { .. } => "matmul",
            Op::BatchedMatMul { .. } => "batched_matmul",
            Op::AddBias { .. } => "add_bias",
            Op::ConcatLastDim(..) => "concat_last_dim",
            Op::Conv2d { .. } => "conv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::PatchAvgPool { .. } => "patch_avg_pool",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Upsample { .. } => "upsample_bilinear",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::ChannelsToRows(_) => "channels_to_rows",
            Op::RowsToChannels(..) => "rows_to_channels",
            Op::CenterRows(_) => "center_rows",
            Op::ChannelAffine { .. } => "channel_affine",
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MulScalar(a, b)
            | Op::DivScalar(a, b)
            | Op::ConcatLastDim(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Trace(a)
            | Op::SumLastDim(a)
            | Op::Reshape(a, _)
            | Op::Transpose(a)
            | Op::GlobalAvgPool(a)
            | Op::ChannelsToRows(a)
            | Op::RowsToChannels(a, _)
            | Op::CenterRows(a) => vec![*a],
            Op::MatMul { a, b, .. } | Op::BatchedMatMul { a, b, .. } => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::ChannelAffine { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::PatchAvgPool { input, .. }
            | Op::L2Normalize { input, .. }
            | Op::Upsample { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Values kept from the forward pass for the backward pass.
pub enum Saved<T> {
    None,
    BatchNorm(BatchNormSaved<T>),
    Norms(Vec<T>),
    Probs(Vec<T>),
}

fn same_shape<T: Real>(op: &'static str, a: &Grid<T>, b: &Grid<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn one_element<T: Real>(op: &'static str, s: &Grid<T>) -> Result<T> {
    if s.len() != 1 {
        return Err(Error::shape(
            op,
            format!("expected a scalar, got {:?}", s.shape()),
        ));
    }
    Ok(s.item())
}

fn last_dim(shape: &[usize]) -> (usize, usize) {
    let n = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>().checked_div(n).unwrap_or(0);
    (rows, n)
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[b, c, h, w] => Ok([b, c, h, w]),
        s => Err(Error::shape(
            op,
            format!("expected [B, C, H, W], got {s:?}"),
        )),
    }
}

/// `[outer, classes, inner]` view for the cross-entropy class axis.
fn class_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(
            op,
            format!("need at least 2 axes, got {shape:?}"),
        ));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn matmul_dims(
    op: &'static str,
    a: &[usize],
    b: &[usize],
    ta: bool,
    tb: bool,
) -> Result<(usize, usize, usize)> {
    let (&[ar, ac], &[br, bc]) = (a, b) else {
        return Err(Error::shape(
            op,
            format!("expected matrices, got {a:?} and {b:?}"),
        ));
    };
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::shape(
            op,
            format!("inner dims {k} vs {k2} (lhs {a:?}, rhs {b:?})"),
        ));
    }
    Ok((m, k, n))
}

/// Evaluate an op on its input values.
pub fn eval<T: Real>(op: &Op<T>, x: &[&Grid<T>]) -> Result<(Grid<T>, Saved<T>)> {
    let name = op.name();
    let plain = |g: Grid<T>| Ok((g, Saved::None));
    match op {
        Op::Leaf | Op::Param(_) => unreachable!("leaves are not evaluated"),
        Op::Add(..) => {
            same_shape(name, x[0], x[1])?;
            plain(x[0].zip_map(x[1], |a, b| a + b)?)
        }
        Op::Sub(..) => {
            same_shape(name, x[0], x[1])?;
            plain(x[0].zip_map(x[1], |a, b| a - b)?)
        }
        Op::Mul(..) => {
            same_shape(name, x[0], x[1])?;
            plain(x[0].zip_map(x[1], |a, b| a * b)?)
        }
        Op::Div(..) => {
            same_shape(name, x[0], x[1])?;
            plain(x[0].zip_map(x[1], |a, b| a / b)?)
        }
        Op::Scale(_, c) => {
            let c = T::lit(*c);
            plain(x[0].map(|a| a * c))
        }
        Op::MulScalar(..) => {
            let s = one_element(name, x[1])?;
            plain(x[0].map(|a| a * s))
        }
        Op::DivScalar(..) => {
            let s = one_element(name, x[1])?;
            plain(x[0].map(|a| a / s))
        }
        Op::Exp(_) => plain(x[0].map(|a| a.exp())),
        Op::Log(_) => plain(x[0].map(|a| a.ln())),
        Op::Sqrt(_) => plain(x[0].map(|a| a.sqrt())),
        Op::Relu(_) => plain(x[0].map(|a| if a > T::zero() { a } else { T::zero() })),
        Op::Sum(_) => plain(Grid::scalar(x[0].sum())),
        Op::Mean(_) => {
            if x[0].is_empty() {
                return Err(Error::shape(name, "mean of an empty grid"));
            }
            plain(Grid::scalar(
                x[0].sum() / T::from_usize(x[0].len()).unwrap(),
            ))
        }
        Op::Trace(_) => {
            let (r, c) = x[0].as_matrix(name)?;
            if r != c {
                return Err(Error::shape(name, format!("non-square {r}x{c}")));
            }
            plain(Grid::scalar((0..r).map(|i| x[0].data()[i * r + i]).sum()))
        }
        Op::SumLastDim(_) => {
            let (rows, n) = last_dim(x[0].shape());
            let mut shape = x[0].shape().to_vec();
            *shape.last_mut().unwrap() = 1;
            let data = (0..rows)
                .map(|r| x[0].data()[r * n..(r + 1) * n].iter().copied().sum())
                .collect();
            plain(Grid::new(shape, data)?)
        }
        Op::Reshape(_, shape) => {
            let want: usize = shape.iter().product();
            if want != x[0].len() {
                return Err(Error::shape(
                    name,
                    format!("{:?} cannot become {shape:?}", x[0].shape()),
                ));
            }
            plain(Grid::new(shape.clone(), x[0].data().to_vec())?)
        }
        Op::Transpose(_) => plain(x[0].transpose()?),
        Op::MatMul { ta, tb, .. } => {
            let (m, k, n) = matmul_dims(name, x[0].shape(), x[1].shape(), *ta, *tb)?;
            let mut out = vec![T::zero(); m * n];
            gemm(
                m,
                k,
                n,
                T::one(),
                x[0].data(),
                *ta,
                x[1].data(),
                *tb,
                T::zero(),
                &mut out,
            );
            plain(Grid::new(vec![m, n], out)?)
        }
        Op::BatchedMatMul { tb, .. } => {
            let (&[ba, m, k], &[bb, r1, r2]) = (x[0].shape(), x[1].shape()) else {
                return Err(Error::shape(
                    name,
                    format!(
                        "expected rank-3 operands, got {:?} and {:?}",
                        x[0].shape(),
                        x[1].shape()
                    ),
                ));
            };
            let (k2, n) = if *tb { (r2, r1) } else { (r1, r2) };
            if ba != bb || k != k2 {
                return Err(Error::shape(
                    name,
                    format!("{:?} vs {:?}", x[0].shape(), x[1].shape()),
                ));
            }
            let mut out = vec![T::zero(); ba * m * n];
            for b in 0..ba {
                gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &x[0].data()[b * m * k..(b + 1) * m * k],
                    false,
                    &x[1].data()[b * k * n..(b + 1) * k * n],
                    *tb,
                    T::zero(),
                    &mut out[b * m * n..(b + 1) * m * n],
                );
            }
            plain(Grid::new(vec![ba, m, n], out)?)
        }
        Op::AddBias { .. } => {
            let (_, n) = last_dim(x[0].shape());
            if x[1].shape() != [n] {
                return Err(Error::shape(
                    name,
                    format!("bias {:?} for input {:?}", x[1].shape(), x[0].shape()),
                ));
            }
            let b = x[1].data();
            let mut out = x[0].data().to_vec();
            for row in out.chunks_mut(n.max(1)) {
                row.iter_mut().zip(b).for_each(|(v, &bb)| *v += bb);
            }
            plain(Grid::new(x[0].shape().to_vec(), out)?)
        }
        Op::ConcatLastDim(..) => {
            let (&[ra, na], &[rb, nb]) = (x[0].shape(), x[1].shape()) else {
                return Err(Error::shape(
                    name,
                    format!(
                        "expected matrices, got {:?} and {:?}",
                        x[0].shape(),
                        x[1].shape()
                    ),
                ));
            };
            if ra != rb {
                return Err(Error::shape(name, format!("row counts {ra} vs {rb}")));
            }
            let mut out = Vec::with_capacity(ra * (na + nb));
            for r in 0..ra {
                out.extend_from_slice(&x[0].data()[r * na..(r + 1) * na]);
                out.extend_from_slice(&x[1].data()[r * nb..(r + 1) * nb]);
            }
            plain(Grid::new(vec![ra, na + nb], out)?)
        }
        Op::Conv2d { stride, pad, .. } => {
            let g = ConvGeom::new(x[0].shape(), x[1].shape(), *stride, *pad)?;
            let bias = x.get(2).map(|b| b.data());
            if let Some(b) = bias {
                if b.len() != g.cout {
                    return Err(Error::shape(
                        name,
                        format!("bias length {} vs {} output channels", b.len(), g.cout),
                    ));
                }
            }
            let out = conv2d_forward(&g, x[0].data(), x[1].data(), bias);
            plain(Grid::new(g.out_shape(), out)?)
        }
        Op::BatchNorm { eps, stats, .. } => {
            let l = ChannelLayout::of(x[0].shape())
                .ok_or_else(|| Error::shape(name, format!("input {:?}", x[0].shape())))?;
            if x[1].len() != l.channels || x[2].len() != l.channels {
                return Err(Error::shape(
                    name,
                    "affine parameters do not match channel count",
                ));
            }
            let running = match stats {
                NormStats::Batch => {
                    if l.count() < 2 {
                        return Err(Error::degenerate(
                            name,
                            "need at least 2 values per channel",
                        ));
                    }
                    None
                }
                NormStats::Running { mean, var } => {
                    if mean.len() != l.channels || var.len() != l.channels {
                        return Err(Error::shape(
                            name,
                            "running statistics do not match channel count",
                        ));
                    }
                    Some((mean.as_slice(), var.as_slice()))
                }
            };
            let (y, saved) = batch_norm_forward(
                l,
                x[0].data(),
                x[1].data(),
                x[2].data(),
                T::lit(*eps),
                running,
            );
            Ok((
                Grid::new(x[0].shape().to_vec(), y)?,
                Saved::BatchNorm(saved),
            ))
        }
        Op::GlobalAvgPool(_) => {
            let [b, c, h, w] = nchw(name, x[0].shape())?;
            let area = T::from_usize(h * w).unwrap();
            let data = x[0]
                .data()
                .chunks(h * w)
                .map(|p| p.iter().copied().sum::<T>() / area)
                .collect();
            plain(Grid::new(vec![b, c], data)?)
        }
        Op::PatchAvgPool { geom, .. } => {
            let [b, c, h, w] = nchw(name, x[0].shape())?;
            if geom.rows * geom.patch_h > h
                || geom.cols * geom.patch_w > w
                || geom.patch_h == 0
                || geom.patch_w == 0
            {
                return Err(Error::shape(
                    name,
                    format!("patch grid {geom:?} does not fit {h}x{w}"),
                ));
            }
            let out = patch_pool_forward(x[0].data(), x[0].shape(), *geom);
            plain(Grid::new(vec![b, geom.count(), c], out)?)
        }
        Op::L2Normalize { eps, .. } => {
            let (rows, n) = last_dim(x[0].shape());
            let eps = T::lit(*eps);
            let mut norms = Vec::with_capacity(rows);
            let mut out = x[0].data().to_vec();
            for row in out.chunks_mut(n.max(1)).take(rows) {
                let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                let s = nrm + eps;
                row.iter_mut().for_each(|v| *v /= s);
                norms.push(nrm);
            }
            Ok((Grid::new(x[0].shape().to_vec(), out)?, Saved::Norms(norms)))
        }
        Op::Upsample { out_h, out_w, .. } => {
            let [b, c, h, w] = nchw(name, x[0].shape())?;
            if *out_h < h || *out_w < w {
                return Err(Error::shape(
                    name,
                    format!("output {out_h}x{out_w} smaller than input {h}x{w}; downsampling is not supported"),
                ));
            }
            let out = upsample_forward(x[0].data(), b * c, (h, w), (*out_h, *out_w));
            plain(Grid::new(vec![b, c, *out_h, *out_w], out)?)
        }
        Op::CrossEntropy {
            targets,
            include_target,
            ..
        } => {
            let (outer, classes, inner) = class_layout(name, x[0].shape())?;
            if targets.len() != outer * inner {
                return Err(Error::shape(
                    name,
                    format!("{} targets for {} positions", targets.len(), outer * inner),
                ));
            }
            if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
                return Err(Error::invalid(
                    name,
                    format!("target {t} out of range for {classes} classes"),
                ));
            }
            let data = x[0].data();
            let mut probs = vec![T::zero(); data.len()];
            let mut total = 0.0f64;
            for o in 0..outer {
                for i in 0..inner {
                    let t = targets[o * inner + i];
                    let at = |c: usize| (o * classes + c) * inner + i;
                    let included = |c: usize| *include_target || c != t;
                    let mx = (0..classes)
                        .filter(|&c| included(c))
                        .map(|c| data[at(c)])
                        .fold(T::neg_infinity(), T::max);
                    if mx == T::neg_infinity() {
                        // Literal form with no negatives: no contrast, zero loss.
                        continue;
                    }
                    let z: T = (0..classes)
                        .filter(|&c| included(c))
                        .map(|c| (data[at(c)] - mx).exp())
                        .sum();
                    for c in (0..classes).filter(|&c| included(c)) {
                        probs[at(c)] = (data[at(c)] - mx).exp() / z;
                    }
                    total += (mx + z.ln() - data[at(t)]).as_f64();
                }
            }
            let n = (outer * inner).max(1) as f64;
            Ok((Grid::scalar(T::lit(total / n)), Saved::Probs(probs)))
        }
        Op::ChannelsToRows(_) => {
            let [b, c, h, w] = nchw(name, x[0].shape())?;
            let hw = h * w;
            let src = x[0].data();
            let mut out = vec![T::zero(); src.len()];
            for bi in 0..b {
                for ci in 0..c {
                    out[ci * b * hw + bi * hw..ci * b * hw + (bi + 1) * hw]
                        .copy_from_slice(&src[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]);
                }
            }
            plain(Grid::new(vec![c, b * hw], out)?)
        }
        Op::RowsToChannels(_, [b, c, h, w]) => {
            let hw = h * w;
            if x[0].shape() != [*c, b * hw] {
                return Err(Error::shape(
                    name,
                    format!("{:?} cannot become [{b}, {c}, {h}, {w}]", x[0].shape()),
                ));
            }
            let src = x[0].data();
            let mut out = vec![T::zero(); src.len()];
            for bi in 0..*b {
                for ci in 0..*c {
                    out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]
                        .copy_from_slice(&src[ci * b * hw + bi * hw..ci * b * hw + (bi + 1) * hw]);
                }
            }
            plain(Grid::new(vec![*b, *c, *h, *w], out)?)
        }
        Op::CenterRows(_) => {
            let (_, m) = x[0].as_matrix(name)?;
            let mut out = x[0].data().to_vec();
            let mf = T::from_usize(m).unwrap();
            for row in out.chunks_mut(m.max(1)) {
                let mu = row.iter().copied().sum::<T>() / mf;
                row.iter_mut().for_each(|v| *v -= mu);
            }
            plain(Grid::new(x[0].shape().to_vec(), out)?)
        }
        Op::ChannelAffine { .. } => {
            let l = ChannelLayout::of(x[0].shape())
                .ok_or_else(|| Error::shape(name, format!("input {:?}", x[0].shape())))?;
            if x[1].len() != l.channels || x[2].len() != l.channels {
                return Err(Error::shape(
                    name,
                    format!(
                        "affine {:?}/{:?} for {} channels",
                        x[1].shape(),
                        x[2].shape(),
                        l.channels
                    ),
                ));
            }
            let (gm, bt) = (x[1].data(), x[2].data());
            let mut out = x[0].data().to_vec();
            for (i, v) in out.iter_mut().enumerate() {
                let c = (i / l.inner.max(1)) % l.channels;
                *v = gm[c] * *v + bt[c];
            }
            plain(Grid::new(x[0].shape().to_vec(), out)?)
        }
    }
}

/// Vector-Jacobian product. Returns one entry per input (in [`Op::inputs`]
/// order); entries whose `needs` flag is false may be `None`.
pub fn vjp<T: Real>(
    op: &Op<T>,
    x: &[&Grid<T>],
    out: &Grid<T>,
    saved: &Saved<T>,
    g: &Grid<T>,
    needs: &[bool],
) -> Result<Vec<Option<Grid<T>>>> {
    let shaped = |like: &Grid<T>, data: Vec<T>| Grid::new(like.shape().to_vec(), data);
    let gd = g.data();
    Ok(match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::Add(..) => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub(..) => vec![Some(g.clone()), Some(g.map(|v| -v))],
        Op::Mul(..) => vec![
            needs[0]
                .then(|| g.zip_map(x[1], |a, b| a * b))
                .transpose()?,
            needs[1]
                .then(|| g.zip_map(x[0], |a, b| a * b))
                .transpose()?,
        ],
        Op::Div(..) => vec![
            needs[0]
                .then(|| g.zip_map(x[1], |a, b| a / b))
                .transpose()?,
            needs[1]
                .then(|| {
                    let t = g.zip_map(out, |a, y| a * y)?;
                    t.zip_map(x[1], |a, b| -a / b)
                })
                .transpose()?,
        ],
        Op::Scale(_, c) => {
            let c = T::lit(*c);
            vec![Some(g.map(|v| v * c))]
        }
        Op::MulScalar(..) => {
            let s = x[1].item();
            vec![
                needs[0].then(|| g.map(|v| v * s)),
                needs[1]
                    .then(|| Grid::scalar(gd.iter().zip(x[0].data()).map(|(&a, &b)| a * b).sum())),
            ]
        }
        Op::DivScalar(..) => {
            let s = x[1].item();
            vec![
                needs[0].then(|| g.map(|v| v / s)),
                needs[1].then(|| {
                    let dot: T = gd.iter().zip(x[0].data()).map(|(&a, &b)| a * b).sum();
                    Grid::scalar(-dot / (s * s))
                }),
            ]
        }
        Op::Exp(_) => vec![Some(g.zip_map(out, |a, y| a * y)?)],
        Op::Log(_) => vec![Some(g.zip_map(x[0], |a, v| a / v)?)],
        Op::Sqrt(_) => vec![Some(g.zip_map(out, |a, y| a / (y + y))?)],
        Op::Relu(_) => vec![Some(g.zip_map(x[0], |a, v| {
            if v > T::zero() {
                a
            } else {
                T::zero()
            }
        })?)],
        Op::Sum(_) => vec![Some(Grid::full(x[0].shape(), g.item()))],
        Op::Mean(_) => {
            let n = T::from_usize(x[0].len()).unwrap();
            vec![Some(Grid::full(x[0].shape(), g.item() / n))]
        }
        Op::Trace(_) => {
            let n = x[0].dim(0);
            let s = g.item();
            vec![Some(Grid::from_fn(x[0].shape(), |i| {
                if i / n == i % n {
                    s
                } else {
                    T::zero()
                }
            }))]
        }
        Op::SumLastDim(_) => {
            let (_, n) = last_dim(x[0].shape());
            let data = (0..x[0].len()).map(|i| gd[i / n]).collect();
            vec![Some(shaped(x[0], data)?)]
        }
        Op::Reshape(..) => vec![Some(shaped(x[0], gd.to_vec())?)],
        Op::Transpose(_) => vec![Some(g.transpose()?)],
        Op::MatMul { ta, tb, .. } => {
            let (m, k, n) = matmul_dims("matmul", x[0].shape(), x[1].shape(), *ta, *tb)?;
            let da = needs[0].then(|| {
                let mut d = vec![T::zero(); m * k];
                if *ta {
                    // A is stored k×m: dA = op(B) · gᵀ.
                    gemm(
                        k,
                        n,
                        m,
                        T::one(),
                        x[1].data(),
                        *tb,
                        gd,
                        true,
                        T::zero(),
                        &mut d,
                    );
                } else {
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gd,
                        false,
                        x[1].data(),
                        !*tb,
                        T::zero(),
                        &mut d,
                    );
                }
                shaped(x[0], d)
            });
            let db = needs[1].then(|| {
                let mut d = vec![T::zero(); k * n];
                if *tb {
                    // B is stored n×k: dB = gᵀ · op(A).
                    gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        gd,
                        true,
                        x[0].data(),
                        *ta,
                        T::zero(),
                        &mut d,
                    );
                } else {
                    gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        x[0].data(),
                        !*ta,
                        gd,
                        false,
                        T::zero(),
                        &mut d,
                    );
                }
                shaped(x[1], d)
            });
            vec![da.transpose()?, db.transpose()?]
        }
        Op::BatchedMatMul { tb, .. } => {
            let (bsz, m, k) = (x[0].dim(0), x[0].dim(1), x[0].dim(2));
            let n = out.dim(2);
            let mut da = vec![T::zero(); if needs[0] { bsz * m * k } else { 0 }];
            let mut db = vec![T::zero(); if needs[1] { bsz * k * n } else { 0 }];
            for b in 0..bsz {
                let gb = &gd[b * m * n..(b + 1) * m * n];
                let ab = &x[0].data()[b * m * k..(b + 1) * m * k];
                let bb = &x[1].data()[b * k * n..(b + 1) * k * n];
                if needs[0] {
                    gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gb,
                        false,
                        bb,
                        !*tb,
                        T::zero(),
                        &mut da[b * m * k..(b + 1) * m * k],
                    );
                }
                if needs[1] {
                    let d = &mut db[b * k * n..(b + 1) * k * n];
                    if *tb {
                        gemm(n, m, k, T::one(), gb, true, ab, false, T::zero(), d);
                    } else {
                        gemm(k, m, n, T::one(), ab, true, gb, false, T::zero(), d);
                    }
                }
            }
            vec![
                needs[0].then(|| shaped(x[0], da)).transpose()?,
                needs[1].then(|| shaped(x[1], db)).transpose()?,
            ]
        }
        Op::AddBias { .. } => {
            let (_, n) = last_dim(x[0].shape());
            let db = needs[1].then(|| {
                let mut d = vec![T::zero(); n];
                for row in gd.chunks(n.max(1)) {
                    d.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
                Grid::from_vec(d)
            });
            vec![Some(g.clone()), db]
        }
        Op::ConcatLastDim(..) => {
            let (ra, na) = (x[0].dim(0), x[0].dim(1));
            let nb = x[1].dim(1);
            let mut da = Vec::with_capacity(ra * na);
            let mut db = Vec::with_capacity(ra * nb);
            for r in 0..ra {
                let row = &gd[r * (na + nb)..(r + 1) * (na + nb)];
                da.extend_from_slice(&row[..na]);
                db.extend_from_slice(&row[na..]);
            }
            vec![Some(shaped(x[0], da)?), Some(shaped(x[1], db)?)]
        }
        Op::Conv2d { stride, pad, .. } => {
            let geom = ConvGeom::new(x[0].shape(), x[1].shape(), *stride, *pad)?;
            let need_bias = needs.get(2).copied().unwrap_or(false);
            let gr = conv2d_backward(
                &geom,
                x[0].data(),
                x[1].data(),
                gd,
                needs[0],
                needs[1],
                need_bias,
            );
            let mut v = vec![
                gr.input.map(|d| shaped(x[0], d)).transpose()?,
                gr.weight.map(|d| shaped(x[1], d)).transpose()?,
            ];
            if x.len() > 2 {
                v.push(gr.bias.map(Grid::from_vec));
            }
            v
        }
        Op::BatchNorm { stats, .. } => {
            let Saved::BatchNorm(s) = saved else {
                unreachable!("batch norm saves its statistics")
            };
            let l = ChannelLayout::of(x[0].shape()).expect("validated in forward");
            let batch = matches!(stats, NormStats::Batch);
            let (dx, dg, db) = batch_norm_backward(l, s, x[1].data(), gd, batch);
            vec![
                Some(shaped(x[0], dx)?),
                Some(shaped(x[1], dg)?),
                Some(shaped(x[2], db)?),
            ]
        }
        Op::GlobalAvgPool(_) => {
            let [_, _, h, w] = nchw("global_avg_pool", x[0].shape())?;
            let area = T::from_usize(h * w).unwrap();
            let data = (0..x[0].len()).map(|i| gd[i / (h * w)] / area).collect();
            vec![Some(shaped(x[0], data)?)]
        }
        Op::PatchAvgPool { geom, .. } => {
            vec![Some(shaped(
                x[0],
                patch_pool_backward(gd, x[0].shape(), *geom),
            )?)]
        }
        Op::L2Normalize { eps, .. } => {
            let Saved::Norms(norms) = saved else {
                unreachable!("l2 normalize saves norms")
            };
            let (rows, n) = last_dim(x[0].shape());
            let eps = T::lit(*eps);
            let mut dx = vec![T::zero(); x[0].len()];
            for r in 0..rows {
                let xs = &x[0].data()[r * n..(r + 1) * n];
                let gs = &gd[r * n..(r + 1) * n];
                let nrm = norms[r];
                let s = nrm + eps;
                let dot: T = xs.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                let coef = if nrm > T::zero() {
                    dot / (s * s * nrm)
                } else {
                    T::zero()
                };
                for ((d, &xv), &gv) in dx[r * n..(r + 1) * n].iter_mut().zip(xs).zip(gs) {
                    *d = gv / s - xv * coef;
                }
            }
            vec![Some(shaped(x[0], dx)?)]
        }
        Op::Upsample { out_h, out_w, .. } => {
            let [b, c, h, w] = nchw("upsample_bilinear", x[0].shape())?;
            vec![Some(shaped(
                x[0],
                upsample_backward(gd, b * c, (h, w), (*out_h, *out_w)),
            )?)]
        }
        Op::CrossEntropy { targets, .. } => {
            let Saved::Probs(probs) = saved else {
                unreachable!("cross entropy saves probabilities")
            };
            let (outer, classes, inner) = class_layout("cross_entropy", x[0].shape())?;
            let scale = g.item() / T::from_usize((outer * inner).max(1)).unwrap();
            let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for o in 0..outer {
                for i in 0..inner {
                    let t = targets[o * inner + i];
                    let pos = (o * classes + t) * inner + i;
                    let has_negatives = (0..classes)
                        .any(|c| c != t && probs[(o * classes + c) * inner + i] > T::zero())
                        || probs[pos] > T::zero();
                    if has_negatives {
                        dx[pos] -= scale;
                    }
                }
            }
            vec![Some(shaped(x[0], dx)?)]
        }
        Op::ChannelsToRows(_) => {
            let [b, c, h, w] = nchw("channels_to_rows", x[0].shape())?;
            let back = Op::<T>::RowsToChannels(Var(0), [b, c, h, w]);
            vec![Some(eval(&back, &[g])?.0)]
        }
        Op::RowsToChannels(..) => {
            let back = Op::<T>::ChannelsToRows(Var(0));
            vec![Some(eval(&back, &[g])?.0)]
        }
        Op::CenterRows(_) => {
            let back = Op::<T>::CenterRows(Var(0));
            vec![Some(eval(&back, &[g])?.0)]
        }
        Op::ChannelAffine { .. } => {
            let l = ChannelLayout::of(x[0].shape()).expect("validated in forward");
            let inner = l.inner.max(1);
            let gm = x[1].data();
            let mut dx = vec![T::zero(); gd.len()];
            let mut dg = vec![T::zero(); l.channels];
            let mut db = vec![T::zero(); l.channels];
            for (i, (&gv, &xv)) in gd.iter().zip(x[0].data()).enumerate() {
                let c = (i / inner) % l.channels;
                dx[i] = gv * gm[c];
                dg[c] += gv * xv;
                db[c] += gv;
            }
            vec![
                Some(shaped(x[0], dx)?),
                Some(shaped(x[1], dg)?),
                Some(shaped(x[2], db)?),
            ]
        }
    })
}
