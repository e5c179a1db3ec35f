//! Tape-based reverse-mode automatic differentiation over [`Grid`]s.
//!
//! Every operation is evaluated eagerly and recorded in order, so the tape
//! is topologically sorted by construction. [`Tape::backward`] walks it in
//! reverse and accumulates vector-Jacobian products.

mod conv;
mod gradcheck;
mod ops;
mod spatial;

use std::collections::BTreeMap;

pub use conv::ConvGeom;
pub use gradcheck::{finite_difference_check, finite_difference_check_at};
pub use ops::{NormStats, Op};
pub use spatial::{bilinear_taps, PatchGeom};

use crate::error::{Error, Result};
use crate::grid::{Grid, Real};
use ops::Saved;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifier of a trainable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Gradient for every requested parameter, same shapes as the parameters.
pub type GradientMap<T> = BTreeMap<ParamId, Grid<T>>;

struct Node<T> {
    op: Op<T>,
    value: Grid<T>,
    saved: Saved<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values but never tracks gradients.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Grid<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op(&self, v: Var) -> &Op<T> {
        &self.nodes[v.0].op
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Grid<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            saved: Saved::None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a parameter. Registering the same id twice returns the
    /// existing node.
    pub fn param(&mut self, id: ParamId, value: &Grid<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: value.clone(),
            saved: Saved::None,
            requires_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    /// Stop-gradient copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Batch mean and variance computed by a batch-norm node.
    pub fn batch_norm_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match (&self.nodes[v.0].op, &self.nodes[v.0].saved) {
            (Op::BatchNorm { .. }, Saved::BatchNorm(s)) => Some((&s.mean, &s.var)),
            _ => None,
        }
    }

    pub fn push(&mut self, op: Op<T>) -> Result<Var> {
        let inputs = op.inputs();
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let (value, saved) = {
            let vals: Vec<&Grid<T>> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            ops::eval(&op, &vals)?
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            op,
            value,
            saved,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Recompute every node from its recorded inputs, substituting the given
    /// leaf/parameter values.
    pub fn replay(&self, overrides: &[(Var, Grid<T>)]) -> Result<Vec<Grid<T>>> {
        let mut values: Vec<Grid<T>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match node.op {
                Op::Leaf | Op::Param(_) => overrides
                    .iter()
                    .find(|(var, _)| var.0 == i)
                    .map(|(_, g)| g.clone())
                    .unwrap_or_else(|| node.value.clone()),
                _ => {
                    let vals: Vec<&Grid<T>> =
                        node.op.inputs().iter().map(|x| &values[x.0]).collect();
                    ops::eval(&node.op, &vals)?.0
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse accumulation of `seed · ∂output/∂θ` for the requested
    /// parameters. Parameters registered but unused get zero gradients;
    /// parameters never registered are an error.
    pub fn backward(
        &self,
        output: Var,
        seed: &Grid<T>,
        wanted: &[ParamId],
    ) -> Result<GradientMap<T>> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward", "empty tape"));
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), self.shape(output)),
            ));
        }
        for id in wanted {
            if !self.params.contains_key(id) {
                return Err(Error::Disconnected(format!("#{}", id.0)));
            }
        }
        let mut grads: Vec<Option<Grid<T>>> = (0..=output.0).map(|_| None).collect();
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed.clone());
        }
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Param(_) | Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let inputs = node.op.inputs();
            let needs: Vec<bool> = inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let vals: Vec<&Grid<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let contributions = ops::vjp(&node.op, &vals, &node.value, &node.saved, &g, &needs)?;
            for ((input, contrib), need) in inputs.iter().zip(contributions).zip(needs) {
                let (Some(c), true) = (contrib, need) else {
                    continue;
                };
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(c.data())
                        .for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let mut out = GradientMap::new();
        for id in wanted {
            let v = self.params[id];
            let grad = if v.0 <= output.0 {
                grads[v.0].take()
            } else {
                None
            };
            out.insert(
                *id,
                grad.unwrap_or_else(|| Grid::zeros(self.value(v).shape())),
            );
        }
        Ok(out)
    }

    /// Gradients of a scalar output for every registered parameter.
    pub fn backward_scalar(&self, output: Var) -> Result<GradientMap<T>> {
        let ids: Vec<ParamId> = self.params.keys().copied().collect();
        self.backward(output, &Grid::scalar(T::one()), &ids)
    }

    // ---- primitive constructors ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.push(Op::MulScalar(a, s))
    }

    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.push(Op::DivScalar(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Trace(a))
    }

    pub fn sum_last_dim(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumLastDim(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        self.push(Op::MatMul { a, b, ta, tb })
    }

    pub fn batched_matmul(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        self.push(Op::BatchedMatMul { a, b, tb })
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddBias { x, bias })
    }

    pub fn concat_last_dim(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::ConcatLastDim(a, b))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.push(Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: NormStats<T>,
    ) -> Result<Var> {
        self.push(Op::BatchNorm {
            input,
            gamma,
            beta,
            eps,
            stats,
        })
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        self.push(Op::GlobalAvgPool(a))
    }

    pub fn patch_avg_pool(&mut self, input: Var, geom: PatchGeom) -> Result<Var> {
        self.push(Op::PatchAvgPool { input, geom })
    }

    pub fn l2_normalize(&mut self, input: Var, eps: f64) -> Result<Var> {
        self.push(Op::L2Normalize { input, eps })
    }

    pub fn upsample_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.push(Op::Upsample {
            input,
            out_h,
            out_w,
        })
    }

    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        include_target: bool,
    ) -> Result<Var> {
        self.push(Op::CrossEntropy {
            logits,
            targets,
            include_target,
        })
    }

    pub fn channels_to_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::ChannelsToRows(a))
    }

    pub fn rows_to_channels(&mut self, a: Var, shape: [usize; 4]) -> Result<Var> {
        self.push(Op::RowsToChannels(a, shape))
    }

    pub fn center_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::CenterRows(a))
    }

    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.push(Op::ChannelAffine { x, gamma, beta })
    }
}

#[cfg(test)]
mod tests;
