//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles in
//! execution order, so the tape is already a topological order and
//! `backward` is a single reverse sweep. A graph belongs to one execution
//! context; build one per forward pass.

use crate::error::{Error, Result};
use crate::objectives;
use crate::ops::{self, ConvSpec};
use crate::tensor::{numel, Element, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    AvgPoolTemporal {
        x: Var,
        factor: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<F>,
        rstd: Vec<F>,
    },
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    /// Scalar loss whose gradient w.r.t. `x` was computed during the forward pass.
    Loss {
        x: Var,
        grad: Vec<F>,
    },
    Released,
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Recording of one forward computation.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    released: bool,
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            released: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        value.requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        value.clear_grad();
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Record an input tensor. Its `requires_grad` flag is kept as given.
    pub fn leaf(&mut self, mut tensor: Tensor<F>) -> Var {
        tensor.clear_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<F>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn parameter(&mut self, tensor: Tensor<F>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad()
    }

    pub fn into_value(mut self, v: Var) -> Tensor<F> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(vec![0]))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let out = ops::conv3d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            out,
            Op::Conv3d {
                x,
                w,
                b,
                spec: *spec,
            },
            &inputs,
        ))
    }

    pub fn upsample_spatial(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = ops::upsample_spatial(self.value(x), factor)?;
        Ok(self.push(out, Op::Upsample { x, factor }, &[x]))
    }

    pub fn avg_pool_temporal(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = ops::avg_pool_temporal(self.value(x), factor)?;
        Ok(self.push(out, Op::AvgPoolTemporal { x, factor }, &[x]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let out = ops::bmm(self.value(a), self.value(b), transpose_b)?;
        Ok(self.push(out, Op::Bmm { a, b, transpose_b }, &[a, b]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let ln = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            ln.output,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized: ln.normalized,
                rstd: ln.rstd,
            },
            &[x, gamma, beta],
        ))
    }

    fn map(&mut self, x: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let v = self.value(x);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
            .expect("same shape")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |v| v.max(F::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, ops::sigmoid_scalar);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.map(x, ops::gelu_scalar);
        self.push(out, Op::Gelu(x), &[x])
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.map(x, |v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = ops::permute(self.value(x), perm)?;
        Ok(self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    /// Negative Pearson correlation between a prediction and a fixed target.
    ///
    /// With `strict == false` a constant input yields 0 with zero gradient
    /// instead of an error.
    pub fn cc_loss(&mut self, s: Var, target: &Tensor<F>, strict: bool) -> Result<Var> {
        let pred = self.value(s);
        let (value, grad) = objectives::cc_loss_with_grad(pred.data(), target.data(), strict)?;
        self.loss_node(s, value, grad)
    }

    /// KL divergence of the normalized target from the normalized prediction.
    pub fn kl_loss(&mut self, s: Var, target: &Tensor<F>) -> Result<Var> {
        let pred = self.value(s);
        let (value, grad) = objectives::kl_loss_with_grad(pred.data(), target.data())?;
        self.loss_node(s, value, grad)
    }

    fn loss_node(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        let grad = grad.into_iter().map(F::from_f64_lossy).collect();
        Ok(self.push(
            Tensor::scalar(F::from_f64_lossy(value)),
            Op::Loss { x, grad },
            &[x],
        ))
    }

    /// Reverse sweep from a one-element `loss`, storing gradients on every
    /// node that requires them. Gradients accumulate across repeated calls.
    ///
    /// Without `retain` the saved forward state is dropped and any later
    /// call fails.
    pub fn backward(&mut self, loss: Var, retain: bool) -> Result<()> {
        if self.released {
            return Err(Error::Graph(
                "graph already released by a previous backward; pass retain = true to differentiate twice"
                    .into(),
            ));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.requires_grad {
            return Err(Error::Graph(
                "loss does not depend on any tensor that requires grad".into(),
            ));
        }

        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            let node = &mut self.nodes[i].value;
            let merged = match node.grad() {
                Some(prev) => prev.iter().zip(&g).map(|(&a, &b)| a + b).collect(),
                None => g,
            };
            node.set_grad(merged)?;
        }

        if !retain {
            for node in &mut self.nodes {
                node.op = Op::Released;
            }
            self.released = true;
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: Vec<F>| {
            debug_assert_eq!(delta.len(), self.nodes[v.0].value.len());
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Released => {
                return Err(Error::Graph("backward through a released node".into()));
            }
            Op::Conv3d { x, w, b, spec } => {
                let need = [self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b))];
                let cg = ops::conv3d_backward(self.value(*x), self.value(*w), spec, g, need)?;
                if let Some(d) = cg.input {
                    acc(*x, d);
                }
                if let Some(d) = cg.weight {
                    acc(*w, d);
                }
                if let (Some(b), Some(d)) = (b, cg.bias) {
                    acc(*b, d);
                }
            }
            Op::Upsample { x, factor } => {
                if self.needs(*x) {
                    acc(*x, ops::upsample_spatial_backward(self.shape(*x), *factor, g));
                }
            }
            Op::AvgPoolTemporal { x, factor } => {
                if self.needs(*x) {
                    acc(*x, ops::avg_pool_temporal_backward(self.shape(*x), *factor, g));
                }
            }
            Op::Linear { x, w, b } => {
                let need = [self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b))];
                let lg = ops::linear_backward(self.value(*x), self.value(*w), g, need)?;
                if let Some(d) = lg.input {
                    acc(*x, d);
                }
                if let Some(d) = lg.weight {
                    acc(*w, d);
                }
                if let (Some(b), Some(d)) = (b, lg.bias) {
                    acc(*b, d);
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let need = [self.needs(*a), self.needs(*b)];
                let (ga, gb) =
                    ops::bmm_backward(self.value(*a), self.value(*b), *transpose_b, g, need)?;
                if let Some(d) = ga {
                    acc(*a, d);
                }
                if let Some(d) = gb {
                    acc(*b, d);
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    acc(*x, ops::softmax_backward(&node.value, *axis, g));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            } => {
                let need = [self.needs(*x), self.needs(*gamma), self.needs(*beta)];
                let (gx, gg, gb) =
                    ops::layer_norm_backward(normalized, rstd, self.value(*gamma), g, need);
                if let Some(d) = gx {
                    acc(*x, d);
                }
                if let Some(d) = gg {
                    acc(*gamma, d);
                }
                if let Some(d) = gb {
                    acc(*beta, d);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    xv.iter()
                        .zip(g)
                        .map(|(&v, &d)| if v > F::zero() { d } else { F::zero() })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(
                    *x,
                    y.iter().zip(g).map(|(&s, &d)| d * s * (F::one() - s)).collect(),
                );
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    xv.iter()
                        .zip(g)
                        .map(|(&v, &d)| d * ops::gelu_grad_scalar(v))
                        .collect(),
                );
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.to_vec());
                }
                if self.needs(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    acc(*a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                }
                if self.needs(*b) {
                    acc(*b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|&d| d * *s).collect()),
            Op::Sum(x) => acc(*x, vec![g[0]; numel(self.shape(*x))]),
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Permute { x, perm } => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())?;
                let back = ops::permute(&gt, &ops::inverse_permutation(perm))?;
                acc(*x, back.into_data());
            }
            Op::Loss { x, grad } => acc(*x, grad.iter().map(|&d| d * g[0]).collect()),
        }
        Ok(())
    }
}
