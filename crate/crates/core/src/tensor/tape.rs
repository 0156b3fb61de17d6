use std::sync::Arc;

use crate::error::{Error, Result};

use super::kernels::{self, LayerNormCache};
use super::{Scalar, Tensor};

/// Handle to a value produced on a [`Tape`].
///
/// Values are shared, never mutated. A var without a node id is a constant:
/// nothing upstream of it requires a gradient.
#[derive(Clone, Debug)]
pub struct Var<T> {
    id: Option<usize>,
    value: Arc<Tensor<T>>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul,
    Bmm { transpose_b: bool },
    Add,
    Sub,
    Mul,
    Div,
    Scale(T),
    AddScalar,
    Relu,
    Sigmoid,
    Ln,
    Softmax,
    LayerNorm(LayerNormCache<T>),
    Conv1d { stride: usize },
    ConvTranspose1d { stride: usize },
    Reshape,
    Permute(Vec<usize>),
    Slice { axis: usize, start: usize },
    Concat { axis: usize },
    Sum,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Ln => "ln",
            Op::Softmax => "softmax",
            Op::LayerNorm(_) => "layernorm",
            Op::Conv1d { .. } => "conv1d",
            Op::ConvTranspose1d { .. } => "transposed_conv1d",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Sum => "sum",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<Var<T>>,
    out: Arc<Tensor<T>>,
}

/// Linear record of differentiable operations.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and [`Tape::backward`] simply walks the list in reverse. A tape built with
/// [`Tape::inference`] records nothing and retains no intermediates.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward pass, indexed by var.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.id.and_then(|i| self.grads.get(i)?.as_ref())
    }

    /// Gradient of `var`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that only evaluates; every var it returns is a constant.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a trainable leaf.
    pub fn param(&mut self, value: impl Into<Arc<Tensor<T>>>) -> Var<T> {
        let value = value.into();
        if !self.record {
            return Var { id: None, value };
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            out: value.clone(),
        });
        Var {
            id: Some(id),
            value,
        }
    }

    pub fn constant(&self, value: impl Into<Arc<Tensor<T>>>) -> Var<T> {
        Var {
            id: None,
            value: value.into(),
        }
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var<T>>, out: Tensor<T>) -> Result<Var<T>> {
        if !out.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let out = Arc::new(out);
        if !self.record || inputs.iter().all(|v| v.id.is_none()) {
            return Ok(Var {
                id: None,
                value: out,
            });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            out: out.clone(),
        });
        Ok(Var {
            id: Some(id),
            value: out,
        })
    }

    /// `a[..., m, k] · b[k, n]`.
    pub fn matmul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = kernels::matmul(&a.value, &b.value)?;
        self.push(Op::MatMul, vec![a.clone(), b.clone()], out)
    }

    /// Batched product `a[B,m,k] · b[B,k,n]` (or `· b[B,n,k]ᵀ`).
    pub fn bmm(&mut self, a: &Var<T>, b: &Var<T>, transpose_b: bool) -> Result<Var<T>> {
        let out = kernels::bmm(&a.value, &b.value, transpose_b)?;
        self.push(Op::Bmm { transpose_b }, vec![a.clone(), b.clone()], out)
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = kernels::zip_broadcast(&a.value, &b.value, "add", |x, y| x + y)?;
        self.push(Op::Add, vec![a.clone(), b.clone()], out)
    }

    pub fn sub(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = kernels::zip_broadcast(&a.value, &b.value, "sub", |x, y| x - y)?;
        self.push(Op::Sub, vec![a.clone(), b.clone()], out)
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = kernels::zip_broadcast(&a.value, &b.value, "mul", |x, y| x * y)?;
        self.push(Op::Mul, vec![a.clone(), b.clone()], out)
    }

    pub fn div(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = kernels::zip_broadcast(&a.value, &b.value, "div", |x, y| x / y)?;
        self.push(Op::Div, vec![a.clone(), b.clone()], out)
    }

    pub fn scale(&mut self, a: &Var<T>, c: f64) -> Result<Var<T>> {
        let c = T::from_f64(c);
        let out = a.value.map(|v| v * c);
        self.push(Op::Scale(c), vec![a.clone()], out)
    }

    pub fn add_scalar(&mut self, a: &Var<T>, c: f64) -> Result<Var<T>> {
        let c = T::from_f64(c);
        let out = a.value.map(|v| v + c);
        self.push(Op::AddScalar, vec![a.clone()], out)
    }

    pub fn relu(&mut self, a: &Var<T>) -> Result<Var<T>> {
        let out = a.value.map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.push(Op::Relu, vec![a.clone()], out)
    }

    pub fn sigmoid(&mut self, a: &Var<T>) -> Result<Var<T>> {
        let out = a.value.map(|v| {
            // split by sign so exp never overflows
            if v >= T::ZERO {
                T::ONE / (T::ONE + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::ONE + e)
            }
        });
        self.push(Op::Sigmoid, vec![a.clone()], out)
    }

    pub fn ln(&mut self, a: &Var<T>) -> Result<Var<T>> {
        if a.value.data().iter().any(|&v| v <= T::ZERO) {
            return Err(Error::NonFinite("ln of non-positive value".into()));
        }
        let out = a.value.map(|v| v.ln());
        self.push(Op::Ln, vec![a.clone()], out)
    }

    pub fn softmax(&mut self, a: &Var<T>) -> Result<Var<T>> {
        let out = kernels::softmax_lastdim(&a.value)?;
        self.push(Op::Softmax, vec![a.clone()], out)
    }

    pub fn layernorm(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
    ) -> Result<Var<T>> {
        let (out, cache) = kernels::layernorm(&x.value, &gamma.value, &beta.value, eps)?;
        // the cache is only needed if this node is recorded
        let cache = if self.record {
            cache
        } else {
            LayerNormCache {
                xhat: Tensor::zeros(&[0]),
                rstd: Vec::new(),
            }
        };
        self.push(
            Op::LayerNorm(cache),
            vec![x.clone(), gamma.clone(), beta.clone()],
            out,
        )
    }

    pub fn conv1d(&mut self, x: &Var<T>, weight: &Var<T>, stride: usize) -> Result<Var<T>> {
        let out = kernels::conv1d(&x.value, &weight.value, stride)?;
        self.push(Op::Conv1d { stride }, vec![x.clone(), weight.clone()], out)
    }

    pub fn conv_transpose1d(
        &mut self,
        h: &Var<T>,
        weight: &Var<T>,
        stride: usize,
    ) -> Result<Var<T>> {
        let out = kernels::conv_transpose1d(&h.value, &weight.value, stride)?;
        self.push(
            Op::ConvTranspose1d { stride },
            vec![h.clone(), weight.clone()],
            out,
        )
    }

    pub fn reshape(&mut self, a: &Var<T>, shape: &[usize]) -> Result<Var<T>> {
        let out = (*a.value).clone().reshape(shape)?;
        self.push(Op::Reshape, vec![a.clone()], out)
    }

    pub fn permute(&mut self, a: &Var<T>, axes: &[usize]) -> Result<Var<T>> {
        let out = kernels::permute(&a.value, axes)?;
        self.push(Op::Permute(axes.to_vec()), vec![a.clone()], out)
    }

    pub fn slice(&mut self, a: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let out = kernels::slice_axis(&a.value, axis, start, len)?;
        self.push(Op::Slice { axis, start }, vec![a.clone()], out)
    }

    pub fn concat(&mut self, parts: &[&Var<T>], axis: usize) -> Result<Var<T>> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|v| &*v.value).collect();
        let out = kernels::concat(&values, axis)?;
        self.push(
            Op::Concat { axis },
            parts.iter().map(|&v| v.clone()).collect(),
            out,
        )
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: &Var<T>) -> Result<Var<T>> {
        let out = Tensor::scalar(a.value.sum());
        self.push(Op::Sum, vec![a.clone()], out)
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(&y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a one-element `output`.
    pub fn backward(&self, output: &Var<T>) -> Result<Gradients<T>> {
        if output.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                output.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let Some(root) = output.id else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::ones(output.shape()));
        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let input_grads = self.node_backward(node, &g)?;
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                if let (Some(iid), Some(ig)) = (input.id, ig) {
                    add_into(&mut grads[iid], ig);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let want = |i: usize| node.inputs[i].id.is_some();
        let val = |i: usize| &*node.inputs[i].value;
        let out = &*node.out;
        let grads = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul => vec![
                want(0).then(|| kernels::matmul_nt(g, val(1))),
                want(1).then(|| kernels::matmul_tn(val(0), g)),
            ],
            Op::Bmm { transpose_b } => {
                let (da, db) = kernels::bmm_backward(val(0), val(1), g, *transpose_b);
                vec![want(0).then_some(da), want(1).then_some(db)]
            }
            Op::Add => vec![
                want(0).then(|| g.clone()),
                want(1).then(|| kernels::reduce_to(g, val(1).shape())),
            ],
            Op::Sub => vec![
                want(0).then(|| g.clone()),
                want(1).then(|| kernels::reduce_to(g, val(1).shape()).map(|v| -v)),
            ],
            Op::Mul => vec![
                if want(0) {
                    Some(kernels::zip_broadcast(g, val(1), "mul", |a, b| a * b)?)
                } else {
                    None
                },
                if want(1) {
                    let prod = kernels::zip_broadcast(g, val(0), "mul", |a, b| a * b)?;
                    Some(kernels::reduce_to(&prod, val(1).shape()))
                } else {
                    None
                },
            ],
            Op::Div => vec![
                if want(0) {
                    Some(kernels::zip_broadcast(g, val(1), "div", |a, b| a / b)?)
                } else {
                    None
                },
                if want(1) {
                    // d(a/b)/db = -out/b
                    let t = kernels::zip_broadcast(g, out, "div", |a, b| a * b)?;
                    let t = kernels::zip_broadcast(&t, val(1), "div", |a, b| -a / b)?;
                    Some(kernels::reduce_to(&t, val(1).shape()))
                } else {
                    None
                },
            ],
            Op::Scale(c) => vec![Some(g.map(|v| v * *c))],
            Op::AddScalar => vec![Some(g.clone())],
            Op::Relu => {
                let x = val(0);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > T::ZERO { gv } else { T::ZERO })
                    .collect();
                vec![Some(Tensor::new(g.shape(), data)?)]
            }
            Op::Sigmoid => {
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (T::ONE - y))
                    .collect();
                vec![Some(Tensor::new(g.shape(), data)?)]
            }
            Op::Ln => {
                let data = g
                    .data()
                    .iter()
                    .zip(val(0).data())
                    .map(|(&gv, &x)| gv / x)
                    .collect();
                vec![Some(Tensor::new(g.shape(), data)?)]
            }
            Op::Softmax => vec![Some(kernels::softmax_backward(out, g))],
            Op::LayerNorm(cache) => {
                let (dx, dg, db) = kernels::layernorm_backward(cache, val(1), g);
                vec![
                    want(0).then_some(dx),
                    want(1).then_some(dg),
                    want(2).then_some(db),
                ]
            }
            Op::Conv1d { stride } => {
                let l = val(1).shape()[2];
                vec![
                    if want(0) {
                        let mut dx = kernels::conv_transpose1d(g, val(1), *stride)?.into_data();
                        // samples past the last full window got no gradient
                        dx.resize(val(0).numel(), T::ZERO);
                        Some(Tensor::new(val(0).shape(), dx)?)
                    } else {
                        None
                    },
                    want(1).then(|| kernels::conv_weight_grad(g, val(0), *stride, l)),
                ]
            }
            Op::ConvTranspose1d { stride } => {
                let l = val(1).shape()[2];
                vec![
                    if want(0) {
                        Some(kernels::conv1d(g, val(1), *stride)?)
                    } else {
                        None
                    },
                    want(1).then(|| kernels::conv_weight_grad(val(0), g, *stride, l)),
                ]
            }
            Op::Reshape => vec![Some(g.clone().reshape(val(0).shape())?)],
            Op::Permute(axes) => {
                vec![Some(kernels::permute(g, &kernels::inverse_axes(axes))?)]
            }
            Op::Slice { axis, start } => {
                vec![Some(kernels::unslice_axis(
                    g,
                    val(0).shape(),
                    *axis,
                    *start,
                ))]
            }
            Op::Concat { axis } => {
                let mut offset = 0;
                let mut parts = Vec::with_capacity(node.inputs.len());
                for (i, input) in node.inputs.iter().enumerate() {
                    let len = input.shape()[*axis];
                    parts.push(if want(i) {
                        Some(kernels::slice_axis(g, *axis, offset, len)?)
                    } else {
                        None
                    });
                    offset += len;
                }
                parts
            }
            Op::Sum => vec![Some(Tensor::full(val(0).shape(), g.data()[0]))],
        };
        Ok(grads)
    }
}
