//! Reverse-mode differentiation over a dynamic tape.
//!
//! Every operation on a [`Tape`] evaluates eagerly, appends a node holding its
//! value and enough context to differentiate it, and returns a [`Var`] handle.
//! [`Tape::backward`] then walks the nodes in reverse, accumulating gradients
//! into every node that can reach a trainable leaf.
//!
//! A tape is single-threaded. Build one per forward pass and drop it after the
//! gradients have been collected.
//!
//! ```
//! use densebam::autograd::Tape;
//! use densebam::Tensor;
//!
//! let tape = Tape::new();
//! let w = tape.var(Tensor::matrix(1, 2, vec![2.0, -1.0]).unwrap());
//! let x = tape.constant(Tensor::vector(vec![3.0, 4.0]));
//! let y = tape.matvec(w, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0]);
//! ```

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{contract, ensure, Result};
use crate::kernels::{self, ConvDims, ConvGeom, MatRef};
use crate::nn::ParamId;
use crate::tensor::{strides_of, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf { param: Option<ParamId> },
    Add(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Narrow { src: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Sum(Var),
    Nll { probs: Var, target: usize, eps: f64 },
    GatherRow { table: Var, row: usize },
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, dims: ConvDims },
    AvgPool { input: Var, window: usize, stride: usize },
    MaxPool { input: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Result of [`Tape::backward`]: one optional gradient per tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients that reached parameter leaves, in tape order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|&(p, i)| self.grads[i].as_ref().map(|g| (p, g)))
    }
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

fn check_same(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    ensure!(a == b, "{op}: shape mismatch {a:?} vs {b:?}");
    Ok(())
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    ensure!(
        a.len() == b.len(),
        "broadcast needs equal ranks, got {a:?} and {b:?}"
    );
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => contract!("cannot broadcast {a:?} with {b:?}"),
        })
        .collect()
}

/// For each flat index of `out`, the flat index of the broadcast operand.
fn broadcast_map(out: &[usize], operand: &[usize]) -> Vec<usize> {
    let op_strides = strides_of(operand);
    let eff: Vec<usize> = operand
        .iter()
        .zip(&op_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn reduce_to(grad: &[f64], out: &[usize], target: &[usize]) -> Tensor {
    if out == target {
        return Tensor::new(target, grad.to_vec()).expect("same shape");
    }
    let map = broadcast_map(out, target);
    let mut acc = Tensor::zeros(target);
    let data = acc.data_mut();
    for (g, &i) in grad.iter().zip(&map) {
        data[i] += g;
    }
    acc
}

/// Splits a shape around `axis` into (outer, axis extent, inner) sizes.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn dims4(shape: &[usize], op: &str) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => contract!("{op} expects an N×C×H×W tensor, got {shape:?}"),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// A leaf whose gradient is tracked but that is not tied to a parameter.
    pub fn var(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, true)
    }

    pub(crate) fn param_leaf(&self, id: ParamId, value: Arc<Tensor>, trainable: bool) -> Var {
        self.push_arc(value, Op::Leaf { param: Some(id) }, trainable)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let ng = self.needs(&[x]);
        self.push(out, op, ng)
    }

    fn binary_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape())?;
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&shape, va.shape());
            let mb = broadcast_map(&shape, vb.shape());
            ma.iter()
                .zip(&mb)
                .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
                .collect()
        };
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&shape, data)?, op, ng))
    }

    /// Elementwise sum with size-1 broadcasting between equal-rank operands.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise product with size-1 broadcasting between equal-rank operands.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let nb = self.affine(b, -1.0, 0.0);
        self.add(a, nb)
    }

    /// `scale * x + shift`.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn add_many(&self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| crate::Error::contract("add_many of nothing"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (&[r, k], &[k2, c]) = (va.shape(), vb.shape()) else {
            contract!("matmul expects matrices, got {:?} and {:?}", va.shape(), vb.shape());
        };
        ensure!(k == k2, "matmul inner dimension mismatch: {r}×{k} · {k2}×{c}");
        let mut out = vec![0.0; r * c];
        kernels::gemm(1.0, MatRef::new(va.data(), r, k), MatRef::new(vb.data(), k, c), 0.0, &mut out);
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&[r, c], out)?, Op::MatMul(a, b), ng))
    }

    /// Matrix `m×n` times vector `n`.
    pub fn matvec(&self, w: Var, x: Var) -> Result<Var> {
        let (vw, vx) = (self.value(w), self.value(x));
        let (&[m, n], &[n2]) = (vw.shape(), vx.shape()) else {
            contract!("matvec expects a matrix and a vector, got {:?} and {:?}", vw.shape(), vx.shape());
        };
        ensure!(n == n2, "matvec dimension mismatch: {m}×{n} · {n2}");
        let out: Vec<f64> = vw
            .data()
            .chunks_exact(n)
            .map(|row| row.iter().zip(vx.data()).map(|(a, b)| a * b).sum())
            .collect();
        let ng = self.needs(&[w, x]);
        Ok(self.push(Tensor::vector(out), Op::MatVec(w, x), ng))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let &[r, c] = v.shape() else {
            contract!("transpose expects a matrix, got {:?}", v.shape());
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v.data()[i * c + j];
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(x), ng))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        ensure!(axis < v.rank(), "narrow axis {axis} out of range for {:?}", v.shape());
        ensure!(
            len > 0 && start + len <= v.shape()[axis],
            "narrow [{start}, {}) out of range for axis {axis} of {:?}",
            start + len,
            v.shape()
        );
        let (outer, extent, inner) = split_axis(v.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Narrow { src: x, axis, start }, ng))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat of no tensors");
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values[0].shape().to_vec();
        ensure!(axis < first.len(), "concat axis {axis} out of range for {first:?}");
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            ensure!(
                s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b),
                "concat shape mismatch: {first:?} vs {s:?} along axis {axis}"
            );
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let e = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = self.needs(parts);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Concatenation along the channel axis of N×C×H×W tensors.
    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            dims4(&self.shape(p), "concat_channels")?;
        }
        self.concat(parts, 1)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let last = *v.shape().last().expect("rank >= 1");
        let mut out = v.data().to_vec();
        for row in out.chunks_exact_mut(last) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            ensure!(m.is_finite(), "softmax of non-finite input");
            let mut z = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                z += *e;
            }
            for e in row.iter_mut() {
                *e /= z;
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(v.shape(), out)?, Op::Softmax(x), ng))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// `-ln(probs[target] + eps)` for a probability vector.
    pub fn nll(&self, probs: Var, target: usize, eps: f64) -> Result<Var> {
        let v = self.value(probs);
        ensure!(v.rank() == 1, "nll expects a probability vector, got {:?}", v.shape());
        ensure!(target < v.numel(), "target {target} outside vocabulary of {}", v.numel());
        let p = v.data()[target];
        if p <= 0.0 {
            log::warn!("zero probability assigned to the reference token {target}");
        }
        let ng = self.needs(&[probs]);
        Ok(self.push(
            Tensor::scalar(-(p + eps).ln()),
            Op::Nll { probs, target, eps },
            ng,
        ))
    }

    /// Row `row` of a `K×E` table, as a vector.
    pub fn gather_row(&self, table: Var, row: usize) -> Result<Var> {
        let v = self.value(table);
        let &[k, e] = v.shape() else {
            contract!("gather_row expects a matrix, got {:?}", v.shape());
        };
        ensure!(row < k, "row {row} out of range for table with {k} rows");
        let out = v.data()[row * e..(row + 1) * e].to_vec();
        let ng = self.needs(&[table]);
        Ok(self.push(Tensor::vector(out), Op::GatherRow { table, row }, ng))
    }

    /// Cross-correlation of an N×C×H×W input with an O×C×kh×kw kernel.
    pub fn conv2d(&self, input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (vi, vk) = (self.value(input), self.value(kernel));
        let [n, c, h, w] = dims4(vi.shape(), "conv2d input")?;
        let [o, kc, kh, kw] = dims4(vk.shape(), "conv2d kernel")?;
        ensure!(kc == c, "conv2d kernel expects {kc} input channels, input has {c}");
        ensure!(geom.stride >= 1 && geom.dilation >= 1, "conv2d stride and dilation must be >= 1");
        let (Some(oh), Some(ow)) = (geom.out_extent(h, kh), geom.out_extent(w, kw)) else {
            contract!("conv2d kernel {kh}×{kw} (dilation {}) exceeds padded input {h}×{w}", geom.dilation);
        };
        let vb = match bias {
            Some(b) => {
                let vb = self.value(b);
                ensure!(vb.shape() == [o], "conv2d bias must have shape [{o}], got {:?}", vb.shape());
                Some(vb)
            }
            None => None,
        };
        let dims = ConvDims { n, c, h, w, o, kh, kw, oh, ow, geom };
        let out = kernels::conv2d_forward(&dims, vi.data(), vk.data(), vb.as_deref().map(Tensor::data));
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let ng = self.needs(&deps);
        Ok(self.push(
            Tensor::new(&[n, o, oh, ow], out)?,
            Op::Conv2d { input, kernel, bias, dims },
            ng,
        ))
    }

    /// Average pooling, no padding, floor semantics for partial windows.
    pub fn avg_pool2d(&self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let v = self.value(input);
        let [n, c, h, w] = dims4(v.shape(), "avg_pool2d")?;
        ensure!(window >= 1 && stride >= 1, "pool window and stride must be >= 1");
        ensure!(window <= h && window <= w, "pool window {window} larger than input {h}×{w}");
        let (out, oh, ow) = kernels::avg_pool_forward([n, c, h, w], v.data(), window, stride);
        let ng = self.needs(&[input]);
        Ok(self.push(
            Tensor::new(&[n, c, oh, ow], out)?,
            Op::AvgPool { input, window, stride },
            ng,
        ))
    }

    pub fn max_pool2d(&self, input: Var, window: usize, stride: usize, padding: usize) -> Result<Var> {
        let v = self.value(input);
        let [n, c, h, w] = dims4(v.shape(), "max_pool2d")?;
        ensure!(window >= 1 && stride >= 1, "pool window and stride must be >= 1");
        ensure!(padding < window, "max_pool2d padding must be smaller than the window");
        ensure!(
            window <= h + 2 * padding && window <= w + 2 * padding,
            "pool window {window} larger than padded input {h}×{w}"
        );
        let (out, argmax, oh, ow) = kernels::max_pool_forward([n, c, h, w], v.data(), window, stride, padding);
        let ng = self.needs(&[input]);
        Ok(self.push(Tensor::new(&[n, c, oh, ow], out)?, Op::MaxPool { input, argmax }, ng))
    }

    /// Per-channel mean over all spatial positions: N×C×H×W → N×C×1×1.
    pub fn global_avg_pool(&self, input: Var) -> Result<Var> {
        let v = self.value(input);
        let [n, c, h, w] = dims4(v.shape(), "global_avg_pool")?;
        let hw = h * w;
        let out = v
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let ng = self.needs(&[input]);
        Ok(self.push(Tensor::new(&[n, c, 1, 1], out)?, Op::GlobalAvgPool(input), ng))
    }

    fn check_norm_params(&self, c: usize, gamma: Var, beta: Var) -> Result<()> {
        check_same("batch_norm gamma", &self.shape(gamma), &[c])?;
        check_same("batch_norm beta", &self.shape(beta), &[c])
    }

    fn batch_norm_apply(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        train: bool,
    ) -> Result<Var> {
        let v = self.value(input);
        let [n, c, h, w] = dims4(v.shape(), "batch_norm")?;
        let (g, b) = (self.value(gamma), self.value(beta));
        let hw = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; v.numel()];
        let mut out = vec![0.0; v.numel()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (v.data()[i] - mean[ch]) * inv_std[ch];
                    out[i] = g.data()[ch] * xhat[i] + b.data()[ch];
                }
            }
        }
        let ng = self.needs(&[input, gamma, beta]);
        Ok(self.push(
            Tensor::new(v.shape(), out)?,
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, train },
            ng,
        ))
    }

    /// Training-mode batch norm: normalises each channel by its batch
    /// statistics over N, H and W, and reports those statistics.
    pub fn batch_norm_train(&self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchMoments)> {
        ensure!(eps > 0.0, "batch_norm epsilon must be positive");
        let v = self.value(input);
        let dims = dims4(v.shape(), "batch_norm")?;
        self.check_norm_params(dims[1], gamma, beta)?;
        let (mean, var) = kernels::channel_moments(dims, v.data());
        let out = self.batch_norm_apply(input, gamma, beta, &mean, &var, eps, true)?;
        let count = dims[0] * dims[2] * dims[3];
        Ok((out, BatchMoments { mean, var, count }))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(&self, input: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        ensure!(eps > 0.0, "batch_norm epsilon must be positive");
        let dims = dims4(&self.shape(input), "batch_norm")?;
        self.check_norm_params(dims[1], gamma, beta)?;
        ensure!(
            mean.len() == dims[1] && var.len() == dims[1],
            "batch_norm running statistics do not match {} channels",
            dims[1]
        );
        self.batch_norm_apply(input, gamma, beta, mean, var, eps, false)
    }

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that can reach a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        ensure!(
            nodes[loss.0].value.numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            nodes[loss.0].value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut send = |v: Var, t: Tensor| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |v: Var| -> &Tensor { &nodes[v.0].value };
            let out = &node.value;
            match &node.op {
                Op::Leaf { .. } => unreachable!(),
                Op::Add(a, b) => {
                    for &x in [a, b] {
                        send(x, reduce_to(g.data(), out.shape(), val(x).shape()));
                    }
                }
                Op::Mul(a, b) => {
                    for (&x, &y) in [(a, b), (b, a)] {
                        if !nodes[x.0].needs_grad {
                            continue;
                        }
                        let vy = val(y);
                        let prod: Vec<f64> = if vy.shape() == out.shape() {
                            g.data().iter().zip(vy.data()).map(|(a, b)| a * b).collect()
                        } else {
                            let m = broadcast_map(out.shape(), vy.shape());
                            g.data().iter().zip(&m).map(|(a, &j)| a * vy.data()[j]).collect()
                        };
                        send(x, reduce_to(&prod, out.shape(), val(x).shape()));
                    }
                }
                Op::Affine(x, scale) => {
                    let mut t = g;
                    t.scale_assign(*scale);
                    send(*x, t);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (r, k, c) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    let gm = MatRef::new(g.data(), r, c);
                    if nodes[a.0].needs_grad {
                        let mut ga = vec![0.0; r * k];
                        kernels::gemm(1.0, gm, MatRef::new(vb.data(), k, c).t(), 0.0, &mut ga);
                        send(*a, Tensor::new(&[r, k], ga)?);
                    }
                    if nodes[b.0].needs_grad {
                        let mut gb = vec![0.0; k * c];
                        kernels::gemm(1.0, MatRef::new(va.data(), r, k).t(), gm, 0.0, &mut gb);
                        send(*b, Tensor::new(&[k, c], gb)?);
                    }
                }
                Op::MatVec(w, x) => {
                    let (vw, vx) = (val(*w), val(*x));
                    let (m, n) = (vw.shape()[0], vw.shape()[1]);
                    if nodes[w.0].needs_grad {
                        let mut gw = Vec::with_capacity(m * n);
                        for &gi in g.data() {
                            gw.extend(vx.data().iter().map(|xj| gi * xj));
                        }
                        send(*w, Tensor::new(&[m, n], gw)?);
                    }
                    if nodes[x.0].needs_grad {
                        let mut gx = vec![0.0; n];
                        for (row, &gi) in vw.data().chunks_exact(n).zip(g.data()) {
                            for (acc, wij) in gx.iter_mut().zip(row) {
                                *acc += gi * wij;
                            }
                        }
                        send(*x, Tensor::vector(gx));
                    }
                }
                Op::Transpose(x) => {
                    let (r, c) = (out.shape()[0], out.shape()[1]);
                    let mut t = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            t[j * r + i] = g.data()[i * c + j];
                        }
                    }
                    send(*x, Tensor::new(&[c, r], t)?);
                }
                Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    send(*x, g.reshaped(&shape));
                }
                Op::Narrow { src, axis, start } => {
                    let src_shape = val(*src).shape().to_vec();
                    let (outer, extent, inner) = split_axis(&src_shape, *axis);
                    let len = out.shape()[*axis];
                    let mut t = Tensor::zeros(&src_shape);
                    let data = t.data_mut();
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        let s = o * len * inner;
                        data[dst..dst + len * inner].copy_from_slice(&g.data()[s..s + len * inner]);
                    }
                    send(*src, t);
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = split_axis(out.shape(), *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let shape = val(p).shape().to_vec();
                        let e = shape[*axis];
                        if nodes[p.0].needs_grad {
                            let mut t = Vec::with_capacity(outer * e * inner);
                            for o in 0..outer {
                                let s = (o * total + offset) * inner;
                                t.extend_from_slice(&g.data()[s..s + e * inner]);
                            }
                            send(p, Tensor::new(&shape, t)?);
                        }
                        offset += e;
                    }
                }
                Op::Relu(x) => {
                    let vx = val(*x);
                    let t = g.data().iter().zip(vx.data()).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                    send(*x, Tensor::new(vx.shape(), t)?);
                }
                Op::Sigmoid(x) => {
                    let t = g.data().iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                    send(*x, Tensor::new(out.shape(), t)?);
                }
                Op::Tanh(x) => {
                    let t = g.data().iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                    send(*x, Tensor::new(out.shape(), t)?);
                }
                Op::Softmax(x) => {
                    let last = *out.shape().last().unwrap();
                    let mut t = vec![0.0; out.numel()];
                    for ((dst, y), gy) in t
                        .chunks_exact_mut(last)
                        .zip(out.data().chunks_exact(last))
                        .zip(g.data().chunks_exact(last))
                    {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for i in 0..last {
                            dst[i] = y[i] * (gy[i] - dot);
                        }
                    }
                    send(*x, Tensor::new(out.shape(), t)?);
                }
                Op::Sum(x) => {
                    let shape = val(*x).shape().to_vec();
                    send(*x, Tensor::full(&shape, g.item()));
                }
                Op::Nll { probs, target, eps } => {
                    let vp = val(*probs);
                    let mut t = Tensor::zeros(vp.shape());
                    t.data_mut()[*target] = -g.item() / (vp.data()[*target] + eps);
                    send(*probs, t);
                }
                Op::GatherRow { table, row } => {
                    let shape = val(*table).shape().to_vec();
                    let e = shape[1];
                    let mut t = Tensor::zeros(&shape);
                    t.data_mut()[row * e..(row + 1) * e].copy_from_slice(g.data());
                    send(*table, t);
                }
                Op::Conv2d { input, kernel, bias, dims } => {
                    let (vi, vk) = (val(*input), val(*kernel));
                    let cg = kernels::conv2d_backward(dims, vi.data(), vk.data(), g.data());
                    send(*input, Tensor::new(vi.shape(), cg.input)?);
                    send(*kernel, Tensor::new(vk.shape(), cg.kernel)?);
                    if let Some(b) = bias {
                        send(*b, Tensor::vector(cg.bias));
                    }
                }
                Op::AvgPool { input, window, stride } => {
                    let vi = val(*input);
                    let dims = dims4(vi.shape(), "avg_pool2d")?;
                    let t = kernels::avg_pool_backward(dims, g.data(), *window, *stride);
                    send(*input, Tensor::new(vi.shape(), t)?);
                }
                Op::MaxPool { input, argmax } => {
                    let vi = val(*input);
                    let mut t = Tensor::zeros(vi.shape());
                    let data = t.data_mut();
                    for (gv, &i) in g.data().iter().zip(argmax) {
                        data[i] += gv;
                    }
                    send(*input, t);
                }
                Op::GlobalAvgPool(x) => {
                    let vx = val(*x);
                    let [_, _, h, w] = dims4(vx.shape(), "global_avg_pool")?;
                    let hw = h * w;
                    let mut t = Vec::with_capacity(vx.numel());
                    for &gv in g.data() {
                        t.extend(std::iter::repeat_n(gv / hw as f64, hw));
                    }
                    send(*x, Tensor::new(vx.shape(), t)?);
                }
                Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                    let [n, c, h, w] = dims4(out.shape(), "batch_norm")?;
                    let hw = h * w;
                    let m = (n * hw) as f64;
                    let gd = g.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            for i in off..off + hw {
                                dgamma[ch] += gd[i] * xhat[i];
                                dbeta[ch] += gd[i];
                            }
                        }
                    }
                    if nodes[input.0].needs_grad {
                        let gam = val(*gamma).data();
                        let mut dx = vec![0.0; out.numel()];
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * hw;
                                let k = gam[ch] * inv_std[ch];
                                for i in off..off + hw {
                                    dx[i] = if *train {
                                        k / m * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                    } else {
                                        k * gd[i]
                                    };
                                }
                            }
                        }
                        send(*input, Tensor::new(out.shape(), dx)?);
                    }
                    send(*gamma, Tensor::vector(dgamma));
                    send(*beta, Tensor::vector(dbeta));
                }
            }
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(p) } => Some((p, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}
