//! Parameters and the small layer building blocks shared by the encoder,
//! attention and decoder.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::autograd::{BatchMoments, Gradients, Tape, Var};
use crate::error::{ensure, Result};
use crate::kernels::ConvGeom;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Role of a stored tensor. Decides whether it is trained and whether the L2
/// penalty applies to it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        self != ParamKind::Buffer
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    value: Arc<Tensor>,
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Named, ordered collection of every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        ensure!(!self.by_name.contains_key(&name), "duplicate parameter name {name:?}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            kind,
            value: Arc::new(value),
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        ensure!(
            p.value.shape() == value.shape(),
            "parameter {} has shape {:?}, replacement has {:?}",
            p.name,
            p.value.shape(),
            value.shape()
        );
        p.value = Arc::new(value);
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn grad_slot(&mut self, id: ParamId) -> &mut Option<Tensor> {
        &mut self.params[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `scale` times every parameter gradient in `grads` to the stored grads.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.param_grads() {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * b;
                    }
                }
                slot @ None => {
                    let mut t = g.clone();
                    t.scale_assign(scale);
                    *slot = Some(t);
                }
            }
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.numel())
            .sum()
    }

    /// Blends batch statistics into the running statistics of a norm layer.
    pub fn apply_stat_update(&mut self, update: &StatUpdate) {
        let m = update.momentum;
        let unbias = if update.moments.count > 1 {
            update.moments.count as f64 / (update.moments.count - 1) as f64
        } else {
            1.0
        };
        for (r, b) in self
            .value_mut(update.running_mean)
            .data_mut()
            .iter_mut()
            .zip(&update.moments.mean)
        {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self
            .value_mut(update.running_var)
            .data_mut()
            .iter_mut()
            .zip(&update.moments.var)
        {
            *r = (1.0 - m) * *r + m * b * unbias;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update recorded during a training forward pass.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub moments: BatchMoments,
}

/// One forward pass: a tape, read-only parameters and the train/eval mode.
pub struct Ctx<'a> {
    pub tape: &'a Tape,
    pub store: &'a ParamStore,
    pub mode: Mode,
    leaves: RefCell<HashMap<ParamId, Var>>,
    stats: RefCell<Vec<StatUpdate>>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            leaves: RefCell::default(),
            stats: RefCell::default(),
        }
    }

    /// Tape leaf for a stored parameter; repeated calls return the same leaf.
    pub fn p(&self, id: ParamId) -> Var {
        *self.leaves.borrow_mut().entry(id).or_insert_with(|| {
            let param = self.store.get(id);
            self.tape
                .param_leaf(id, Arc::clone(&param.value), param.kind.trainable())
        })
    }

    pub fn take_stat_updates(&self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stats.borrow_mut())
    }
}

pub(crate) fn kaiming_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

pub(crate) fn xavier_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(&[rows, cols], (6.0 / (rows + cols) as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeom,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Weight,
            kaiming_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[out_channels]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            geom,
            in_channels,
            out_channels,
        })
    }

    pub fn forward(&self, ctx: &Ctx<'_>, x: Var) -> Result<Var> {
        ctx.tape
            .conv2d(x, ctx.p(self.weight), self.bias.map(|b| ctx.p(b)), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::NormScale, Tensor::ones(&[channels]))?,
            beta: store.add(format!("{name}.beta"), ParamKind::NormShift, Tensor::zeros(&[channels]))?,
            running_mean: store.add(
                format!("{name}.running_mean"),
                ParamKind::Buffer,
                Tensor::zeros(&[channels]),
            )?,
            running_var: store.add(
                format!("{name}.running_var"),
                ParamKind::Buffer,
                Tensor::ones(&[channels]),
            )?,
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        })
    }

    pub fn forward(&self, ctx: &Ctx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        match ctx.mode {
            Mode::Train => {
                let (y, moments) = ctx.tape.batch_norm_train(x, g, b, self.eps)?;
                ctx.stats.borrow_mut().push(StatUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    momentum: self.momentum,
                    moments,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.store.value(self.running_mean);
                let var = ctx.store.value(self.running_var);
                ctx.tape
                    .batch_norm_eval(x, g, b, mean.data(), var.data(), self.eps)
            }
        }
    }
}

/// Fully connected layer applied to the rows of an `N×in` matrix.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), ParamKind::Weight, xavier_uniform(outputs, inputs, rng))?,
            bias: store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[1, outputs]))?,
        })
    }

    pub fn forward(&self, ctx: &Ctx<'_>, x: Var) -> Result<Var> {
        let t = ctx.tape;
        let wt = t.transpose(ctx.p(self.weight))?;
        let y = t.matmul(x, wt)?;
        t.add(y, ctx.p(self.bias))
    }
}
