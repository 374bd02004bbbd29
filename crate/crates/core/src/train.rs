//! Objective, optimizer, learning-rate schedule and the epoch loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::Sample;
use crate::error::{ensure, Result};
use crate::metrics::EvalReport;
use crate::model::Model;
use crate::nn::{Ctx, Mode, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Random pixels added to each width before batches are cut from the
/// width-sorted order, so batch composition still varies between epochs.
const JITTER: usize = 96;

/// Floor inside the log of the likelihood term.
pub const LOG_EPS: f64 = 1e-12;

/// Which stored tensors the L2 penalty covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Scope {
    /// Weight matrices and kernels only.
    #[default]
    Weights,
    /// Every trainable tensor.
    Trainable,
}

impl L2Scope {
    fn covers(self, kind: ParamKind) -> bool {
        match self {
            L2Scope::Weights => kind == ParamKind::Weight,
            L2Scope::Trainable => kind.trainable(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub lambda_l2: f64,
    pub l2_scope: L2Scope,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Stop early once validation exprate reaches this percentage.
    pub target_exprate: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            lambda_l2: 0.01,
            l2_scope: L2Scope::Weights,
            max_epochs: 300,
            plateau_patience: 10,
            lr_decay_factor: 10.0,
            batch_size: 8,
            grad_clip: 100.0,
            target_exprate: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "train.lr must be positive, got {}", self.lr);
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            "train.momentum must lie in [0, 1), got {}",
            self.momentum
        );
        ensure!(self.lambda_l2 >= 0.0, "train.lambda_l2 must be non-negative, got {}", self.lambda_l2);
        ensure!(self.max_epochs >= 1, "train.max_epochs must be at least 1");
        ensure!(self.plateau_patience >= 1, "train.plateau_patience must be at least 1");
        ensure!(
            self.lr_decay_factor > 1.0,
            "train.lr_decay_factor must exceed 1, got {}",
            self.lr_decay_factor
        );
        ensure!(self.batch_size >= 1, "train.batch_size must be at least 1");
        ensure!(self.grad_clip >= 0.0, "train.grad_clip must be non-negative");
        if let Some(t) = self.target_exprate {
            ensure!((0.0..=100.0).contains(&t), "train.target_exprate must lie in [0, 100], got {t}");
        }
        Ok(())
    }
}

/// `Σ‖W‖²` over the tensors in `scope`.
pub fn l2_norm_sq(store: &ParamStore, scope: L2Scope) -> f64 {
    store
        .iter()
        .filter(|(_, p)| scope.covers(p.kind))
        .map(|(_, p)| p.value().sum_squares())
        .sum()
}

/// Objective from explicit per-step distributions: `−Σ log(p_t[y_t] + ε) + λ Σ‖W‖²`.
pub fn loss(step_probs: &[Tensor], labels: &[usize], params: &[&Tensor], lambda: f64) -> Result<f64> {
    ensure!(
        step_probs.len() == labels.len(),
        "{} distributions for {} labels",
        step_probs.len(),
        labels.len()
    );
    let mut nll = 0.0;
    for (p, &y) in step_probs.iter().zip(labels) {
        ensure!(y < p.numel(), "label {y} outside distribution of size {}", p.numel());
        let py = p.data()[y];
        if py == 0.0 {
            log::warn!("zero probability at a true label; loss uses the log floor");
        }
        nll -= (py + LOG_EPS).ln();
    }
    let reg: f64 = params.iter().map(|t| t.sum_squares()).sum();
    Ok(nll + lambda * reg)
}

/// Classical momentum: `v ← μv + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn velocity(&self, index: usize) -> Option<&Tensor> {
        self.velocity.get(index).and_then(Option::as_ref)
    }

    /// Updates every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, momentum: f64) {
        self.velocity.resize(store.len(), None);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get(id);
            if !p.kind.trainable() {
                continue;
            }
            let Some(g) = p.grad.clone() else { continue };
            let v = self.velocity[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = momentum * *vi + gi;
            }
            let v = v.clone();
            for (w, vi) in store.value_mut(id).data_mut().iter_mut().zip(v.data()) {
                *w -= lr * vi;
            }
        }
    }
}

/// Divides the learning rate by a fixed factor when the monitored metric has
/// not improved for `patience` consecutive epochs. The stale counter restarts
/// after each decay, so a long plateau decays once per `patience` epochs.
/// The rate after k decays is `initial / factor^k`, computed directly rather
/// than by repeated division.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    initial: f64,
    decays: i32,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        Self {
            lr,
            patience,
            factor,
            initial: lr,
            decays: 0,
            best: None,
            stale: 0,
        }
    }

    /// Records one epoch's metric (higher is better) and returns the new rate.
    pub fn observe(&mut self, metric: f64) -> f64 {
        match self.best {
            Some(b) if metric <= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.decays += 1;
                    self.lr = self.initial / self.factor.powi(self.decays);
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(metric);
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after each epoch of `history`.
pub fn replay_schedule(history: &[f64], cfg: &TrainConfig) -> Vec<f64> {
    let mut s = PlateauScheduler::new(cfg.lr, cfg.plateau_patience, cfg.lr_decay_factor);
    history.iter().map(|&m| s.observe(m)).collect()
}

/// Greedy recognition of every sample.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<EvalReport> {
    ensure!(!samples.is_empty(), "cannot evaluate an empty dataset");
    let preds = samples
        .iter()
        .map(|s| model.recognize(&s.image).map(|r| r.tokens))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&[usize], &[usize])> = preds.iter().zip(samples).map(|(p, s)| (p.as_slice(), s.body())).collect();
    EvalReport::from_pairs(&pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean cross-entropy per predicted token, regularizer excluded.
    pub loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub report: EvalReport,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,loss,lr,exprate,wer,le1,le2,le3";

    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{:.6},{:e},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.epoch, self.loss, self.lr, r.exprate, r.wer, r.le1, r.le2, r.le3
        )
    }
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub scheduler: PlateauScheduler,
    optimizer: Sgd,
    rng: ChaCha8Rng,
    epoch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStats {
    pub nll: f64,
    pub tokens: usize,
    pub grad_norm: f64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            scheduler: PlateauScheduler::new(config.lr, config.plateau_patience, config.lr_decay_factor),
            config,
            optimizer: Sgd::new(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_0c8e),
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One SGD step on a batch. The objective is the batch mean of the
    /// per-sequence negative log-likelihood plus the L2 penalty.
    pub fn train_batch(&mut self, batch: &[&Sample]) -> Result<BatchStats> {
        let tape = Tape::new();
        let (nll, tokens, grads, updates) = {
            let ctx = Ctx::new(&tape, &self.model.store, Mode::Train);
            let (nll, tokens) = self.model.batch_nll(&ctx, batch)?;
            let grads = tape.backward(nll)?;
            (tape.value(nll).item(), tokens, grads, ctx.take_stat_updates())
        };
        let store = &mut self.model.store;
        store.zero_grad();
        store.accumulate(&grads, 1.0 / batch.len() as f64);
        drop(grads);
        drop(tape);
        let lambda = self.config.lambda_l2;
        let ids: Vec<_> = store.ids().collect();
        if lambda > 0.0 {
            for &id in &ids {
                let p = store.get(id);
                if !self.config.l2_scope.covers(p.kind) {
                    continue;
                }
                let w = p.value().clone();
                let g = store.grad_slot(id).get_or_insert_with(|| Tensor::zeros(w.shape()));
                for (gi, wi) in g.data_mut().iter_mut().zip(w.data()) {
                    *gi += 2.0 * lambda * wi;
                }
            }
        }
        let norm = ids
            .iter()
            .filter_map(|&id| store.get(id).grad.as_ref())
            .map(Tensor::sum_squares)
            .sum::<f64>()
            .sqrt();
        let clip = self.config.grad_clip;
        if clip > 0.0 && norm > clip {
            let scale = clip / norm;
            for &id in &ids {
                if let Some(g) = store.grad_slot(id) {
                    g.scale_assign(scale);
                }
            }
        }
        self.optimizer.step(store, self.scheduler.lr, self.config.momentum);
        for u in &updates {
            store.apply_stat_update(u);
        }
        Ok(BatchStats {
            nll,
            tokens,
            grad_norm: norm,
        })
    }

    /// Trains one pass over `train` and returns the mean per-token
    /// cross-entropy and the rate used.
    ///
    /// Batches group images of similar width, so little zero padding enters
    /// the pooled statistics of the encoder; evaluation sees each image alone
    /// and unpadded. Widths are jittered before sorting and the batch order
    /// is shuffled.
    pub fn train_epoch(&mut self, train: &[Sample]) -> Result<(f64, f64)> {
        ensure!(!train.is_empty(), "empty training set");
        let lr = self.scheduler.lr;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let jitter: Vec<usize> = (0..train.len()).map(|_| self.rng.random_range(0..=JITTER)).collect();
        order.sort_by_key(|&i| train[i].image.shape()[2] + jitter[i]);
        let mut batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        batches.shuffle(&mut self.rng);
        let (mut nll, mut tokens) = (0.0, 0);
        for chunk in batches {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let s = self.train_batch(&batch)?;
            nll += s.nll;
            tokens += s.tokens;
            if !s.nll.is_finite() {
                break;
            }
        }
        self.epoch += 1;
        Ok((nll / tokens.max(1) as f64, lr))
    }

    /// Trains one epoch, evaluates on `val` and steps the scheduler on its exprate.
    pub fn run_epoch(&mut self, train: &[Sample], val: &[Sample]) -> Result<EpochRecord> {
        let (loss, lr) = self.train_epoch(train)?;
        let report = evaluate(&self.model, val)?;
        self.scheduler.observe(report.exprate);
        Ok(EpochRecord {
            epoch: self.epoch,
            loss,
            lr,
            report,
        })
    }
}
