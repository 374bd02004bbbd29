//! Coverage-based additive attention.
//!
//! At each step the running sum of past attention maps, β, is convolved into
//! a coverage feature per position, and the energies
//! `e_i = νᵀ tanh(W_h h′ + W_a a_i + W_f f_i + b)` are normalised with a
//! softmax into the weights α that mix the feature vectors into the context.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::encoder::FeatureGrid;
use crate::error::{ensure, Result};
use crate::kernels::ConvGeom;
use crate::nn::{kaiming_uniform, xavier_uniform, Ctx, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    /// Attention dimension d′.
    pub dim: usize,
    /// Output channels q of the coverage convolution.
    pub coverage_channels: usize,
    /// Odd side length of the coverage kernel.
    pub coverage_kernel: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            coverage_channels: 64,
            coverage_kernel: 5,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.dim > 0, "attention dim must be positive");
        ensure!(self.coverage_channels > 0, "coverage_channels must be positive");
        ensure!(
            self.coverage_kernel % 2 == 1,
            "coverage_kernel must be odd to preserve the grid extent, got {}",
            self.coverage_kernel
        );
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CoverageAttention {
    pub config: AttentionConfig,
    pub nu: ParamId,
    pub w_hidden: ParamId,
    pub w_feature: ParamId,
    pub w_coverage: ParamId,
    pub bias: ParamId,
    pub coverage_kernel: ParamId,
}

/// Running attention state: β, the elementwise sum of every α emitted so far.
#[derive(Clone, Copy, Debug)]
pub struct AttentionState {
    /// 1×1×H×W.
    pub beta: Var,
}

impl AttentionState {
    /// β = 0 before the first step.
    pub fn initial(ctx: &Ctx<'_>, grid: &FeatureGrid) -> Self {
        Self {
            beta: ctx.tape.constant(Tensor::zeros(&[1, 1, grid.height, grid.width])),
        }
    }
}

/// Per-grid quantities that do not change across decode steps.
#[derive(Clone, Copy, Debug)]
pub struct PreparedGrid {
    /// `A · W_aᵀ`, L×d′.
    projected: Var,
    /// `Aᵀ`, C×L.
    transposed: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// Context vector, length C.
    pub context: Var,
    /// Attention weights over the L positions.
    pub alpha: Var,
    pub energies: Var,
    pub state: AttentionState,
}

impl CoverageAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &AttentionConfig,
        hidden: usize,
        feature_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (d, q, k) = (config.dim, config.coverage_channels, config.coverage_kernel);
        Ok(Self {
            config: config.clone(),
            nu: store.add("attention.nu", ParamKind::Weight, Tensor::uniform(&[d], (3.0 / d as f64).sqrt(), rng))?,
            w_hidden: store.add("attention.w_hidden", ParamKind::Weight, xavier_uniform(d, hidden, rng))?,
            w_feature: store.add("attention.w_feature", ParamKind::Weight, xavier_uniform(d, feature_channels, rng))?,
            w_coverage: store.add("attention.w_coverage", ParamKind::Weight, xavier_uniform(d, q, rng))?,
            bias: store.add("attention.bias", ParamKind::Bias, Tensor::zeros(&[1, d]))?,
            coverage_kernel: store.add(
                "attention.coverage_kernel",
                ParamKind::Weight,
                kaiming_uniform(&[q, 1, k, k], k * k, rng),
            )?,
        })
    }

    pub fn prepare(&self, ctx: &Ctx<'_>, grid: &FeatureGrid) -> Result<PreparedGrid> {
        let t = ctx.tape;
        let wa_t = t.transpose(ctx.p(self.w_feature))?;
        Ok(PreparedGrid {
            projected: t.matmul(grid.positions, wa_t)?,
            transposed: t.transpose(grid.positions)?,
        })
    }

    pub fn attend(
        &self,
        ctx: &Ctx<'_>,
        h_prime: Var,
        grid: &FeatureGrid,
        prepared: &PreparedGrid,
        state: AttentionState,
    ) -> Result<Attended> {
        let t = ctx.tape;
        let (h, w) = (grid.height, grid.width);
        let beta_shape = t.shape(state.beta);
        ensure!(
            beta_shape == [1, 1, h, w],
            "attention state has shape {beta_shape:?} but the grid is {h}×{w}"
        );
        ensure!(!grid.is_empty(), "empty feature grid");
        let l = h * w;
        let q = self.config.coverage_channels;
        let pad = self.config.coverage_kernel / 2;

        let cov = t.conv2d(state.beta, ctx.p(self.coverage_kernel), None, ConvGeom::new(1, pad, 1))?;
        let cov = t.transpose(t.reshape(cov, &[q, l])?)?;
        let cov = t.matmul(cov, t.transpose(ctx.p(self.w_coverage))?)?;

        let hid = t.matvec(ctx.p(self.w_hidden), h_prime)?;
        let hid = t.reshape(hid, &[1, self.config.dim])?;
        let hid = t.add(hid, ctx.p(self.bias))?;

        let pre = t.add(t.add(prepared.projected, cov)?, hid)?;
        let energies = t.matvec(t.tanh(pre), ctx.p(self.nu))?;
        let alpha = t.softmax(energies)?;
        let context = t.matvec(prepared.transposed, alpha)?;
        let beta = t.add(state.beta, t.reshape(alpha, &[1, 1, h, w])?)?;
        Ok(Attended {
            context,
            alpha,
            energies,
            state: AttentionState { beta },
        })
    }
}
