//! Two-level recurrent decoder.
//!
//! Each step runs a first recurrent cell on the embedded previous token,
//! attends over the feature grid with the resulting intermediate state, runs a
//! second cell on the context vector and projects everything to a softmax over
//! the vocabulary.
//!
//! Two cells are available. The plain GRU computes
//!
//! ```text
//! z = σ(W_yz x + U_hz h + C_cz c + b_z)
//! r = σ(W_yr x + U_hr h + C_cr c + b_r)
//! h̃ = tanh(W_yh x + r ⊗ (U_hh h) + C_ch c + b_h)
//! h' = (1 − z) ⊗ h + z ⊗ h̃
//! ```
//!
//! and the gated-input GRU adds an auxiliary state `v = s ⊗ W_yv x` to both
//! gate pre-activations and inside the reset product, `r ⊗ (U_hh h + v)`.
//! With `s = 0` the two coincide.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionState, CoverageAttention, PreparedGrid};
use crate::autograd::Var;
use crate::encoder::FeatureGrid;
use crate::error::{ensure, Result};
use crate::nn::{xavier_uniform, Ctx, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Gru,
    #[default]
    GiGru,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Gru => "gru",
            CellKind::GiGru => "gi_gru",
        }
    }
}

/// How the second level obtains its auxiliary state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxRouting {
    /// Reuse the first level's auxiliary state unchanged.
    #[default]
    FromFirstLevel,
    /// Recompute it from the context vector with a second-level `W_yv`.
    Recompute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub cell: CellKind,
    /// Hidden size n.
    pub hidden: usize,
    /// Token embedding size E.
    pub embed: usize,
    /// Width w′ of the output layer.
    pub proj: usize,
    /// Step size s of the auxiliary state.
    pub step_size: f64,
    pub learn_step_size: bool,
    pub aux_routing: AuxRouting,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            cell: CellKind::GiGru,
            hidden: 256,
            embed: 128,
            proj: 128,
            step_size: 1.0,
            learn_step_size: false,
            aux_routing: AuxRouting::FromFirstLevel,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.hidden > 0 && self.embed > 0 && self.proj > 0, "decoder sizes must be positive");
        ensure!(
            self.step_size >= 0.0 && self.step_size.is_finite(),
            "step_size must be a finite non-negative number, got {}",
            self.step_size
        );
        Ok(())
    }
}

/// Weights of one recurrent cell. `aux` and `step` exist only for cells that
/// compute their own auxiliary state.
#[derive(Clone, Debug)]
pub struct CellWeights {
    pub w_yz: ParamId,
    pub w_yr: ParamId,
    pub w_yh: ParamId,
    pub u_hz: ParamId,
    pub u_hr: ParamId,
    pub u_hh: ParamId,
    pub c_cz: ParamId,
    pub c_cr: ParamId,
    pub c_ch: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
    pub w_yv: Option<ParamId>,
    pub step: Option<ParamId>,
    pub input: usize,
    pub hidden: usize,
    pub context: usize,
}

impl CellWeights {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        context: usize,
        aux: Option<(f64, bool)>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut w = |suffix: &str, rows: usize, cols: usize, rng: &mut R| {
            store.add(format!("{name}.{suffix}"), ParamKind::Weight, xavier_uniform(rows, cols, rng))
        };
        let (w_yz, w_yr, w_yh) = (w("w_yz", hidden, input, rng)?, w("w_yr", hidden, input, rng)?, w("w_yh", hidden, input, rng)?);
        let (u_hz, u_hr, u_hh) = (w("u_hz", hidden, hidden, rng)?, w("u_hr", hidden, hidden, rng)?, w("u_hh", hidden, hidden, rng)?);
        let (c_cz, c_cr, c_ch) = (w("c_cz", hidden, context, rng)?, w("c_cr", hidden, context, rng)?, w("c_ch", hidden, context, rng)?);
        let mut b = |suffix: &str| store.add(format!("{name}.{suffix}"), ParamKind::Bias, Tensor::zeros(&[hidden]));
        let (b_z, b_r, b_h) = (b("b_z")?, b("b_r")?, b("b_h")?);
        let (w_yv, step) = match aux {
            Some((s, learn)) => {
                // Zero init: a fresh GI-GRU starts out as the plain GRU.
                let w_yv = store.add(format!("{name}.w_yv"), ParamKind::Weight, Tensor::zeros(&[hidden, input]))?;
                let kind = if learn { ParamKind::Bias } else { ParamKind::Buffer };
                let step = store.add(format!("{name}.step_size"), kind, Tensor::scalar(s))?;
                (Some(w_yv), Some(step))
            }
            None => (None, None),
        };
        Ok(Self {
            w_yz,
            w_yr,
            w_yh,
            u_hz,
            u_hr,
            u_hh,
            c_cz,
            c_cr,
            c_ch,
            b_z,
            b_r,
            b_h,
            w_yv,
            step,
            input,
            hidden,
            context,
        })
    }

    fn check(&self, ctx: &Ctx<'_>, x: Var, h: Var, c: Option<Var>) -> Result<()> {
        let t = ctx.tape;
        ensure!(t.shape(x) == [self.input], "cell input has shape {:?}, expected [{}]", t.shape(x), self.input);
        ensure!(t.shape(h) == [self.hidden], "hidden state has shape {:?}, expected [{}]", t.shape(h), self.hidden);
        if let Some(c) = c {
            ensure!(t.shape(c) == [self.context], "context has shape {:?}, expected [{}]", t.shape(c), self.context);
        }
        Ok(())
    }

    /// `W x + U h (+ v) (+ C c) + b` for one gate.
    fn gate_pre(&self, ctx: &Ctx<'_>, wx: ParamId, uh: ParamId, cc: ParamId, b: ParamId, x: Var, h: Var, v: Option<Var>, c: Option<Var>) -> Result<Var> {
        let t = ctx.tape;
        let mut terms = vec![t.matvec(ctx.p(wx), x)?, t.matvec(ctx.p(uh), h)?];
        terms.extend(v);
        if let Some(c) = c {
            terms.push(t.matvec(ctx.p(cc), c)?);
        }
        terms.push(ctx.p(b));
        t.add_many(&terms)
    }

    fn step(&self, ctx: &Ctx<'_>, x: Var, h: Var, v: Option<Var>, c: Option<Var>) -> Result<Var> {
        let t = ctx.tape;
        let z = t.sigmoid(self.gate_pre(ctx, self.w_yz, self.u_hz, self.c_cz, self.b_z, x, h, v, c)?);
        let r = t.sigmoid(self.gate_pre(ctx, self.w_yr, self.u_hr, self.c_cr, self.b_r, x, h, v, c)?);
        let mut recur = t.matvec(ctx.p(self.u_hh), h)?;
        if let Some(v) = v {
            recur = t.add(recur, v)?;
        }
        let mut terms = vec![t.matvec(ctx.p(self.w_yh), x)?, t.mul(r, recur)?];
        if let Some(c) = c {
            terms.push(t.matvec(ctx.p(self.c_ch), c)?);
        }
        terms.push(ctx.p(self.b_h));
        let cand = t.tanh(t.add_many(&terms)?);
        // (1 − z) ⊗ h + z ⊗ h̃
        let keep = t.mul(t.affine(z, -1.0, 1.0), h)?;
        t.add(keep, t.mul(z, cand)?)
    }

    /// Plain GRU update. `c = None` stands for a zero context vector.
    pub fn gru(&self, ctx: &Ctx<'_>, x: Var, h_prev: Var, c: Option<Var>) -> Result<Var> {
        self.check(ctx, x, h_prev, c)?;
        self.step(ctx, x, h_prev, None, c)
    }

    /// Auxiliary state `s ⊗ W_yv x`.
    pub fn auxiliary(&self, ctx: &Ctx<'_>, x: Var) -> Result<Var> {
        let (Some(w_yv), Some(step)) = (self.w_yv, self.step) else {
            return Err(crate::Error::contract("cell has no auxiliary-state weights"));
        };
        let t = ctx.tape;
        t.mul(ctx.p(step), t.matvec(ctx.p(w_yv), x)?)
    }

    /// Gated-input GRU update. Uses `v_in` as the auxiliary state when given,
    /// otherwise computes it from `x`. Returns the new hidden state and the
    /// auxiliary state that was used.
    pub fn gi_gru(&self, ctx: &Ctx<'_>, x: Var, h_prev: Var, v_in: Option<Var>, c: Option<Var>) -> Result<(Var, Var)> {
        self.check(ctx, x, h_prev, c)?;
        let v = match v_in {
            Some(v) => {
                ensure!(
                    ctx.tape.shape(v) == [self.hidden],
                    "auxiliary state has shape {:?}, expected [{}]",
                    ctx.tape.shape(v),
                    self.hidden
                );
                v
            }
            None => self.auxiliary(ctx, x)?,
        };
        Ok((self.step(ctx, x, h_prev, Some(v), c)?, v))
    }
}

/// `softmax(W_o (V_h h + W_c c + W_y y^E))`.
#[derive(Clone, Debug)]
pub struct OutputProjection {
    pub w_o: ParamId,
    pub v_h: ParamId,
    pub w_c: ParamId,
    pub w_y: ParamId,
}

impl OutputProjection {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, vocab: usize, cfg: &DecoderConfig, context: usize, rng: &mut R) -> Result<Self> {
        let mut w = |name: &str, rows: usize, cols: usize, rng: &mut R| {
            store.add(format!("decoder.output.{name}"), ParamKind::Weight, xavier_uniform(rows, cols, rng))
        };
        Ok(Self {
            w_o: w("w_o", vocab, cfg.proj, rng)?,
            v_h: w("v_h", cfg.proj, cfg.hidden, rng)?,
            w_c: w("w_c", cfg.proj, context, rng)?,
            w_y: w("w_y", cfg.proj, cfg.embed, rng)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx<'_>, h: Var, c: Var, y_embed: Var) -> Result<Var> {
        let t = ctx.tape;
        let o = t.add_many(&[
            t.matvec(ctx.p(self.v_h), h)?,
            t.matvec(ctx.p(self.w_c), c)?,
            t.matvec(ctx.p(self.w_y), y_embed)?,
        ])?;
        t.softmax(t.matvec(ctx.p(self.w_o), o)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    /// Intermediate state of the first level at the last step.
    pub h1: Var,
    /// Final hidden state; the first level consumes it at the next step.
    pub h2: Var,
    /// Auxiliary state handed from the first level to the second.
    pub v: Var,
}

impl DecoderState {
    pub fn initial(ctx: &Ctx<'_>, hidden: usize) -> Self {
        let z = ctx.tape.constant(Tensor::zeros(&[hidden]));
        Self { h1: z, h2: z, v: z }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub probs: Var,
    pub alpha: Var,
    pub state: DecoderState,
    pub attention: AttentionState,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub vocab: usize,
    pub embedding: ParamId,
    pub level1: CellWeights,
    pub level2: CellWeights,
    pub output: OutputProjection,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &DecoderConfig, vocab: usize, context: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        ensure!(vocab >= 1, "vocabulary must be nonempty");
        let gi = cfg.cell == CellKind::GiGru;
        let aux = gi.then_some((cfg.step_size, cfg.learn_step_size));
        let embedding = store.add(
            "decoder.embedding",
            ParamKind::Weight,
            Tensor::uniform(&[vocab, cfg.embed], (3.0 / cfg.embed as f64).sqrt(), rng),
        )?;
        let level1 = CellWeights::new(store, "decoder.level1", cfg.embed, cfg.hidden, context, aux, rng)?;
        let level2_aux = aux.filter(|_| cfg.aux_routing == AuxRouting::Recompute);
        let level2 = CellWeights::new(store, "decoder.level2", context, cfg.hidden, context, level2_aux, rng)?;
        let output = OutputProjection::new(store, vocab, cfg, context, rng)?;
        Ok(Self {
            config: cfg.clone(),
            vocab,
            embedding,
            level1,
            level2,
            output,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        ctx: &Ctx<'_>,
        attention: &CoverageAttention,
        grid: &FeatureGrid,
        prepared: &PreparedGrid,
        prev_token: usize,
        state: DecoderState,
        attn: AttentionState,
    ) -> Result<StepOutput> {
        ensure!(
            prev_token < self.vocab,
            "token id {prev_token} outside vocabulary of {}",
            self.vocab
        );
        let t = ctx.tape;
        let y = t.gather_row(ctx.p(self.embedding), prev_token)?;
        let (h1, v, attended, h2) = match self.config.cell {
            CellKind::Gru => {
                let h1 = self.level1.gru(ctx, y, state.h2, None)?;
                let att = attention.attend(ctx, h1, grid, prepared, attn)?;
                let h2 = self.level2.gru(ctx, att.context, h1, Some(att.context))?;
                (h1, state.v, att, h2)
            }
            CellKind::GiGru => {
                let (h1, v1) = self.level1.gi_gru(ctx, y, state.h2, None, None)?;
                let att = attention.attend(ctx, h1, grid, prepared, attn)?;
                let v_in = match self.config.aux_routing {
                    AuxRouting::FromFirstLevel => Some(v1),
                    AuxRouting::Recompute => None,
                };
                let (h2, _) = self.level2.gi_gru(ctx, att.context, h1, v_in, Some(att.context))?;
                (h1, v1, att, h2)
            }
        };
        let probs = self.output.forward(ctx, h2, attended.context, y)?;
        Ok(StepOutput {
            probs,
            alpha: attended.alpha,
            state: DecoderState { h1, h2, v },
            attention: attended.state,
        })
    }
}
