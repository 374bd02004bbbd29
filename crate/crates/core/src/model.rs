//! Full recognizer: encoder, coverage attention and two-level decoder.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionState, CoverageAttention};
use crate::autograd::{Tape, Var};
use crate::checkpoint::{self, LoadReport};
use crate::data::vocab::{EOS, SOS};
use crate::data::{batch_images, Sample, Vocabulary};
use crate::decoder::{CellKind, Decoder, DecoderConfig, DecoderState};
use crate::encoder::{Encoder, EncoderConfig, FeatureGrid};
use crate::error::{ensure, Result};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Greedy,
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_width: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Greedy,
            beam_width: 5,
            max_len: 48,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub decoder: DecoderConfig,
    pub decode: DecodeConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.attention.validate()?;
        self.decoder.validate()?;
        ensure!(self.decode.max_len >= 1, "decode.max_len must be at least 1");
        ensure!(self.decode.beam_width >= 1, "decode.beam_width must be at least 1");
        Ok(())
    }

    /// A model small enough for finite-difference checks.
    pub fn tiny(cell: CellKind) -> Self {
        let mut c = Self::default();
        c.encoder.stem_channels = 4;
        c.encoder.growth_rate = 2;
        c.encoder.layers_per_block = [1, 1, 1];
        c.encoder.bam_after = [2, 3].into();
        c.encoder.reduction_ratio = 2;
        c.encoder.spatial_dilation = 1;
        c.attention = AttentionConfig {
            dim: 6,
            coverage_channels: 3,
            coverage_kernel: 3,
        };
        c.decoder.cell = cell;
        c.decoder.hidden = 8;
        c.decoder.embed = 5;
        c.decoder.proj = 6;
        c.decode.max_len = 7;
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode<'a> {
    Greedy,
    /// Feeds SOS followed by `targets[..len-1]`; `targets` is the body plus EOS.
    TeacherForced(&'a [usize]),
    Beam(usize),
}

#[derive(Clone, Debug)]
pub struct Decoded {
    /// Emitted body tokens, without SOS or EOS.
    pub tokens: Vec<usize>,
    /// Attention weights per step, each of length H·W.
    pub alphas: Vec<Var>,
    /// Output distributions per step.
    pub probs: Vec<Var>,
    /// Decoding stopped at `max_len` before emitting EOS.
    pub truncated: bool,
}

#[derive(Clone, Debug)]
struct Hypothesis {
    log_prob: f64,
    tokens: Vec<usize>,
    alphas: Vec<Var>,
    probs: Vec<Var>,
    state: DecoderState,
    attention: AttentionState,
    done: bool,
}

pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub attention: CoverageAttention,
    pub decoder: Decoder,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Model {
    pub fn new(config: &ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config.encoder, &mut rng)?;
        let c = encoder.out_channels();
        let attention = CoverageAttention::new(&mut store, &config.attention, config.decoder.hidden, c, &mut rng)?;
        let decoder = Decoder::new(&mut store, &config.decoder, vocab.len(), c, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            vocab,
            store,
            encoder,
            attention,
            decoder,
        })
    }

    /// N×C×H′×W′ features of an N×1×H×W batch.
    pub fn encode(&self, ctx: &Ctx<'_>, images: &Tensor) -> Result<Var> {
        let x = ctx.tape.constant(images.clone());
        self.encoder.forward(ctx, x)
    }

    pub fn decode(&self, ctx: &Ctx<'_>, grid: &FeatureGrid, mode: DecodeMode<'_>, max_len: usize) -> Result<Decoded> {
        ensure!(max_len >= 1, "max_len must be at least 1");
        match mode {
            DecodeMode::Beam(width) => self.beam(ctx, grid, width, max_len),
            DecodeMode::Greedy => self.greedy(ctx, grid, None, max_len),
            DecodeMode::TeacherForced(targets) => {
                ensure!(!targets.is_empty(), "teacher forcing needs at least one target");
                self.greedy(ctx, grid, Some(targets), max_len)
            }
        }
    }

    fn greedy(&self, ctx: &Ctx<'_>, grid: &FeatureGrid, targets: Option<&[usize]>, max_len: usize) -> Result<Decoded> {
        let prepared = self.attention.prepare(ctx, grid)?;
        let mut state = DecoderState::initial(ctx, self.config.decoder.hidden);
        let mut attn = AttentionState::initial(ctx, grid);
        let mut out = Decoded {
            tokens: Vec::new(),
            alphas: Vec::new(),
            probs: Vec::new(),
            truncated: false,
        };
        let steps = targets.map_or(max_len, <[usize]>::len);
        let mut prev = SOS;
        for t in 0..steps {
            let step = self.decoder.step(ctx, &self.attention, grid, &prepared, prev, state, attn)?;
            state = step.state;
            attn = step.attention;
            out.alphas.push(step.alpha);
            out.probs.push(step.probs);
            let predicted = argmax(ctx.tape.value(step.probs).data());
            match targets {
                Some(tg) => {
                    prev = tg[t];
                    if predicted != EOS {
                        out.tokens.push(predicted);
                    }
                }
                None => {
                    if predicted == EOS {
                        return Ok(out);
                    }
                    out.tokens.push(predicted);
                    prev = predicted;
                }
            }
        }
        out.truncated = targets.is_none();
        Ok(out)
    }

    fn beam(&self, ctx: &Ctx<'_>, grid: &FeatureGrid, width: usize, max_len: usize) -> Result<Decoded> {
        ensure!(width >= 1, "beam width must be at least 1");
        let prepared = self.attention.prepare(ctx, grid)?;
        let mut beams = vec![Hypothesis {
            log_prob: 0.0,
            tokens: Vec::new(),
            alphas: Vec::new(),
            probs: Vec::new(),
            state: DecoderState::initial(ctx, self.config.decoder.hidden),
            attention: AttentionState::initial(ctx, grid),
            done: false,
        }];
        for _ in 0..max_len {
            if beams.iter().all(|b| b.done) {
                break;
            }
            let mut next = Vec::new();
            for b in &beams {
                if b.done {
                    next.push(b.clone());
                    continue;
                }
                let prev = b.tokens.last().copied().unwrap_or(SOS);
                let step = self.decoder.step(ctx, &self.attention, grid, &prepared, prev, b.state, b.attention)?;
                let probs = ctx.tape.value(step.probs);
                let mut ranked: Vec<usize> = (0..probs.numel()).collect();
                ranked.sort_by(|&i, &j| probs.data()[j].total_cmp(&probs.data()[i]).then(i.cmp(&j)));
                for &k in ranked.iter().take(width) {
                    let mut h = b.clone();
                    h.log_prob += (probs.data()[k] + 1e-300).ln();
                    h.alphas.push(step.alpha);
                    h.probs.push(step.probs);
                    h.state = step.state;
                    h.attention = step.attention;
                    if k == EOS {
                        h.done = true;
                    } else {
                        h.tokens.push(k);
                    }
                    next.push(h);
                }
            }
            // Stable sort keeps expansion order among ties.
            next.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
            next.truncate(width);
            beams = next;
        }
        let best = beams
            .into_iter()
            .reduce(|a, b| if b.log_prob > a.log_prob { b } else { a })
            .expect("beam is never empty");
        Ok(Decoded {
            truncated: !best.done,
            tokens: best.tokens,
            alphas: best.alphas,
            probs: best.probs,
        })
    }

    /// Teacher-forced negative log-likelihood summed over the samples of one
    /// batch, plus the number of predicted tokens.
    pub fn batch_nll(&self, ctx: &Ctx<'_>, samples: &[&Sample]) -> Result<(Var, usize)> {
        let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        let features = self.encode(ctx, &batch_images(&images)?)?;
        let t = ctx.tape;
        let mut terms = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let grid = FeatureGrid::from_batch(ctx, features, i)?;
            let targets = &s.tokens[1..];
            let dec = self.decode(ctx, &grid, DecodeMode::TeacherForced(targets), targets.len())?;
            for (p, &y) in dec.probs.iter().zip(targets) {
                terms.push(t.nll(*p, y, 1e-12)?);
            }
        }
        let n = terms.len();
        Ok((t.add_many(&terms)?, n))
    }

    /// Decodes one image in evaluation mode with the configured strategy.
    pub fn recognize(&self, image: &Tensor) -> Result<Recognition> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.store, Mode::Eval);
        let features = self.encode(&ctx, &batch_images(&[image])?)?;
        let grid = FeatureGrid::from_batch(&ctx, features, 0)?;
        let d = &self.config.decode;
        let mode = match d.strategy {
            Strategy::Greedy => DecodeMode::Greedy,
            Strategy::Beam => DecodeMode::Beam(d.beam_width),
        };
        let dec = self.decode(&ctx, &grid, mode, d.max_len)?;
        Ok(Recognition {
            alphas: dec.alphas.iter().map(|&a| (*tape.value(a)).clone()).collect(),
            grid: (grid.height, grid.width),
            tokens: dec.tokens,
            truncated: dec.truncated,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    /// Loads a checkpoint that must match this model exactly.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let report = checkpoint::load(&mut self.store, path)?;
        if !report.missing.is_empty() || !report.unexpected.is_empty() {
            return Err(crate::Error::Checkpoint(format!(
                "{} does not match the model: missing {:?}, unexpected {:?}",
                path.display(),
                report.missing,
                report.unexpected
            )));
        }
        Ok(())
    }

    /// Initializes a GI-GRU model from a plain-GRU checkpoint. The auxiliary
    /// weights absent from the checkpoint keep their zero initialization, so
    /// the warm-started model computes exactly what the GRU model did.
    pub fn warm_start(&mut self, path: &Path) -> Result<LoadReport> {
        let report = checkpoint::load(&mut self.store, path)?;
        let aux_only = report
            .missing
            .iter()
            .all(|n| n.ends_with(".w_yv") || n.ends_with(".step_size"));
        if !aux_only || !report.unexpected.is_empty() {
            return Err(crate::Error::Checkpoint(format!(
                "{} is not a compatible GRU checkpoint: missing {:?}, unexpected {:?}",
                path.display(),
                report.missing,
                report.unexpected
            )));
        }
        Ok(report)
    }
}

#[derive(Clone, Debug)]
pub struct Recognition {
    pub tokens: Vec<usize>,
    pub alphas: Vec<Tensor>,
    /// Extent of the attention grid.
    pub grid: (usize, usize),
    pub truncated: bool,
}
