//! DenseNet feature extractor (stem plus three dense blocks) with bottleneck
//! attention modules that can be attached after any block.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{contract, ensure, Result};
use crate::kernels::ConvGeom;
use crate::nn::{BatchNorm, Conv2d, Ctx, Linear, ParamStore};
use crate::tensor::Tensor;

/// Where a BAM sits relative to the transition that follows its block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BamSite {
    #[default]
    PostTransition,
    PreTransition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    pub growth_rate: usize,
    pub layers_per_block: [usize; 3],
    /// Blocks (1-based) followed by a BAM.
    pub bam_after: BTreeSet<usize>,
    pub reduction_ratio: usize,
    pub spatial_dilation: usize,
    pub transition_compression: f64,
    pub bam_site: BamSite,
    /// Add a transition after block 3 as well.
    pub transition_after_last: bool,
    /// Bottleneck width of each dense layer, as a multiple of the growth rate.
    pub bottleneck_factor: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Small configuration that trains on a CPU in minutes.
    pub fn desk() -> Self {
        Self {
            stem_channels: 16,
            growth_rate: 8,
            layers_per_block: [2, 2, 2],
            bam_after: BTreeSet::from([2, 3]),
            reduction_ratio: 16,
            spatial_dilation: 4,
            transition_compression: 0.5,
            bam_site: BamSite::PostTransition,
            transition_after_last: false,
            bottleneck_factor: 4,
        }
    }

    /// First three blocks of DenseNet-121 with BAM after blocks 2 and 3.
    pub fn densenet121() -> Self {
        Self {
            stem_channels: 64,
            growth_rate: 32,
            layers_per_block: [6, 12, 24],
            ..Self::desk()
        }
    }

    fn has_transition(&self, block: usize) -> bool {
        block < 3 || self.transition_after_last
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.stem_channels >= 1, "stem_channels must be >= 1");
        ensure!(self.growth_rate >= 1, "growth_rate must be >= 1");
        ensure!(
            self.layers_per_block.iter().all(|&l| l >= 1),
            "layers_per_block entries must be >= 1, got {:?}",
            self.layers_per_block
        );
        ensure!(
            self.bam_after.iter().all(|b| (1..=3).contains(b)),
            "bam_after must be a subset of {{1, 2, 3}}, got {:?}",
            self.bam_after
        );
        ensure!(
            self.transition_compression > 0.0 && self.transition_compression <= 1.0,
            "transition_compression must lie in (0, 1]"
        );
        ensure!(self.reduction_ratio >= 1, "reduction_ratio must be >= 1");
        ensure!(self.spatial_dilation >= 1, "spatial_dilation must be >= 1");
        ensure!(self.bottleneck_factor >= 1, "bottleneck_factor must be >= 1");
        for site in self.plan().bam_sites() {
            ensure!(
                site.channels % self.reduction_ratio == 0,
                "reduction_ratio {} does not divide the {} channels at the BAM after block {}",
                self.reduction_ratio,
                site.channels,
                site.block
            );
        }
        Ok(())
    }

    /// Channel bookkeeping of the whole encoder, derived from the config alone.
    pub fn plan(&self) -> ChannelPlan {
        let mut blocks = Vec::with_capacity(3);
        let mut c = self.stem_channels;
        for (i, &layers) in self.layers_per_block.iter().enumerate() {
            let block = i + 1;
            let layer_inputs: Vec<usize> = (0..layers).map(|l| c + l * self.growth_rate).collect();
            let out = c + layers * self.growth_rate;
            let transition_out = self
                .has_transition(block)
                .then(|| ((out as f64 * self.transition_compression).floor() as usize).max(1));
            blocks.push(BlockPlan {
                block,
                layer_inputs,
                out_channels: out,
                transition_out,
            });
            c = transition_out.unwrap_or(out);
        }
        ChannelPlan {
            blocks,
            bam_after: self.bam_after.clone(),
            site: self.bam_site,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockPlan {
    pub block: usize,
    /// Input channel count of every dense layer in the block.
    pub layer_inputs: Vec<usize>,
    pub out_channels: usize,
    pub transition_out: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BamSitePlan {
    pub block: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelPlan {
    pub blocks: Vec<BlockPlan>,
    bam_after: BTreeSet<usize>,
    site: BamSite,
}

impl ChannelPlan {
    pub fn output_channels(&self) -> usize {
        let last = &self.blocks[2];
        last.transition_out.unwrap_or(last.out_channels)
    }

    pub fn bam_sites(&self) -> Vec<BamSitePlan> {
        self.blocks
            .iter()
            .filter(|b| self.bam_after.contains(&b.block))
            .map(|b| BamSitePlan {
                block: b.block,
                channels: match (self.site, b.transition_out) {
                    (BamSite::PostTransition, Some(t)) => t,
                    _ => b.out_channels,
                },
            })
            .collect()
    }
}

/// BN → ReLU → 1×1 bottleneck conv → BN → ReLU → 3×3 conv producing
/// `growth_rate` new channels.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub in_channels: usize,
    bn1: BatchNorm,
    conv1: Conv2d,
    bn2: BatchNorm,
    conv2: Conv2d,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        growth: usize,
        bottleneck_factor: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let width = bottleneck_factor * growth;
        Ok(Self {
            in_channels,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), in_channels)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_channels, width, 1, ConvGeom::UNIT, false, rng)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), width)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), width, growth, 3, ConvGeom::new(1, 1, 1), false, rng)?,
        })
    }

    /// New feature maps only; the caller concatenates them onto the input.
    pub fn forward(&self, ctx: &Ctx<'_>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x)[1];
        ensure!(
            c == self.in_channels,
            "dense layer expects {} input channels, got {c}",
            self.in_channels
        );
        let t = ctx.tape;
        let h = t.relu(self.bn1.forward(ctx, x)?);
        let h = self.conv1.forward(ctx, h)?;
        let h = t.relu(self.bn2.forward(ctx, h)?);
        self.conv2.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub struct DenseBlock {
    pub layers: Vec<DenseLayer>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl DenseBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        layers: usize,
        growth: usize,
        bottleneck_factor: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| {
                DenseLayer::new(
                    store,
                    &format!("{name}.layer{}", l + 1),
                    in_channels + l * growth,
                    growth,
                    bottleneck_factor,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            out_channels: in_channels + layers.len() * growth,
            layers,
            in_channels,
        })
    }

    pub fn forward(&self, ctx: &Ctx<'_>, x: Var) -> Result<Var> {
        let mut features = x;
        for layer in &self.layers {
            let new = layer.forward(ctx, features)?;
            features = ctx.tape.concat_channels(&[features, new])?;
        }
        Ok(features)
    }
}

/// 1×1 conv compressing the channels, then 2×2 average pooling at stride 2.
#[derive(Clone, Debug)]
pub struct Transition {
    pub conv: Conv2d,
}

impl Transition {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_channels, out_channels, 1, ConvGeom::UNIT, false, rng)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx<'_>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        ensure!(
            shape.len() == 4 && shape[2] >= 2 && shape[3] >= 2,
            "transition needs spatial extents >= 2, got {shape:?}"
        );
        let y = self.conv.forward(ctx, x)?;
        ctx.tape.avg_pool2d(y, 2, 2)
    }
}

/// Global average pool → MLP (C → C/r → C) → batch norm. Returns logits.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
    pub bn: BatchNorm,
    pub channels: usize,
}

impl ChannelAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        ensure!(
            channels % reduction == 0,
            "reduction ratio {reduction} does not divide {channels} channels"
        );
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), channels)?,
            channels,
        })
    }

    pub fn forward(&self, ctx: &Ctx<'_>, q: Var) -> Result<Var> {
        let t = ctx.tape;
        let n = t.shape(q)[0];
        let pooled = t.reshape(t.global_avg_pool(q)?, &[n, self.channels])?;
        let h = t.relu(self.fc1.forward(ctx, pooled)?);
        let logits = t.reshape(self.fc2.forward(ctx, h)?, &[n, self.channels, 1, 1])?;
        self.bn.forward(ctx, logits)
    }
}

/// 1×1 reduce → two dilated 3×3 convs → 1×1 to a single map → batch norm.
/// Returns an N×1×H×W logit map with the input's spatial extents.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub reduce: Conv2d,
    pub dilated1: Conv2d,
    pub dilated2: Conv2d,
    pub project: Conv2d,
    pub bn: BatchNorm,
}

impl SpatialAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(
            channels % reduction == 0,
            "reduction ratio {reduction} does not divide {channels} channels"
        );
        let hidden = channels / reduction;
        let dil = ConvGeom::new(1, dilation, dilation);
        Ok(Self {
            reduce: Conv2d::new(store, &format!("{name}.reduce"), channels, hidden, 1, ConvGeom::UNIT, true, rng)?,
            dilated1: Conv2d::new(store, &format!("{name}.dilated1"), hidden, hidden, 3, dil, true, rng)?,
            dilated2: Conv2d::new(store, &format!("{name}.dilated2"), hidden, hidden, 3, dil, true, rng)?,
            project: Conv2d::new(store, &format!("{name}.project"), hidden, 1, 1, ConvGeom::UNIT, true, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), 1)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx<'_>, q: Var) -> Result<Var> {
        let t = ctx.tape;
        let h = t.relu(self.reduce.forward(ctx, q)?);
        let h = t.relu(self.dilated1.forward(ctx, h)?);
        let h = t.relu(self.dilated2.forward(ctx, h)?);
        let m = self.project.forward(ctx, h)?;
        self.bn.forward(ctx, m)
    }
}

/// Bottleneck attention: `Q + Q ⊗ σ(M_ch(Q) + M_sp(Q))`.
#[derive(Clone, Debug)]
pub struct Bam {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl Bam {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            channel: ChannelAttention::new(store, &format!("{name}.channel"), channels, reduction, rng)?,
            spatial: SpatialAttention::new(store, &format!("{name}.spatial"), channels, reduction, dilation, rng)?,
        })
    }

    /// The attention map `M(Q)`, broadcast to the shape of `Q`.
    pub fn attention_map(&self, ctx: &Ctx<'_>, q: Var) -> Result<Var> {
        let t = ctx.tape;
        let ch = self.channel.forward(ctx, q)?;
        let sp = self.spatial.forward(ctx, q)?;
        Ok(t.sigmoid(t.add(ch, sp)?))
    }

    pub fn forward(&self, ctx: &Ctx<'_>, q: Var) -> Result<Var> {
        let t = ctx.tape;
        let m = self.attention_map(ctx, q)?;
        let gated = t.mul(q, m)?;
        t.add(q, gated)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    block: DenseBlock,
    transition: Option<Transition>,
    bam: Option<Bam>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm,
    stages: Vec<Stage>,
    out_channels: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let plan = config.plan();
        let stem_conv = Conv2d::new(
            store,
            "encoder.stem.conv",
            1,
            config.stem_channels,
            7,
            ConvGeom::new(2, 3, 1),
            false,
            rng,
        )?;
        let stem_bn = BatchNorm::new(store, "encoder.stem.bn", config.stem_channels)?;
        let mut stages = Vec::with_capacity(3);
        let mut c = config.stem_channels;
        for bp in &plan.blocks {
            let b = bp.block;
            let block = DenseBlock::new(
                store,
                &format!("encoder.block{b}"),
                c,
                config.layers_per_block[b - 1],
                config.growth_rate,
                config.bottleneck_factor,
                rng,
            )?;
            debug_assert_eq!(block.out_channels, bp.out_channels);
            let transition = match bp.transition_out {
                Some(out) => Some(Transition::new(store, &format!("encoder.transition{b}"), bp.out_channels, out, rng)?),
                None => None,
            };
            let bam = match plan.bam_sites().into_iter().find(|s| s.block == b) {
                Some(site) => Some(Bam::new(
                    store,
                    &format!("encoder.bam{b}"),
                    site.channels,
                    config.reduction_ratio,
                    config.spatial_dilation,
                    rng,
                )?),
                None => None,
            };
            c = bp.transition_out.unwrap_or(bp.out_channels);
            stages.push(Stage { block, transition, bam });
        }
        Ok(Self {
            config: config.clone(),
            stem_conv,
            stem_bn,
            stages,
            out_channels: c,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn blocks(&self) -> impl Iterator<Item = &DenseBlock> {
        self.stages.iter().map(|s| &s.block)
    }

    pub fn bam(&self, block: usize) -> Option<&Bam> {
        self.stages.get(block.checked_sub(1)?)?.bam.as_ref()
    }

    /// Spatial extents of the feature grid for an `h × w` image, or an error
    /// if the image does not survive the downsampling stages.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let reduce = |x: usize, stage: &str| -> Result<usize> {
            match x {
                0 | 1 => contract!("image too small: spatial extent {x} before {stage}"),
                _ => Ok(x / 2),
            }
        };
        let stem = |x: usize| -> Result<usize> {
            let after_conv = ConvGeom::new(2, 3, 1).out_extent(x, 7);
            let after_pool = after_conv.and_then(|y| ConvGeom::new(2, 1, 1).out_extent(y, 3));
            after_pool.ok_or_else(|| crate::Error::contract("image too small for the stem"))
        };
        let (mut h, mut w) = (stem(h)?, stem(w)?);
        for stage in &self.stages {
            if stage.transition.is_some() {
                h = reduce(h, "a transition")?;
                w = reduce(w, "a transition")?;
            }
        }
        Ok((h, w))
    }

    /// Image batch N×1×H×W → feature grid N×C×H′×W′.
    pub fn forward(&self, ctx: &Ctx<'_>, image: Var) -> Result<Var> {
        let t = ctx.tape;
        let shape = t.shape(image);
        let &[_, 1, h, w] = shape.as_slice() else {
            contract!("encoder expects an N×1×H×W image batch, got {shape:?}");
        };
        self.output_extent(h, w)?;

        let x = self.stem_conv.forward(ctx, image)?;
        let x = t.relu(self.stem_bn.forward(ctx, x)?);
        let mut x = t.max_pool2d(x, 3, 2, 1)?;
        for stage in &self.stages {
            x = stage.block.forward(ctx, x)?;
            let pre = self.config.bam_site == BamSite::PreTransition;
            if let (true, Some(bam)) = (pre, &stage.bam) {
                x = bam.forward(ctx, x)?;
            }
            if let Some(tr) = &stage.transition {
                x = tr.forward(ctx, x)?;
            }
            if let (false, Some(bam)) = (pre, &stage.bam) {
                x = bam.forward(ctx, x)?;
            }
        }
        Ok(x)
    }
}

/// Encoder output for one image, viewed as `L = H·W` positions of `C`-channel
/// feature vectors.
#[derive(Clone, Debug)]
pub struct FeatureGrid {
    /// L×C matrix; row `i` is the feature vector of position `i` (row-major over H×W).
    pub positions: Var,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureGrid {
    /// Slices sample `index` out of an N×C×H×W feature batch.
    pub fn from_batch(ctx: &Ctx<'_>, features: Var, index: usize) -> Result<Self> {
        let t = ctx.tape;
        let shape = t.shape(features);
        let &[n, c, h, w] = shape.as_slice() else {
            contract!("feature batch must be N×C×H×W, got {shape:?}");
        };
        ensure!(index < n, "sample {index} outside batch of {n}");
        let one = t.narrow(features, 0, index, 1)?;
        let flat = t.reshape(one, &[c, h * w])?;
        Ok(Self {
            positions: t.transpose(flat)?,
            height: h,
            width: w,
            channels: c,
        })
    }

    pub fn from_tensor(ctx: &Ctx<'_>, features: &Tensor) -> Result<Self> {
        let v = ctx.tape.constant(features.clone());
        Self::from_batch(ctx, v, 0)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn dense_block_channel_arithmetic() {
        let mut store = ParamStore::new();
        let block = DenseBlock::new(&mut store, "b", 8, 3, 4, 4, &mut rng()).unwrap();
        assert_eq!(block.out_channels, 20);
        let inputs: Vec<usize> = block.layers.iter().map(|l| l.in_channels).collect();
        assert_eq!(inputs, vec![8, 12, 16]);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Train);
        let x = tape.constant(Tensor::uniform(&[2, 8, 5, 5], 1.0, &mut rng()));
        assert_eq!(tape.shape(block.forward(&ctx, x).unwrap()), vec![2, 20, 5, 5]);
    }

    #[test]
    fn dense_layer_rejects_wrong_channel_count() {
        let mut store = ParamStore::new();
        let layer = DenseLayer::new(&mut store, "l", 8, 4, 4, &mut rng()).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Train);
        let x = tape.constant(Tensor::zeros(&[1, 9, 4, 4]));
        assert!(layer.forward(&ctx, x).is_err());
    }

    #[test]
    fn transition_halves_extent_and_compresses() {
        let mut store = ParamStore::new();
        let tr = Transition::new(&mut store, "t", 16, 8, &mut rng()).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Train);
        let x = tape.constant(Tensor::uniform(&[1, 16, 8, 8], 1.0, &mut rng()));
        assert_eq!(tape.shape(tr.forward(&ctx, x).unwrap()), vec![1, 8, 4, 4]);
        let tiny = tape.constant(Tensor::zeros(&[1, 16, 1, 1]));
        assert!(tr.forward(&ctx, tiny).is_err());
    }

    #[test]
    fn transition_with_identity_conv_is_pooling() {
        let mut store = ParamStore::new();
        let tr = Transition::new(&mut store, "t", 1, 1, &mut rng()).unwrap();
        store.set_value(tr.conv.weight, Tensor::ones(&[1, 1, 1, 1])).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval);
        let img = Tensor::uniform(&[1, 1, 6, 6], 1.0, &mut rng());
        let x = tape.constant(img.clone());
        let got = tape.value(tr.forward(&ctx, x).unwrap());
        let pooled = tape.value(tape.avg_pool2d(x, 2, 2).unwrap());
        assert_eq!(*got, *pooled);
    }

    #[test]
    fn spatial_attention_preserves_extent() {
        let mut store = ParamStore::new();
        let sp = SpatialAttention::new(&mut store, "s", 8, 4, 4, &mut rng()).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Train);
        for (h, w) in [(1, 1), (3, 7), (8, 8)] {
            let x = tape.constant(Tensor::uniform(&[2, 8, h, w], 1.0, &mut rng()));
            assert_eq!(tape.shape(sp.forward(&ctx, x).unwrap()), vec![2, 1, h, w]);
        }
    }

    #[test]
    fn channel_attention_is_symmetric_in_identical_channels() {
        let mut store = ParamStore::new();
        let ca = ChannelAttention::new(&mut store, "c", 4, 2, &mut rng()).unwrap();
        // Make the MLP treat channels alike: every fc weight row identical.
        store.set_value(ca.fc1.weight, Tensor::full(&[2, 4], 0.3)).unwrap();
        store.set_value(ca.fc2.weight, Tensor::full(&[4, 2], -0.2)).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Train);
        let plane = Tensor::uniform(&[1, 1, 3, 3], 1.0, &mut rng());
        let mut data = Vec::new();
        for _ in 0..2 {
            for _ in 0..4 {
                data.extend_from_slice(plane.data());
            }
        }
        let mut x = Tensor::new(&[2, 4, 3, 3], data).unwrap();
        // Second sample differs so batch norm has a non-degenerate batch.
        x.data_mut()[36..].iter_mut().for_each(|v| *v *= 2.0);
        let xv = tape.constant(x);
        let logits = tape.value(ca.forward(&ctx, xv).unwrap());
        for n in 0..2 {
            let row = &logits.data()[n * 4..(n + 1) * 4];
            assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-12), "{row:?}");
        }
    }

    #[test]
    fn zero_branches_scale_input_by_one_and_a_half() {
        let mut store = ParamStore::new();
        let bam = Bam::new(&mut store, "bam", 4, 2, 1, &mut rng()).unwrap();
        for bn in [&bam.channel.bn, &bam.spatial.bn] {
            let c = store.value(bn.gamma).numel();
            store.set_value(bn.gamma, Tensor::zeros(&[c])).unwrap();
        }
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Train);
        let q = Tensor::uniform(&[2, 4, 3, 3], 2.0, &mut rng());
        let out = tape.value(bam.forward(&ctx, tape.constant(q.clone())).unwrap());
        for (o, x) in out.data().iter().zip(q.data()) {
            assert_eq!(*o, 1.5 * x);
        }
    }

    #[test]
    fn desk_encoder_shapes() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &EncoderConfig::desk(), &mut rng()).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Train);
        let x = tape.constant(Tensor::uniform(&[1, 1, 64, 64], 1.0, &mut rng()));
        let y = enc.forward(&ctx, x).unwrap();
        // 64 → 32 (stem conv) → 16 (max pool) → 8 → 4 (two transitions).
        assert_eq!(tape.shape(y), vec![1, enc.out_channels(), 4, 4]);
        assert_eq!(enc.out_channels(), 32);
        assert_eq!(enc.output_extent(64, 128).unwrap(), (4, 8));
        let small = tape.constant(Tensor::zeros(&[1, 1, 8, 8]));
        assert!(matches!(enc.forward(&ctx, small), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn bam_sites_follow_config() {
        let mut cfg = EncoderConfig::desk();
        cfg.bam_after = BTreeSet::new();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &cfg, &mut rng()).unwrap();
        assert!((1..=3).all(|b| enc.bam(b).is_none()));
        cfg.bam_after = BTreeSet::from([4]);
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::desk();
        cfg.reduction_ratio = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn densenet121_preset_reaches_1024_channels() {
        let plan = EncoderConfig::densenet121().plan();
        assert_eq!(plan.output_channels(), 1024);
        assert_eq!(plan.blocks[0].out_channels, 256);
        assert_eq!(plan.blocks[1].out_channels, 512);
    }
}
