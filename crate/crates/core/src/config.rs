//! Experiment configuration: one JSON document, validated before any compute,
//! with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attention::AttentionConfig;
use crate::data::{RasterConfig, SynthConfig, Vocabulary};
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{DecodeConfig, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    /// A directory of `.inkml` files.
    Inkml,
    /// A dataset cache directory (PGM images plus `manifest.tsv`).
    Cache,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Input directory for the `inkml` and `cache` sources.
    pub dir: Option<PathBuf>,
    pub synthetic: SynthConfig,
    pub raster: RasterConfig,
    /// Output symbols; the synthetic symbol set when absent.
    pub vocabulary: Option<Vocabulary>,
    /// Hold out a tenth of the samples for validation. When false, the
    /// training samples double as the validation set.
    pub holdout: bool,
    /// When set, the loaded dataset is also written here as a cache.
    pub write_cache: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            dir: None,
            synthetic: SynthConfig::default(),
            raster: RasterConfig::default(),
            vocabulary: None,
            holdout: true,
            write_cache: None,
        }
    }
}

impl DataConfig {
    pub fn vocabulary(&self) -> Vocabulary {
        self.vocabulary.clone().unwrap_or_else(Vocabulary::synthetic)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Per-token training loss whose first crossing is reported.
    pub loss_threshold: f64,
    /// Stop a variant once its loss crosses the threshold.
    pub stop_at_threshold: bool,
    /// Replaces `train.grad_clip` for every variant; 0 lets runs diverge.
    pub grad_clip: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            loss_threshold: 0.5,
            stop_at_threshold: false,
            grad_clip: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root of every random stream: data, initialization and shuffling.
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub decoder: DecoderConfig,
    pub decode: DecodeConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub ablation: AblationConfig,
    /// Checkpoint to warm-start training from, typically a plain-GRU model
    /// for a GI-GRU run.
    pub init_checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            attention: AttentionConfig::default(),
            decoder: DecoderConfig::default(),
            decode: DecodeConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            ablation: AblationConfig::default(),
            init_checkpoint: None,
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Independent 64-bit seed for one named random stream of a run.
pub fn derive_seed(root: u64, stream: &str) -> u64 {
    // FNV-1a over the stream name, then a splitmix64 finalizer.
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in stream.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = root ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical pretty-printed form.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            attention: self.attention.clone(),
            decoder: self.decoder.clone(),
            decode: self.decode.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |section: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Contract(m) => Error::Config(format!("{section}: {m}")),
                other => other,
            })
        };
        wrap("model", self.model().validate())?;
        wrap("train", self.train.validate())?;
        wrap("data.synthetic", self.data.synthetic.validate())?;
        wrap("data.raster", self.data.raster.validate())?;
        if !(self.ablation.loss_threshold > 0.0) {
            return Err(Error::Config(format!(
                "ablation.loss_threshold must be positive, got {}",
                self.ablation.loss_threshold
            )));
        }
        if !(self.ablation.grad_clip >= 0.0) {
            return Err(Error::Config("ablation.grad_clip must be non-negative".into()));
        }
        if self.data.source != DataSource::Synthetic && self.data.dir.is_none() {
            return Err(Error::Config(format!(
                "data.dir is required when data.source is {:?}",
                self.data.source
            )));
        }
        Ok(())
    }

    /// Applies `a.b.c=value` overrides. The value is parsed as JSON when
    /// possible and taken as a string otherwise. Unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self).map_err(config_err)?;
        for ov in overrides {
            let ov = ov.as_ref();
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {ov:?} is not KEY=VALUE")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("unknown key {key:?}: {:?} is not a section", parts[..i].join("."))))?;
                node = obj
                    .get_mut(*part)
                    .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
            }
            *node = value;
        }
        let cfg: Self = serde_json::from_value(root).map_err(|e| Error::Config(format!("after overrides: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
