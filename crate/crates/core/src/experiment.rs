//! End-to-end runs driven by an [`ExperimentConfig`]: training, evaluation,
//! ablation grids, attention dumps and gradient checks. Every artifact is a
//! pure function of the config and its root seed.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, DataSource, ExperimentConfig};
use crate::data::cache::{load_dataset, load_inkml_dir, save_dataset, write_pgm};
use crate::data::{generate, split_indices, Sample, Vocabulary};
use crate::decoder::CellKind;
use crate::error::{Error, Result};
use crate::gradcheck::{self, CheckOutcome, GradCheckConfig};
use crate::metrics::EvalReport;
use crate::model::Model;
use crate::train::{evaluate, EpochRecord, Trainer};

pub const METRICS_CSV: &str = "metrics.csv";
pub const REPORT_JSON: &str = "report.json";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const CONFIG_JSON: &str = "config.json";
pub const EVAL_JSON: &str = "eval.json";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e3;

/// Loads every sample the config describes, in a fixed order.
pub fn load_samples(cfg: &ExperimentConfig, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    let d = &cfg.data;
    let samples = match d.source {
        DataSource::Synthetic => generate(derive_seed(cfg.seed, "data"), &d.synthetic, &d.raster, vocab)?,
        DataSource::Inkml => load_inkml_dir(required_dir(cfg)?, &d.raster, vocab)?,
        DataSource::Cache => load_dataset(required_dir(cfg)?, vocab)?,
    };
    if samples.is_empty() {
        return Err(Error::Contract("the configured dataset is empty".into()));
    }
    if let Some(dir) = &d.write_cache {
        save_dataset(dir, &samples)?;
    }
    Ok(samples)
}

fn required_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.data
        .dir
        .as_deref()
        .ok_or_else(|| Error::Config("data.dir is not set".into()))
}

pub struct Split {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Seeded 90/10 split. Without holdout, or when the holdout would be empty,
/// validation reuses the training samples.
pub fn split(cfg: &ExperimentConfig, samples: Vec<Sample>) -> Split {
    let (train_idx, val_idx) = split_indices(samples.len(), derive_seed(cfg.seed, "split"));
    if !cfg.data.holdout || val_idx.is_empty() {
        if cfg.data.holdout {
            log::warn!("{} samples leave no validation holdout; validating on the training set", samples.len());
        }
        return Split {
            val: samples.clone(),
            train: samples,
        };
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Split {
        train: pick(&train_idx),
        val: pick(&val_idx),
    }
}

pub fn new_model(cfg: &ExperimentConfig) -> Result<Model> {
    Model::new(&cfg.model(), cfg.data.vocabulary(), derive_seed(cfg.seed, "init"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best: EvalReport,
    pub history: Vec<EpochRecord>,
    /// Set when training stopped on a non-finite or exploding loss.
    pub diverged: bool,
}

/// Trains from scratch (or from `init_checkpoint`) and writes the metrics CSV,
/// the JSON report, the effective config and the best and last checkpoints
/// into `out`.
pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    write_json(&out.join(CONFIG_JSON), cfg)?;
    let vocab = cfg.data.vocabulary();
    let data = split(cfg, load_samples(cfg, &vocab)?);
    log::info!("training on {} samples, validating on {}", data.train.len(), data.val.len());

    let mut model = new_model(cfg)?;
    if let Some(path) = &cfg.init_checkpoint {
        let r = model.warm_start(path)?;
        log::info!("warm start from {}: {} tensors left at init", path.display(), r.missing.len());
    }
    let mut trainer = Trainer::new(model, cfg.train.clone(), derive_seed(cfg.seed, "shuffle"))?;

    let mut csv = BufWriter::new(File::create(out.join(METRICS_CSV))?);
    writeln!(csv, "{}", EpochRecord::CSV_HEADER)?;
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, EvalReport)> = None;
    let mut diverged = false;
    for _ in 0..cfg.train.max_epochs {
        let rec = trainer.run_epoch(&data.train, &data.val)?;
        writeln!(csv, "{}", rec.csv_row())?;
        csv.flush()?;
        log::info!(
            "epoch {} loss {:.4} lr {:e} exprate {:.2} wer {:.2}",
            rec.epoch,
            rec.loss,
            rec.lr,
            rec.report.exprate,
            rec.report.wer
        );
        if best.as_ref().is_none_or(|(_, b)| rec.report.exprate > b.exprate) {
            trainer.model.save(&out.join(BEST_CKPT))?;
            best = Some((rec.epoch, rec.report.clone()));
        }
        let done = cfg
            .train
            .target_exprate
            .is_some_and(|t| rec.report.exprate >= t);
        diverged = !rec.loss.is_finite() || rec.loss > DIVERGENCE_LOSS;
        history.push(rec);
        if diverged {
            log::warn!("loss diverged; stopping");
            break;
        }
        if done {
            break;
        }
    }
    trainer.model.save(&out.join(LAST_CKPT))?;
    let (best_epoch, best) = best.expect("at least one epoch ran");
    let report = TrainReport {
        seed: cfg.seed,
        epochs: history.len(),
        best_epoch,
        best,
        history,
        diverged,
    };
    write_json(&out.join(REPORT_JSON), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutput {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub report: EvalReport,
}

/// Evaluates a checkpoint on the validation samples of the configured dataset
/// and writes `eval.json` into `out`.
pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<EvalOutput> {
    cfg.validate()?;
    let mut model = new_model(cfg)?;
    model.load(checkpoint)?;
    let vocab = cfg.data.vocabulary();
    let data = split(cfg, load_samples(cfg, &vocab)?);
    let report = evaluate(&model, &data.val)?;
    fs::create_dir_all(out)?;
    let output = EvalOutput {
        seed: cfg.seed,
        checkpoint: checkpoint.to_path_buf(),
        report,
    };
    write_json(&out.join(EVAL_JSON), &output)?;
    Ok(output)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    BamPosition,
    LayerCounts,
    Decoder,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::BamPosition => "bam_position",
            AblationAxis::LayerCounts => "layer_counts",
            AblationAxis::Decoder => "decoder",
        }
    }

    /// Named variants of `base` along this axis.
    pub fn variants(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationAxis::BamPosition => {
                let sets: [&[usize]; 8] = [&[], &[1], &[2], &[3], &[1, 3], &[2, 3], &[1, 2], &[1, 2, 3]];
                sets.iter()
                    .map(|set| {
                        let name = if set.is_empty() {
                            "none".to_string()
                        } else {
                            set.iter().map(|b| format!("block{b}")).collect::<Vec<_>>().join("+")
                        };
                        (name, with(&|c| c.encoder.bam_after = set.iter().copied().collect()))
                    })
                    .collect()
            }
            AblationAxis::LayerCounts => [[2, 2, 2], [3, 3, 3], [1, 2, 4]]
                .into_iter()
                .map(|l| {
                    let name = format!("{}-{}-{}", l[0], l[1], l[2]);
                    let mut c = with(&|c| c.encoder.layers_per_block = l);
                    fit_reduction_ratio(&mut c);
                    (name, c)
                })
                .collect(),
            AblationAxis::Decoder => [CellKind::Gru, CellKind::GiGru]
                .into_iter()
                .map(|cell| (cell.name().to_string(), with(&|c| c.decoder.cell = cell)))
                .collect(),
        }
    }
}

/// Lowers the BAM reduction ratio to the largest value not above the
/// configured one that divides the channel count at every BAM site.
fn fit_reduction_ratio(cfg: &mut ExperimentConfig) {
    let sites: Vec<usize> = cfg.encoder.plan().bam_sites().iter().map(|s| s.channels).collect();
    let r0 = cfg.encoder.reduction_ratio;
    let r = (1..=r0).rev().find(|r| sites.iter().all(|c| c % r == 0)).unwrap_or(1);
    if r != r0 {
        log::info!(
            "layers {:?}: reduction ratio {r0} -> {r} to divide BAM channels {sites:?}",
            cfg.encoder.layers_per_block
        );
        cfg.encoder.reduction_ratio = r;
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bam_position" => Ok(AblationAxis::BamPosition),
            "layer_counts" => Ok(AblationAxis::LayerCounts),
            "decoder" => Ok(AblationAxis::Decoder),
            _ => Err(Error::Config(format!(
                "unknown ablation axis {s:?}; expected bam_position, layer_counts or decoder"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub diverged: bool,
    pub epochs: usize,
    pub final_loss: f64,
    /// First epoch whose training loss was at or below the threshold.
    pub epochs_to_threshold: Option<usize>,
    pub losses: Vec<f64>,
    /// Validation metrics after the last epoch; absent for diverged runs.
    pub report: Option<EvalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub axis: AblationAxis,
    pub loss_threshold: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "variant,exprate,le1,le2,le3,wer,final_loss,epochs,epochs_to_loss_{}\n",
            self.loss_threshold
        );
        for r in &self.rows {
            let metrics = match (&r.report, r.diverged) {
                (Some(m), false) => format!("{:.4},{:.4},{:.4},{:.4},{:.4}", m.exprate, m.le1, m.le2, m.le3, m.wer),
                _ => "diverged,,,,".to_string(),
            };
            let reached = r.epochs_to_threshold.map(|e| e.to_string()).unwrap_or_default();
            s += &format!("{},{metrics},{:.6},{},{reached}\n", r.variant, r.final_loss, r.epochs);
        }
        s
    }
}

/// Trains every variant of `axis` on the same samples with the same seeds and
/// writes `ablation.csv` and `ablation.json` into `out`.
pub fn ablate(cfg: &ExperimentConfig, axis: AblationAxis, out: &Path) -> Result<AblationTable> {
    cfg.validate()?;
    let variants = axis.variants(cfg);
    for (name, v) in &variants {
        v.validate().map_err(|e| Error::Config(format!("variant {name}: {e}")))?;
    }
    let vocab = cfg.data.vocabulary();
    let data = split(cfg, load_samples(cfg, &vocab)?);
    let threshold = cfg.ablation.loss_threshold;
    let mut rows = Vec::new();
    for (name, mut v) in variants {
        v.train.grad_clip = cfg.ablation.grad_clip;
        log::info!("ablation {axis}: variant {name}");
        let mut trainer = Trainer::new(new_model(&v)?, v.train.clone(), derive_seed(v.seed, "shuffle"))?;
        let mut losses = Vec::new();
        let mut reached = None;
        let mut diverged = false;
        let mut report = None;
        for _ in 0..v.train.max_epochs {
            let rec = trainer.run_epoch(&data.train, &data.val)?;
            log::info!("  epoch {} loss {:.4} exprate {:.2}", rec.epoch, rec.loss, rec.report.exprate);
            losses.push(rec.loss);
            if !rec.loss.is_finite() || rec.loss > DIVERGENCE_LOSS {
                diverged = true;
                break;
            }
            report = Some(rec.report);
            if reached.is_none() && rec.loss <= threshold {
                reached = Some(rec.epoch);
                if cfg.ablation.stop_at_threshold {
                    break;
                }
            }
        }
        rows.push(AblationRow {
            variant: name,
            diverged,
            epochs: losses.len(),
            final_loss: losses.last().copied().unwrap_or(f64::NAN),
            epochs_to_threshold: reached,
            losses,
            report: if diverged { None } else { report },
        });
    }
    let table = AblationTable {
        seed: cfg.seed,
        axis,
        loss_threshold: threshold,
        rows,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join(ABLATION_CSV), table.to_csv())?;
    write_json(&out.join(ABLATION_JSON), &table)?;
    Ok(table)
}

#[derive(Clone, Debug)]
pub struct AttentionDump {
    pub prediction: String,
    pub reference: String,
    pub steps: usize,
    pub files: Vec<PathBuf>,
}

/// Scales one attention map so its maximum is 255 and enlarges each cell to
/// `scale`×`scale` pixels.
pub fn heatmap(alpha: &[f64], height: usize, width: usize, scale: usize) -> Vec<u8> {
    let max = alpha.iter().copied().fold(0.0, f64::max);
    let (h, w) = (height * scale, width * scale);
    let mut px = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let a = alpha[(r / scale) * width + c / scale];
            px[r * w + c] = if max > 0.0 { (255.0 * a / max).round() as u8 } else { 0 };
        }
    }
    px
}

/// Decodes sample `index` of the configured dataset and writes one PGM
/// heatmap per decoding step plus the predicted LaTeX.
pub fn attention_dump(cfg: &ExperimentConfig, checkpoint: &Path, index: usize, out: &Path) -> Result<AttentionDump> {
    cfg.validate()?;
    let mut model = new_model(cfg)?;
    model.load(checkpoint)?;
    let vocab = cfg.data.vocabulary();
    let samples = load_samples(cfg, &vocab)?;
    let sample = samples.get(index).ok_or_else(|| {
        Error::Contract(format!("sample index {index} out of range for {} samples", samples.len()))
    })?;
    let rec = model.recognize(&sample.image)?;
    if rec.truncated {
        log::warn!("decoding hit max_len without emitting the end token");
    }
    let (gh, gw) = rec.grid;
    let scale = (sample.image.shape()[1] / gh.max(1)).max(1);
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for (t, alpha) in rec.alphas.iter().enumerate() {
        let path = out.join(format!("step_{t:03}.pgm"));
        let mut w = BufWriter::new(File::create(&path)?);
        // The header comment carries the seed; write_pgm emits a bare header.
        let px = heatmap(alpha.data(), gh, gw, scale);
        let mut buf = Vec::new();
        write_pgm(&mut buf, gw * scale, gh * scale, &px)?;
        let nl = buf.iter().position(|&b| b == b'\n').expect("pgm header") + 1;
        w.write_all(&buf[..nl])?;
        writeln!(w, "# seed {} sample {index} step {t}", cfg.seed)?;
        w.write_all(&buf[nl..])?;
        w.flush()?;
        files.push(path);
    }
    let prediction = model.vocab.detokenize(&rec.tokens);
    fs::write(out.join("prediction.txt"), format!("{prediction}\n"))?;
    Ok(AttentionDump {
        prediction,
        reference: sample.label.clone(),
        steps: rec.alphas.len(),
        files,
    })
}

/// Runs the operation and whole-model finite-difference suites.
pub fn gradcheck() -> Result<Vec<CheckOutcome>> {
    let mut out = gradcheck::op_suite(&GradCheckConfig::default())?;
    out.extend(gradcheck::model_suites()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::cache::read_pgm;

    fn small(seed: u64) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.seed = seed;
        let m = crate::model::ModelConfig::tiny(CellKind::GiGru);
        c.encoder = m.encoder;
        c.attention = m.attention;
        c.decoder = m.decoder;
        c.decode = m.decode;
        c.data.synthetic.count = 6;
        c.data.synthetic.max_len = 4;
        c.data.raster.target_height = 32;
        c.train.max_epochs = 2;
        c.train.batch_size = 3;
        c
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let mut c = small(3);
        c.data.synthetic.count = 30;
        let v = c.data.vocabulary();
        let a = split(&c, load_samples(&c, &v).unwrap());
        let b = split(&c, load_samples(&c, &v).unwrap());
        assert_eq!((a.train.len(), a.val.len()), (27, 3));
        let labels = |s: &[Sample]| s.iter().map(|x| x.label.clone()).collect::<Vec<_>>();
        assert_eq!(labels(&a.val), labels(&b.val));
        c.data.holdout = false;
        let all = split(&c, load_samples(&c, &v).unwrap());
        assert_eq!((all.train.len(), all.val.len()), (30, 30));
    }

    #[test]
    fn train_writes_artifacts_and_eval_reads_them() {
        let dir = tempfile::tempdir().unwrap();
        let c = small(1);
        let r = train(&c, dir.path()).unwrap();
        assert_eq!(r.epochs, 2);
        for f in [METRICS_CSV, REPORT_JSON, BEST_CKPT, LAST_CKPT, CONFIG_JSON] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let csv = fs::read_to_string(dir.path().join(METRICS_CSV)).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let saved = ExperimentConfig::load(&dir.path().join(CONFIG_JSON)).unwrap();
        assert_eq!(saved, c);
        let e = eval(&c, &dir.path().join(LAST_CKPT), dir.path()).unwrap();
        assert_eq!(e.report.samples, 6);
    }

    #[test]
    fn decoder_ablation_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(2);
        c.train.max_epochs = 1;
        let t = ablate(&c, AblationAxis::Decoder, dir.path()).unwrap();
        let names: Vec<_> = t.rows.iter().map(|r| r.variant.as_str()).collect();
        assert_eq!(names, ["gru", "gi_gru"]);
        let csv = fs::read_to_string(dir.path().join(ABLATION_CSV)).unwrap();
        assert!(csv.starts_with("variant,exprate,le1,le2,le3,wer,final_loss,epochs,epochs_to_loss_0.5\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn axes_parse_and_expand() {
        let base = ExperimentConfig::default();
        assert_eq!("decoder".parse::<AblationAxis>().unwrap(), AblationAxis::Decoder);
        assert!("bam".parse::<AblationAxis>().is_err());
        let bam = AblationAxis::BamPosition.variants(&base);
        assert_eq!(bam.len(), 8);
        assert_eq!(bam[0].0, "none");
        assert_eq!(bam[5].0, "block2+block3");
        assert_eq!(bam[5].1.encoder.bam_after, [2, 3].into());
        let layers = AblationAxis::LayerCounts.variants(&base);
        assert_eq!(layers[2].1.encoder.layers_per_block, [1, 2, 4]);
        assert_eq!(layers[0].1.encoder.reduction_ratio, 16);
        for (name, v) in &layers {
            assert!(v.validate().is_ok(), "{name}");
        }
    }

    #[test]
    fn heatmap_scales_peak_to_white() {
        let px = heatmap(&[0.25, 0.25, 0.5, 0.0], 2, 2, 2);
        assert_eq!(px.len(), 16);
        assert_eq!(px[0], 128);
        assert_eq!(px[3], 128);
        assert_eq!(px[2 * 4], 255);
        assert_eq!(px[15], 0);
        assert_eq!(*px.iter().max().unwrap(), 255);
    }

    #[test]
    fn attention_dump_writes_one_map_per_step() {
        let dir = tempfile::tempdir().unwrap();
        let c = small(4);
        let model = new_model(&c).unwrap();
        let ckpt = dir.path().join("m.ckpt");
        model.save(&ckpt).unwrap();
        let d = attention_dump(&c, &ckpt, 0, dir.path()).unwrap();
        assert_eq!(d.files.len(), d.steps);
        let (w, h, px) = read_pgm(&mut File::open(&d.files[0]).unwrap()).unwrap();
        assert_eq!(h, 32);
        assert_eq!(w % 2, 0);
        assert_eq!(*px.iter().max().unwrap(), 255);
        let bytes = fs::read(&d.files[0]).unwrap();
        assert!(bytes.windows(8).any(|w| w == b"# seed 4"));
        assert!(dir.path().join("prediction.txt").is_file());
        assert!(attention_dump(&c, &ckpt, 99, dir.path()).is_err());
    }
}
