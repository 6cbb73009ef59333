//! Run configuration and the `mreg` subcommands.
//!
//! Every command takes one JSON [`RunConfig`]. Relative paths inside it are
//! resolved against the directory holding the config file. The root seed is
//! `train.seed`; it also seeds dataset generation and can be overridden with
//! the `MREG_SEED` environment variable.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{self, ManifestEntry};
use crate::error::{Error, Result};
use crate::evalstat::{self, MetricsReport};
use crate::mregnet::ModelOutput;
use crate::synthgen::{self, DatasetConfig, Split};
use crate::trainer::{self, Checkpoint, Dataset, DivergenceReport, TrainConfig};

pub const SEED_ENV: &str = "MREG_SEED";
pub const CONFIG_ARCHIVE: &str = "config.json";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const STEP_HISTORY: &str = "history_steps.csv";
pub const EPOCH_HISTORY: &str = "history_epochs.csv";
pub const DIVERGENCE_FILE: &str = "divergence.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_SHAPE: i32 = 5;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Image { .. } | Error::Format { .. } => EXIT_IO,
        Error::Diverged { .. } | Error::NonFinite { .. } => EXIT_DIVERGED,
        Error::ShapeMismatch(_) => EXIT_SHAPE,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dataset.instances != self.train.dims.instances {
            return Err(Error::Config(format!(
                "dataset.instances {} differs from train.dims.instances {}",
                self.dataset.instances, self.train.dims.instances
            )));
        }
        self.train.validate()
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }
}

/// Reads and validates a run config. `ablations` are `key=value` overrides
/// applied on top of `train.ablation`.
pub fn load_config(path: &Path, ablations: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for p in [&mut cfg.data_dir, &mut cfg.output_dir] {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    if let Ok(s) = std::env::var(SEED_ENV) {
        cfg.train.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
    }
    for a in ablations {
        let (k, v) = a
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("ablation {a:?} is not key=value")))?;
        cfg.train.ablation.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format("json", e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn archive_config(cfg: &RunConfig) -> Result<()> {
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(CONFIG_ARCHIVE), cfg)
}

// ---- gen --------------------------------------------------------------------

/// Sample counts per split (rows train/val/test) and grade, as recounted from
/// the written manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GenSummary {
    pub seed: u64,
    pub counts: [[usize; 3]; 3],
}

pub fn count_manifest(entries: &[ManifestEntry]) -> [[usize; 3]; 3] {
    let mut counts = [[0; 3]; 3];
    for e in entries {
        let row = Split::ALL.iter().position(|&s| s == e.split).expect("known split");
        counts[row][e.grade as usize] += 1;
    }
    counts
}

pub fn cmd_gen(cfg: &RunConfig, out: &mut impl Write) -> Result<GenSummary> {
    create_dir(&cfg.data_dir)?;
    synthgen::gen_dataset(&cfg.dataset, cfg.seed(), &cfg.data_dir)?;
    let manifest = dataio::read_manifest(&cfg.data_dir.join(dataio::MANIFEST_FILE))?;
    let summary = GenSummary {
        seed: cfg.seed(),
        counts: count_manifest(&manifest),
    };
    let _ = writeln!(out, "wrote {} videos to {}", manifest.len(), cfg.data_dir.display());
    for (split, row) in Split::ALL.iter().zip(summary.counts) {
        let _ = writeln!(out, "{:5}  grade0 {:4}  grade1 {:4}  grade2 {:4}", split.as_str(), row[0], row[1], row[2]);
    }
    Ok(summary)
}

// ---- train ------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub final_epoch: usize,
    pub divergence: Option<DivergenceReport>,
}

/// Metrics file written by `train` for the best checkpoint on the val split.
pub fn val_metrics_path(output_dir: &Path) -> PathBuf {
    output_dir.join("metrics_val.json")
}

/// Trains and writes checkpoints, history and validation metrics. A
/// divergence still writes everything, then returns [`Error::Diverged`].
pub fn cmd_train(cfg: &RunConfig, out: &mut impl Write) -> Result<TrainSummary> {
    let data = Dataset::load_splits(&cfg.data_dir, &cfg.train.dims, &[Split::Train, Split::Val])?;
    if data.train.is_empty() {
        return Err(Error::Config(format!("no training videos under {}", cfg.data_dir.display())));
    }
    archive_config(cfg)?;
    let outcome = trainer::train(&cfg.train, &data)?;
    let dir = &cfg.output_dir;
    outcome.best.save(&dir.join(BEST_CHECKPOINT))?;
    outcome.last.save(&dir.join(FINAL_CHECKPOINT))?;
    outcome.history.write(&dir.join(STEP_HISTORY), &dir.join(EPOCH_HISTORY))?;
    if !data.val.is_empty() {
        let ev = trainer::evaluate_split(&outcome.best, &data, Split::Val)?;
        write_json(&val_metrics_path(dir), &ev.report)?;
    }
    let summary = TrainSummary {
        seed: cfg.seed(),
        best_epoch: outcome.best.epoch,
        best_val_accuracy: outcome.best.val_accuracy,
        final_epoch: outcome.last.epoch,
        divergence: outcome.divergence.clone(),
    };
    let _ = writeln!(
        out,
        "best val accuracy {:.2} at epoch {}",
        summary.best_val_accuracy, summary.best_epoch
    );
    if let Some(d) = outcome.divergence {
        write_json(&dir.join(DIVERGENCE_FILE), &d)?;
        return Err(Error::Diverged {
            epoch: d.epoch,
            step: d.step,
            reason: d.reason,
        });
    }
    Ok(summary)
}

// ---- eval / predict / scores -----------------------------------------------

/// Loads a checkpoint and checks it against the run's model dimensions.
pub fn load_checkpoint(cfg: &RunConfig, path: Option<&Path>) -> Result<Checkpoint> {
    let default = cfg.output_dir.join(BEST_CHECKPOINT);
    let ck = Checkpoint::load(path.unwrap_or(&default))?;
    let (have, want) = (&ck.config.dims, &cfg.train.dims);
    if have != want {
        return Err(Error::shape(format!("checkpoint dims {have:?} do not match config dims {want:?}")));
    }
    Ok(ck)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, split: Split, out_path: Option<&Path>, out: &mut impl Write) -> Result<MetricsReport> {
    let ck = load_checkpoint(cfg, checkpoint)?;
    let data = Dataset::load_splits(&cfg.data_dir, &ck.config.dims, &[split])?;
    let ev = trainer::evaluate_split(&ck, &data, split)?;
    let json = serde_json::to_string_pretty(&ev.report).map_err(|e| Error::format("json", e.to_string()))?;
    let _ = writeln!(out, "{json}");
    let _ = writeln!(
        out,
        "binary accuracy {:.2}, selection {}/{}",
        ev.binary_accuracy, ev.selection.hits, ev.selection.eligible
    );
    let default = cfg.output_dir.join(format!("metrics_{}.json", split.as_str()));
    let path = out_path.map_or(default, Path::to_path_buf);
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    write_json(&path, &ev.report)?;
    Ok(ev.report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictSummary {
    pub id: String,
    pub grade: u8,
    pub regression_value: f64,
    pub alpha: usize,
    pub mr_probability: f64,
}

impl PredictSummary {
    fn new(id: String, o: &ModelOutput) -> Self {
        Self {
            id,
            grade: o.grade_pred,
            regression_value: o.regression_value,
            alpha: o.alpha,
            mr_probability: o.mr_probability(),
        }
    }
}

/// Predicts one video of the dataset, named by manifest id or frame directory.
pub fn cmd_predict(cfg: &RunConfig, checkpoint: Option<&Path>, video: &str, out: &mut impl Write) -> Result<PredictSummary> {
    let ck = load_checkpoint(cfg, checkpoint)?;
    let manifest = dataio::read_manifest(&cfg.data_dir.join(dataio::MANIFEST_FILE))?;
    let wanted = Path::new(video);
    let entry = manifest
        .iter()
        .find(|e| e.id == video || Path::new(&e.dir) == wanted || cfg.data_dir.join(&e.dir) == wanted)
        .ok_or_else(|| Error::invalid(format!("video {video:?} is not in the manifest")))?;
    let sample = trainer::prepare_sample(&cfg.data_dir, entry, &ck.config.dims)?;
    let ev = trainer::evaluate(&ck.model, &ck.config, std::slice::from_ref(&sample))?;
    let summary = PredictSummary::new(entry.id.clone(), &ev.predictions[0].output);
    let _ = writeln!(
        out,
        "{}: grade {} regression {:.4} alpha {} p(MR) {:.4}",
        summary.id, summary.grade, summary.regression_value, summary.alpha, summary.mr_probability
    );
    Ok(summary)
}

/// Writes per-frame scores of a split to CSV; returns the row count.
pub fn cmd_scores(cfg: &RunConfig, checkpoint: Option<&Path>, split: Split, out_path: Option<&Path>, out: &mut impl Write) -> Result<usize> {
    let ck = load_checkpoint(cfg, checkpoint)?;
    let data = Dataset::load_splits(&cfg.data_dir, &ck.config.dims, &[split])?;
    let ev = trainer::evaluate_split(&ck, &data, split)?;
    let default = cfg.output_dir.join(format!("scores_{}.csv", split.as_str()));
    let path = out_path.map_or(default, Path::to_path_buf);
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let rows = evalstat::export_frame_scores(&ev.scored_videos(), &path)?;
    let _ = writeln!(out, "wrote {rows} rows to {}", path.display());
    Ok(rows)
}
