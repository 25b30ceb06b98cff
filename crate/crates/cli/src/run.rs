//! Shared plumbing: output directories, dataset loading, JSONL logging.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dsmt_core::model::{Checkpoint, Model};
use dsmt_core::trainer::{AdamState, EpochRecord, StepRecord, TrainObserver, TrainState};
use dsmt_core::volume::{load_dataset, make_split, synthesize_dataset, DatasetSplit, PreprocessConfig, VolumeSample};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::Cli;

pub(crate) struct Dataset {
    pub samples: Vec<VolumeSample>,
    pub split: DatasetSplit,
}

impl Dataset {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let seed = cfg.seed();
        let d = &cfg.data;
        let (samples, split) = match &d.manifest {
            Some(manifest) => {
                let pre = PreprocessConfig { crop: d.crop, margin: d.margin, side: cfg.model.side };
                load_dataset(manifest, d.labels.as_deref(), &pre)?
            }
            None => (synthesize_dataset(d.n_phantoms, &d.phantom, seed)?, None),
        };
        let split = match split {
            Some(s) => s,
            None => make_split(&samples, d.val_fraction, &d.age_bins, seed)?,
        };
        Ok(Dataset { samples, split })
    }

    pub fn partition(&self) -> Result<(Vec<&VolumeSample>, Vec<&VolumeSample>), CliError> {
        let (train, val) = self.split.partition(&self.samples);
        if train.is_empty() || val.is_empty() {
            return Err(CliError::new(crate::code::DATA, "the split leaves an empty training or validation set"));
        }
        Ok((train, val))
    }
}

/// Resolves the output directory without creating it.
pub(crate) fn output_dir(cli: &Cli, cfg: &ExperimentConfig) -> PathBuf {
    match &cli.out {
        Some(p) => p.clone(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
            cfg.eval.out_dir.join(format!("{}-{stamp}", cfg.hash()))
        }
    }
}

/// Errors if `dir` holds anything and `force` is off.
pub(crate) fn check_writable(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::io(format!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(CliError::io(format!("output directory {} is not empty; pass --force to write into it", dir.display())));
        }
    }
    Ok(())
}

/// Creates the directory and records the resolved config in it.
pub(crate) fn create_output(dir: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Appends step and epoch records to a JSONL file and, when asked, saves
/// a resumable checkpoint at every improvement.
pub(crate) struct RunLogger {
    log: BufWriter<File>,
    best_path: Option<PathBuf>,
    label: String,
}

impl RunLogger {
    pub fn create(path: &Path, best_path: Option<PathBuf>, label: impl Into<String>) -> Result<Self, CliError> {
        let log = BufWriter::new(File::create(path)?);
        Ok(RunLogger { log, best_path, label: label.into() })
    }

    fn append<T: Serialize>(&mut self, event: &str, record: &T) -> dsmt_core::Result<()> {
        let mut v = serde_json::to_value(record)?;
        if let Some(obj) = v.as_object_mut() {
            obj.insert("event".into(), event.into());
        }
        writeln!(self.log, "{v}")?;
        Ok(())
    }
}

impl TrainObserver for RunLogger {
    fn on_step(&mut self, record: &StepRecord) -> dsmt_core::Result<()> {
        self.append("step", record)
    }

    fn on_epoch(&mut self, record: &EpochRecord, _state: &TrainState) -> dsmt_core::Result<()> {
        self.append("epoch", record)?;
        self.log.flush()?;
        log::info!(
            "{} epoch {:>3}  lr {:.2e}  loss {:.4}  val MAE {:.3}{}",
            self.label,
            record.epoch,
            record.lr,
            record.train.l_total,
            record.val_mae,
            if record.improved { "  *" } else { "" }
        );
        Ok(())
    }

    fn on_improvement(&mut self, model: &Model, state: &TrainState, adam: &AdamState) -> dsmt_core::Result<()> {
        if let Some(path) = &self.best_path {
            let ckpt = Checkpoint { model: model.clone(), optimizer: Some(adam.clone()), train_state: Some(state.clone()), ensemble: None };
            ckpt.save(path)?;
        }
        Ok(())
    }
}
