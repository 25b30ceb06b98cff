use std::path::{Path, PathBuf};

use dsmt_core::evaluation::AgeBrackets;
use dsmt_core::model::ModelConfig;
use dsmt_core::trainer::TrainConfig;
use dsmt_core::volume::PhantomConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Where the samples come from: a manifest on disk, or phantoms generated
/// in memory when no manifest is named.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Manifest CSV (`path,subject_id[,split]`). Relative paths resolve
    /// against the config file's directory.
    pub manifest: Option<PathBuf>,
    /// Label table for volumes that carry no labels (NIfTI).
    pub labels: Option<PathBuf>,
    /// Output directory of `synth` when `--out` is absent.
    pub dir: Option<PathBuf>,
    pub n_phantoms: usize,
    /// `side` is always taken from the model section.
    pub phantom: PhantomConfig,
    pub crop: bool,
    pub margin: usize,
    pub val_fraction: f64,
    pub age_bins: Vec<f64>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            labels: None,
            dir: None,
            n_phantoms: 200,
            phantom: PhantomConfig::default(),
            crop: true,
            margin: 2,
            val_fraction: 0.2,
            age_bins: vec![20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub core: TrainConfig,
    /// Pick (alpha, beta, gamma) by the coarse-to-fine grid before the
    /// main run.
    pub grid_search: bool,
    /// `false` trains on unaugmented volumes.
    pub augment: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { core: TrainConfig::default(), grid_search: false, augment: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    /// `rho` is searched on `rho_steps + 1` points of [0, 1].
    pub rho_steps: usize,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection { rho_steps: dsmt_core::ensemble::RHO_STEPS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub brackets: Vec<f64>,
    /// Parent of the per-run directories.
    pub out_dir: PathBuf,
    pub plots: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { brackets: AgeBrackets::default().edges, out_dir: PathBuf::from("runs"), plots: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; overrides `train.seed` when set.
    pub seed: Option<u64>,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub ensemble: EnsembleSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Reads a TOML file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.manifest, &mut cfg.data.labels, &mut cfg.data.dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.eval.out_dir.is_relative() {
            cfg.eval.out_dir = base.join(&cfg.eval.out_dir);
        }
        Ok(cfg)
    }

    /// Applies command-line overrides and settles derived fields.
    pub fn resolve(mut self, seed: Option<u64>, deterministic: bool) -> Self {
        if let Some(s) = seed {
            self.seed = Some(s);
        }
        if let Some(s) = self.seed {
            self.train.core.seed = s;
        }
        if deterministic {
            self.train.core.deterministic = true;
        }
        if !self.train.augment {
            self.train.core.augmentation = None;
        } else if self.train.core.augmentation.is_none() {
            self.train.core.augmentation = Some(Default::default());
        }
        self.data.phantom.side = self.model.side;
        self
    }

    pub fn seed(&self) -> u64 {
        self.train.core.seed
    }

    pub fn brackets(&self) -> AgeBrackets {
        AgeBrackets { edges: self.eval.brackets.clone() }
    }

    /// Checks every section without touching the filesystem beyond
    /// existence checks of referenced inputs.
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(CliError::as_config)?;
        self.train.core.validate().map_err(CliError::as_config)?;
        self.brackets().validate().map_err(CliError::as_config)?;
        let d = &self.data;
        if d.manifest.is_none() {
            if d.n_phantoms == 0 {
                return Err(CliError::config("data.n_phantoms must be at least 1"));
            }
            d.phantom.validate().map_err(CliError::as_config)?;
        }
        for p in [&d.manifest, &d.labels].into_iter().flatten() {
            if !p.is_file() {
                return Err(CliError::config(format!("{} does not exist", p.display())));
            }
        }
        if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            return Err(CliError::config(format!("data.val_fraction must lie in (0, 1), got {}", d.val_fraction)));
        }
        if d.age_bins.len() < 2 || d.age_bins.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::config("data.age_bins needs at least two strictly increasing edges"));
        }
        if self.ensemble.rho_steps == 0 {
            return Err(CliError::config("ensemble.rho_steps must be at least 1"));
        }
        if self.train.grid_search {
            let g = &self.train.core.grid;
            if g.alpha.is_empty() || g.beta.is_empty() || g.gamma.is_empty() || g.epochs_per_point == 0 {
                return Err(CliError::config("train.grid needs non-empty axes and epochs_per_point >= 1"));
            }
        }
        Ok(())
    }

    /// Short content hash of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        format!("{digest:x}")[..10].to_string()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.resolve(None, false).validate().unwrap();
    }

    #[test]
    fn seed_flag_wins() {
        let cfg: ExperimentConfig = toml::from_str("seed = 3\n[train]\nseed = 9\n").unwrap();
        assert_eq!(cfg.clone().resolve(None, false).seed(), 3);
        assert_eq!(cfg.resolve(Some(11), false).seed(), 11);
    }

    #[test]
    fn unknown_variant_is_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("[model]\nvariant = \"DSMT\"\n").is_err());
        let ok: ExperimentConfig = toml::from_str("[model]\nvariant = \"MTL_AE\"\n").unwrap();
        assert_eq!(ok.model.variant, dsmt_core::model::Variant::MtlAe);
    }

    #[test]
    fn nested_train_fields_parse() {
        let cfg: ExperimentConfig =
            toml::from_str("[train]\nepochs = 7\ngrid_search = true\n[train.loss_weights]\nalpha = 0.3\n[train.grid]\nalpha = [0.2]\n").unwrap();
        assert_eq!(cfg.train.core.epochs, 7);
        assert!(cfg.train.grid_search);
        assert_eq!(cfg.train.core.loss_weights.alpha, 0.3);
        assert_eq!(cfg.train.core.grid.alpha, vec![0.2]);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.train.core.epochs = 3;
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::default().resolve(Some(5), true);
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
