use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of residual encoder blocks (and decoder stages).
pub const N_BLOCKS: usize = 5;

/// Ablation variants, each enabling a superset of the previous components
/// except that `DsAe` drops the sex task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "BASELINE")]
    Baseline,
    #[serde(rename = "AE")]
    Ae,
    #[serde(rename = "MTL_AE")]
    MtlAe,
    #[serde(rename = "DS_AE")]
    DsAe,
    #[serde(rename = "DSMT_AE")]
    DsmtAe,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::Ae, Variant::MtlAe, Variant::DsAe, Variant::DsmtAe];

    pub fn has_decoder(self) -> bool {
        self != Variant::Baseline
    }

    pub fn has_sex_heads(self) -> bool {
        matches!(self, Variant::MtlAe | Variant::DsmtAe)
    }

    pub fn has_shallow_heads(self) -> bool {
        matches!(self, Variant::DsAe | Variant::DsmtAe)
    }

    /// Config-file spelling.
    pub fn key(self) -> &'static str {
        match self {
            Variant::Baseline => "BASELINE",
            Variant::Ae => "AE",
            Variant::MtlAe => "MTL_AE",
            Variant::DsAe => "DS_AE",
            Variant::DsmtAe => "DSMT_AE",
        }
    }

    /// Table spelling.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Ae => "AE",
            Variant::MtlAe => "MTL-AE",
            Variant::DsAe => "DS-AE",
            Variant::DsmtAe => "DSMT-AE",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == norm)
            .ok_or_else(|| Error::Config(format!("unknown model variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub side: usize,
    pub in_channels: usize,
    pub block_channels: Vec<usize>,
    /// 1-based encoder block indices carrying shallow heads.
    pub supervision_depths: Vec<usize>,
    pub latent_dim: usize,
    pub head_hidden: Vec<usize>,
    pub dropout_rate: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            side: 96,
            in_channels: 1,
            block_channels: vec![16, 32, 64, 128, 256],
            supervision_depths: vec![2, 3, 4],
            latent_dim: 512,
            head_hidden: vec![128, 64],
            dropout_rate: 0.3,
            variant: Variant::DsmtAe,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_channels.len() != N_BLOCKS {
            return Err(Error::Config(format!("expected {N_BLOCKS} block channel counts, got {}", self.block_channels.len())));
        }
        if self.block_channels.contains(&0) || self.in_channels == 0 || self.latent_dim == 0 {
            return Err(Error::Config("channel counts and latent_dim must be positive".into()));
        }
        if self.side < 2 {
            return Err(Error::Config(format!("side must be at least 2, got {}", self.side)));
        }
        if self.head_hidden.len() != 2 || self.head_hidden.contains(&0) {
            return Err(Error::Config("head_hidden must list two positive widths".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        let mut seen = [false; N_BLOCKS];
        for &d in &self.supervision_depths {
            if !(1..N_BLOCKS).contains(&d) {
                return Err(Error::Config(format!("supervision depth {d} outside 1..={}", N_BLOCKS - 1)));
            }
            if std::mem::replace(&mut seen[d], true) {
                return Err(Error::Config(format!("supervision depth {d} listed twice")));
            }
        }
        if self.variant.has_shallow_heads() && self.supervision_depths.is_empty() {
            return Err(Error::Config(format!("{} needs at least one supervision depth", self.variant)));
        }
        Ok(())
    }

    /// Spatial size after each block: `sizes[0] = side`,
    /// `sizes[k] = ceil(sizes[k-1] / 2)`.
    pub fn spatial_sizes(&self) -> [usize; N_BLOCKS + 1] {
        let mut s = [self.side; N_BLOCKS + 1];
        for k in 1..=N_BLOCKS {
            s[k] = s[k - 1].div_ceil(2);
        }
        s
    }

    /// Depths that actually carry shallow heads for this variant, ascending.
    pub fn active_depths(&self) -> Vec<usize> {
        if !self.variant.has_shallow_heads() {
            return Vec::new();
        }
        let mut d = self.supervision_depths.clone();
        d.sort_unstable();
        d
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        ModelConfig { variant, ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_follow_ceil_halving() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.spatial_sizes(), [96, 48, 24, 12, 6, 3]);
        let cfg = ModelConfig { side: 33, ..Default::default() };
        assert_eq!(cfg.spatial_sizes(), [33, 17, 9, 5, 3, 2]);
    }

    #[test]
    fn depth_five_is_rejected() {
        let cfg = ModelConfig { supervision_depths: vec![5], ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ModelConfig { supervision_depths: vec![0], ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn variant_parsing_accepts_both_spellings() {
        assert_eq!("DSMT-AE".parse::<Variant>().unwrap(), Variant::DsmtAe);
        assert_eq!("mtl_ae".parse::<Variant>().unwrap(), Variant::MtlAe);
        assert!("RESNET".parse::<Variant>().is_err());
    }
}
