//! Run configuration, read from TOML files with one table per concern.
//!
//! ```toml
//! seed = 7
//!
//! [task]
//! kind = "translate"        # translate | compress | span | choice
//! fusion = "bbf"            # none | bef | bdf | bbf
//! manner = "etc-pipeline"   # none | etc-pipeline | etc-joint | itc-joint
//!
//! [model]
//! layers = 2
//! d_model = 64
//!
//! [train]
//! setting = "supervised"    # supervised | unsupervised | semi
//! epochs = 10
//!
//! [data]
//! source = "synthetic"      # synthetic | files
//! ```
//!
//! Every field has a default, so an empty file is a valid configuration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::noise::NoiseConfig;
use crate::data::synthetic::SyntheticSpec;
use crate::error::{bail, Error, Result};
use crate::etc::BeamConfig;
use crate::optim::AdamConfig;
use crate::tasks::{Manner, TaskConfig, TaskKind};
use crate::transformer::ModelConfig;

/// Where compressor training pairs come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// Labeled `(x, y^c)` pairs.
    #[default]
    Supervised,
    /// Noise-synthesized pairs from unlabeled text.
    Unsupervised,
    /// Unsupervised epochs followed by supervised epochs.
    Semi,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Supervised => "supervised",
            Self::Unsupervised => "unsupervised",
            Self::Semi => "semi",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "supervised" => Self::Supervised,
            "unsupervised" => Self::Unsupervised,
            "semi" => Self::Semi,
            other => bail!(Config, "unknown training setting `{other}`"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub setting: Setting,
    /// Task-model epochs.
    pub epochs: usize,
    /// Supervised compressor (or ITC stage-1) epochs.
    pub compressor_epochs: usize,
    /// Unsupervised compressor epochs (unsupervised and semi settings).
    pub unsupervised_epochs: usize,
    pub batch_size: usize,
    /// Zero-initialize fusion outputs so training starts from the baseline.
    pub zero_init_fusion: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            setting: Setting::Supervised,
            epochs: 10,
            compressor_epochs: 10,
            unsupervised_epochs: 5,
            batch_size: 32,
            zero_init_fusion: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Task training / test files (format depends on the task kind).
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Labeled compression pairs.
    pub compress_pairs: Option<PathBuf>,
    /// Unlabeled corpus for noise synthesis.
    pub corpus: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub n_train: usize,
    pub n_test: usize,
    /// Unanswerable fraction of synthetic span data.
    pub unanswerable: f64,
    pub options: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            train: None,
            test: None,
            compress_pairs: None,
            corpus: None,
            synthetic: SyntheticSpec::default(),
            n_train: 2000,
            n_test: 200,
            unanswerable: 0.3,
            options: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub beam: BeamConfig,
    pub optim: AdamConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub noise: NoiseConfig,
}


impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// Checks everything that can be checked before data or models exist.
    pub fn validate(&self) -> Result<()> {
        if self.task.kind != TaskKind::Compress {
            self.task.validate()?;
        }
        self.beam.validate()?;
        self.noise.validate()?;
        if self.train.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        let m = ModelConfig {
            vocab_size: self.model.vocab_size.max(1),
            ..self.model.clone()
        };
        m.validate()?;
        if self.data.source == DataSource::Files {
            let needs_pairs = self.task.kind == TaskKind::Compress
                || matches!(self.task.manner, Manner::EtcPipeline | Manner::EtcJoint | Manner::ItcJoint);
            if self.task.kind != TaskKind::Compress && self.data.train.is_none() {
                bail!(Config, "file data needs [data] train");
            }
            let sup = matches!(self.train.setting, Setting::Supervised | Setting::Semi);
            let unsup = matches!(self.train.setting, Setting::Unsupervised | Setting::Semi);
            if needs_pairs && sup && self.data.compress_pairs.is_none() {
                bail!(Config, "supervised compression needs [data] compress_pairs");
            }
            if needs_pairs && unsup && self.data.corpus.is_none() && self.data.train.is_none() {
                bail!(Config, "unsupervised compression needs [data] corpus");
            }
        }
        if self.data.source == DataSource::Synthetic {
            self.data.synthetic.validate()?;
            if self.data.n_train == 0 {
                bail!(Config, "n_train must be positive");
            }
            if self.task.kind == TaskKind::Choice && self.data.options < 2 {
                bail!(Config, "choice data needs at least 2 options");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMode;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.task.fusion = FusionMode::Bbf;
        cfg.task.manner = Manner::EtcPipeline;
        cfg.model.d_model = 64;
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn sections_parse() {
        let cfg = RunConfig::from_toml(
            "seed = 3\n[task]\nkind = \"span\"\nfusion = \"bef\"\nmanner = \"itc-joint\"\n[train]\nsetting = \"semi\"\n",
        )
        .unwrap();
        assert_eq!(cfg.task.kind, TaskKind::Span);
        assert_eq!(cfg.train.setting, Setting::Semi);
        cfg.validate().unwrap();
        assert!(RunConfig::from_toml("[task]\nfusion = \"sideways\"\n").is_err());
    }

    #[test]
    fn incompatible_fusion_fails_validation() {
        let mut cfg = RunConfig::default();
        cfg.task.kind = TaskKind::Choice;
        cfg.task.fusion = FusionMode::Bbf;
        cfg.task.manner = Manner::EtcJoint;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
