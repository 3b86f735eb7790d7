//! Experiment configuration: one TOML document wiring every pipeline stage.
//! Validation reports the offending field path before any compute starts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use belt_core::dataset::{load_dataset, DataFormat, LabeledDataset, Split};
use belt_core::excl::ExclConfig;
use belt_core::poison::PoisonConfig;
use belt_core::train::TrainConfig;
use belt_core::trigger::{PatternFill, TriggerDoc, TriggerSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory all artifacts of this run are written into.
    pub output_dir: PathBuf,
    /// Global seed; stages derive named substreams from it unless their
    /// section overrides `seed` explicitly.
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSection,
    pub trigger: TriggerDoc,
    #[serde(default)]
    pub poison: PoisonConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub excl: ExclConfig,
    #[serde(default)]
    pub defense: DefenseSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "source")]
pub enum DatasetSection {
    /// Procedurally generated blob task.
    Synthetic {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        shape: (usize, usize, usize),
    },
    /// Pre-packed tensor files (one train, one test).
    Packed {
        train_path: PathBuf,
        test_path: PathBuf,
    },
    /// Class-per-subdirectory image trees.
    ImageDir {
        train_path: PathBuf,
        test_path: PathBuf,
    },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    #[serde(default)]
    pub nc: belt_core::defense::NcConfig,
    #[serde(default)]
    pub strip: belt_core::defense::StripConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parse {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Field-path-first validation of everything that can be checked
    /// without compute.
    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSection::Synthetic {
                classes,
                per_class,
                test_per_class,
                shape,
            } => {
                if *classes < 2 {
                    bail!("dataset.classes: need at least 2 classes, got {classes}");
                }
                if *per_class == 0 || *test_per_class == 0 {
                    bail!("dataset.per_class/test_per_class: must be nonzero");
                }
                if shape.0 == 0 || shape.1 == 0 || shape.2 == 0 {
                    bail!("dataset.shape: zero dimension in {shape:?}");
                }
            }
            DatasetSection::Packed {
                train_path,
                test_path,
            }
            | DatasetSection::ImageDir {
                train_path,
                test_path,
            } => {
                if !train_path.exists() {
                    bail!("dataset.train_path: {} does not exist", train_path.display());
                }
                if !test_path.exists() {
                    bail!("dataset.test_path: {} does not exist", test_path.display());
                }
            }
        }
        if let PatternFill::ImageFile { path } = &self.trigger.pattern {
            if !path.exists() {
                bail!("trigger.pattern.path: {} does not exist", path.display());
            }
        }
        self.poison
            .validate()
            .map_err(|e| anyhow::anyhow!("poison: {e}"))?;
        self.train
            .validate()
            .map_err(|e| anyhow::anyhow!("train: {e}"))?;
        self.excl
            .validate()
            .map_err(|e| anyhow::anyhow!("excl: {e}"))?;
        self.defense
            .nc
            .validate()
            .map_err(|e| anyhow::anyhow!("defense.nc: {e}"))?;
        self.defense
            .strip
            .validate()
            .map_err(|e| anyhow::anyhow!("defense.strip: {e}"))?;
        Ok(())
    }

    /// Stable content hash of the whole document.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }

    /// Loads (or synthesizes) the train/test pair named by the dataset
    /// section. Synthetic test draws use a fixed offset of the seed so the
    /// two sets are disjoint samples of one task.
    pub fn load_datasets(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        Ok(match &self.dataset {
            DatasetSection::Synthetic {
                classes,
                per_class,
                test_per_class,
                shape,
            } => {
                let train = belt_core::dataset::make_synthetic_dataset(
                    *classes, *per_class, *shape, self.seed,
                )?;
                let test = belt_core::dataset::make_synthetic_dataset(
                    *classes,
                    *test_per_class,
                    *shape,
                    self.seed ^ 0x7E57,
                )?
                .with_split(Split::Test);
                (train, test)
            }
            DatasetSection::Packed {
                train_path,
                test_path,
            } => (
                load_dataset(train_path, DataFormat::Packed)?,
                load_dataset(test_path, DataFormat::Packed)?.with_split(Split::Test),
            ),
            DatasetSection::ImageDir {
                train_path,
                test_path,
            } => (
                load_dataset(train_path, DataFormat::ImageDir)?,
                load_dataset(test_path, DataFormat::ImageDir)?.with_split(Split::Test),
            ),
        })
    }

    pub fn trigger_spec(&self, input_shape: (usize, usize, usize)) -> Result<TriggerSpec> {
        Ok(self.trigger.to_spec(input_shape)?)
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
