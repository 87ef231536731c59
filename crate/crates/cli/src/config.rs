//! Run configuration document (TOML).
//!
//! ```toml
//! run_label = "easy4"
//! seed = 7
//!
//! [taxonomy]
//! mode = "multiclass"
//! class_names = ["nsc_like", "neuron_like", "astrocyte_like", "oligodendrocyte_like"]
//!
//! [dataset]
//! source = "synthetic"        # or "directory"
//! per_class_count = 250
//! image_size = 64
//! difficulty = "easy"
//!
//! [preprocess]
//! target_height = 64
//! target_width = 64
//! channels = 1
//! normalization = "unit_interval"
//!
//! [model]
//! backbone = "small_cnn"
//! # ...
//!
//! [train]
//! epochs = 15
//! ```
//!
//! Every section rejects unknown keys. Random streams are derived from the
//! root `seed`; `train.seed` is not accepted.

use std::fs;
use std::path::{Path, PathBuf};

use cellfate::dataset::{LabelTaxonomy, PreprocessSpec, SplitFractions};
use cellfate::model::ModelConfig;
use cellfate::seed::{derive_seed, labels, sha256_hex};
use cellfate::synth::{Archetype, Difficulty, SyntheticSpec};
use cellfate::training::TrainConfig;
use cellfate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Class-directory root. Defaults to `<out>/data` for synthetic data and
    /// is required for directory sources.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directory: Option<PathBuf>,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    #[serde(default)]
    pub difficulty: Difficulty,
    /// Archetype per class in taxonomy order; defaults to the archetype
    /// named like each class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archetypes: Option<Vec<Archetype>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_label: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub taxonomy: LabelTaxonomy,
    pub dataset: DatasetConfig,
    pub preprocess: PreprocessSpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        if raw.get("train").and_then(|t| t.get("seed")).is_some() {
            return Err(Error::Config(
                "`train.seed` is not accepted; training streams derive from the root `seed`".into(),
            ));
        }
        let mut config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_string()))?;
        config.train.seed = config.seed;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        let mut value = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(train) = value.get_mut("train").and_then(|t| t.as_table_mut()) {
            train.remove("seed");
        }
        toml::to_string(&value).map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces the root seed (and everything derived from it).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_label.trim().is_empty() {
            return Err(Error::Config("run_label must not be empty".into()));
        }
        self.dataset.split.validate()?;
        self.preprocess.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.preprocess.shape() != self.model.input_shape {
            return Err(Error::Config(format!(
                "preprocess produces {:?} but model.input_shape is {:?}",
                self.preprocess.shape(),
                self.model.input_shape
            )));
        }
        match self.dataset.source {
            DataSource::Synthetic => {
                self.synthetic_spec()?.validate()?;
            }
            DataSource::Directory => {
                if self.dataset.directory.is_none() {
                    return Err(Error::Config("dataset.directory is required for directory sources".into()));
                }
            }
        }
        Ok(())
    }

    /// Generation parameters for synthetic sources.
    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        if self.dataset.source != DataSource::Synthetic {
            return Err(Error::Config("dataset.source is not `synthetic`".into()));
        }
        let archetypes = match &self.dataset.archetypes {
            Some(a) => a.clone(),
            None => SyntheticSpec::archetypes_by_name(&self.taxonomy)?,
        };
        let per_class_count = self
            .dataset
            .per_class_count
            .ok_or_else(|| Error::Config("dataset.per_class_count is required for synthetic sources".into()))?;
        let image_size = self
            .dataset
            .image_size
            .ok_or_else(|| Error::Config("dataset.image_size is required for synthetic sources".into()))?;
        Ok(SyntheticSpec {
            taxonomy: self.taxonomy.clone(),
            archetypes,
            per_class_count,
            image_size,
            seed: derive_seed(self.seed, labels::GENERATION),
            difficulty: self.dataset.difficulty,
        })
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, labels::SPLIT)
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, labels::INIT)
    }

    pub fn data_dir(&self, out: &Path) -> PathBuf {
        match &self.dataset.directory {
            Some(d) => d.clone(),
            None => out.join("data"),
        }
    }

    /// SHA-256 of the configuration with its location fields (`output_dir`,
    /// `dataset.directory`) removed, so relocated reruns share a checksum.
    pub fn checksum(&self) -> Result<String> {
        let mut located = self.clone();
        located.output_dir = None;
        located.dataset.directory = None;
        Ok(sha256_hex(&serde_json::to_vec(&located)?))
    }
}

/// The desk-scale four-class configuration used by the acceptance suite.
pub fn desk_scale(label: &str, difficulty: Difficulty, seed: u64) -> RunConfig {
    let names: Vec<&str> = Archetype::ALL.iter().map(|a| a.as_str()).collect();
    RunConfig {
        run_label: label.to_string(),
        seed,
        output_dir: None,
        taxonomy: LabelTaxonomy::multiclass(names).expect("distinct names"),
        dataset: DatasetConfig {
            source: DataSource::Synthetic,
            directory: None,
            split: SplitFractions::default(),
            per_class_count: Some(250),
            image_size: Some(64),
            difficulty,
            archetypes: None,
        },
        preprocess: PreprocessSpec::unit_interval(64, 64, 1),
        model: ModelConfig::small_cnn(64, 64, 1),
        train: TrainConfig {
            epochs: 20,
            seed,
            ..TrainConfig::default()
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let c = desk_scale("easy", Difficulty::Easy, 3);
        let text = c.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        back.validate().unwrap();
    }

    #[test]
    fn unknown_keys_name_the_key_and_alternatives() {
        let mut text = desk_scale("easy", Difficulty::Easy, 3).to_toml().unwrap();
        text = text.replace("[train]\n", "[train]\nlearning_rat = 0.1\n");
        match RunConfig::from_toml(&text) {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("learning_rat"), "{msg}");
                assert!(msg.contains("learning_rate"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn train_seed_is_rejected() {
        let text = desk_scale("easy", Difficulty::Easy, 3)
            .to_toml()
            .unwrap()
            .replace("[train]\n", "[train]\nseed = 4\n");
        assert!(matches!(RunConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn zero_images_per_class_fails_validation() {
        let mut c = desk_scale("easy", Difficulty::Easy, 3);
        c.dataset.per_class_count = Some(0);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn checksum_ignores_locations() {
        let a = desk_scale("easy", Difficulty::Easy, 3);
        let mut b = a.clone();
        b.output_dir = Some("/elsewhere".into());
        b.dataset.directory = Some("/data".into());
        assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
        assert_ne!(a.checksum().unwrap(), a.clone().with_seed(4).checksum().unwrap());
    }
}
