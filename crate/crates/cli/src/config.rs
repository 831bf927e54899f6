use std::path::{Path, PathBuf};

use dualdomain::metrics::SsimOptions;
use dualdomain::nets::UNetConfig;
use dualdomain::synthdata::PhantomSpec;
use dualdomain::training::TrainConfig;
use dualdomain::{Error, Result};
use serde::{Deserialize, Serialize};

/// Synthetic dataset layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory (volumes + split manifest).
    pub root: PathBuf,
    pub num_subjects: usize,
    pub slices_per_subject: usize,
    pub height: usize,
    pub width: usize,
    /// Subjects in the train / validation / test splits.
    pub split: (usize, usize, usize),
    pub phantom: PhantomSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            num_subjects: 10,
            slices_per_subject: 16,
            height: 64,
            width: 64,
            split: (6, 2, 2),
            phantom: PhantomSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub accelerations: Vec<f64>,
    pub center_fraction: f64,
    pub seeds: Vec<u64>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            accelerations: vec![4.0, 5.0],
            center_fraction: dualdomain::kspace::DEFAULT_CENTER_FRACTION,
            seeds: vec![0],
        }
    }
}

/// One experiment: everything a run needs, archived next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub mask: MaskConfig,
    pub freq_net: UNetConfig,
    pub image_net: UNetConfig,
    /// Network of the image-domain comparator; trained only when `train_baseline`.
    pub baseline_net: UNetConfig,
    pub train_baseline: bool,
    pub train: TrainConfig,
    pub metrics: SsimOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            mask: MaskConfig::default(),
            freq_net: UNetConfig::frequency(2, 8),
            image_net: UNetConfig::image(2, 8, false),
            baseline_net: UNetConfig::image(2, 8, true),
            train_baseline: true,
            train: TrainConfig::default(),
            metrics: SsimOptions::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads TOML or JSON (chosen by extension); unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Makes one seed govern data, masks and training.
    pub fn apply_seed(&mut self, seed: u64) {
        self.data.phantom.seed = seed;
        self.mask.seeds = vec![seed];
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.data.phantom.validate()?;
        self.freq_net.validate()?;
        self.image_net.validate()?;
        self.baseline_net.validate()?;
        self.train.validate()?;
        if self.mask.accelerations.is_empty() || self.mask.seeds.is_empty() {
            return Err(Error::Config("mask.accelerations and mask.seeds must be non-empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nlearning_rat = 0.1\n").unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("learning_rat"), "{err}");
    }

    #[test]
    fn json_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(ExperimentConfig::load(&path).unwrap().train.epochs, 3);
    }
}
