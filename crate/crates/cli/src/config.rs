//! Run configuration for `train`.
//!
//! Precedence, lowest first: built-in defaults for the dataset's mode and
//! the chosen variant, then the TOML file, then command-line flags. The
//! resolved result is written as `config.toml` beside the run's outputs and
//! can be passed back with `--config` to reproduce the run.

use std::path::{Path, PathBuf};

use adapart::model::{ModelConfig, Variant};
use adapart::synth::DatasetMode;
use adapart::train::{OptimizerConfig, TrainConfig};
use adapart::{Error, Result};
use serde::{Deserialize, Serialize};

pub const EFFECTIVE_CONFIG: &str = "config.toml";

/// As written by users: every key optional, model and optimizer tables partial.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub deterministic: Option<bool>,
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint_every: Option<usize>,
    pub model: Option<toml::Table>,
    pub optimizer: Option<toml::Table>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {}", path.display(), e.message())))
    }

    fn variant(&self) -> Result<Option<Variant>> {
        match self.model.as_ref().and_then(|m| m.get("variant")) {
            None => Ok(None),
            Some(toml::Value::String(s)) => s.parse().map(Some),
            Some(other) => Err(Error::config(format!("model.variant must be a string, got {other}"))),
        }
    }
}

/// Values given on the command line.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub variant: Option<Variant>,
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub iterations: Option<usize>,
    pub base_lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

/// Fully resolved configuration of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Every kernel runs single-threaded in a fixed order, so runs are
    /// reproducible either way; the flag is recorded for provenance.
    pub deterministic: bool,
    pub data: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_data: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint_every: usize,
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: &toml::Table) {
    for (k, v) in top {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn overlay<T: Clone + Serialize + for<'de> Deserialize<'de>>(base: &T, top: Option<&toml::Table>, section: &str) -> Result<T> {
    let Some(top) = top else {
        return Ok(base.clone());
    };
    let mut table = toml::Table::try_from(base).map_err(|e| Error::config(e.to_string()))?;
    merge(&mut table, top);
    table.try_into().map_err(|e: toml::de::Error| Error::config(format!("[{section}] {}", e.message())))
}

impl RunConfig {
    /// `mode` is the training set's mode and picks the model defaults.
    pub fn resolve(file: &ConfigFile, flags: &Overrides, mode: impl FnOnce(&Path) -> Result<DatasetMode>) -> Result<Self> {
        let data = flags
            .data
            .clone()
            .or_else(|| file.data.clone())
            .ok_or_else(|| Error::config("no training data: pass --data or set `data` in the config file"))?;
        let out = flags
            .out
            .clone()
            .or_else(|| file.out.clone())
            .ok_or_else(|| Error::config("no output directory: pass --out or set `out` in the config file"))?;
        let variant = flags.variant.or(file.variant()?).unwrap_or(Variant::Ours);
        let defaults = match mode(&data)? {
            DatasetMode::Mpii => ModelConfig::human(variant),
            DatasetMode::Garment => ModelConfig::garment(variant),
        };
        let mut model = overlay(&defaults, file.model.as_ref(), "model")?;
        model.variant = variant;
        let mut optimizer = overlay(&OptimizerConfig::default(), file.optimizer.as_ref(), "optimizer")?;
        if let Some(v) = flags.iterations {
            optimizer.iterations = v;
            if file.optimizer.as_ref().is_none_or(|t| !t.contains_key("decay_iteration")) {
                optimizer.decay_iteration = v / 2;
            }
        }
        if let Some(v) = flags.base_lr {
            optimizer.base_lr = v;
        }
        if let Some(v) = flags.batch_size {
            optimizer.batch_size = v;
        }
        let config = Self {
            seed: flags.seed.or(file.seed).unwrap_or(0),
            deterministic: file.deterministic.unwrap_or(true),
            data,
            test_data: flags.test_data.clone().or_else(|| file.test_data.clone()),
            out,
            checkpoint_every: flags.checkpoint_every.or(file.checkpoint_every).unwrap_or(0),
            optimizer,
            model,
        };
        let mut problems = config.optimizer.violations();
        problems.extend(config.model.violations());
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mpii(_: &Path) -> Result<DatasetMode> {
        Ok(DatasetMode::Mpii)
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: ConfigFile = toml::from_str(
            r#"
            seed = 3
            data = "file_data"
            out = "file_out"
            [model]
            variant = "separate"
            dropout = 0.25
            [optimizer]
            base_lr = 0.02
            iterations = 100
            decay_iteration = 10
            "#,
        )
        .unwrap();
        let flags = Overrides { seed: Some(9), out: Some("flag_out".into()), iterations: Some(400), ..Default::default() };
        let c = RunConfig::resolve(&file, &flags, mpii).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.data, PathBuf::from("file_data"));
        assert_eq!(c.out, PathBuf::from("flag_out"));
        assert_eq!(c.model.variant, Variant::Separate);
        assert_eq!(c.model.dropout, 0.25);
        assert_eq!(c.model.extractor_channels, ModelConfig::human(Variant::Separate).extractor_channels);
        assert_eq!(c.optimizer.base_lr, 0.02);
        assert_eq!(c.optimizer.iterations, 400);
        // an explicit decay point in the file is kept
        assert_eq!(c.optimizer.decay_iteration, 10);
    }

    #[test]
    fn effective_config_round_trips() {
        let flags = Overrides { data: Some("d".into()), out: Some("o".into()), ..Default::default() };
        let c = RunConfig::resolve(&ConfigFile::default(), &flags, mpii).unwrap();
        let text = c.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        let file: ConfigFile = toml::from_str(&text).unwrap();
        assert_eq!(RunConfig::resolve(&file, &Overrides::default(), mpii).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ConfigFile>("sede = 1").is_err());
        let file: ConfigFile = toml::from_str("[model]\ndropot = 0.1").unwrap();
        let flags = Overrides { data: Some("d".into()), out: Some("o".into()), ..Default::default() };
        let err = RunConfig::resolve(&file, &flags, mpii).unwrap_err().to_string();
        assert!(err.contains("dropot"), "{err}");
    }

    #[test]
    fn missing_data_is_a_config_error() {
        let flags = Overrides { out: Some("o".into()), ..Default::default() };
        assert!(matches!(RunConfig::resolve(&ConfigFile::default(), &flags, mpii), Err(Error::Config(_))));
    }
}
