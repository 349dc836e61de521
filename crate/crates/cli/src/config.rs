//! Experiment files: TOML with `[model]`, `[dataset]` and `[federation]`
//! sections. Unknown keys are rejected everywhere.

use std::fmt;
use std::path::{Path, PathBuf};

use flocora::data::{load_cifar10, synthetic_split, SyntheticConfig};
use flocora::federation::FederationConfig;
use flocora::{Dataset, ModelKind, ModelSpec};
use serde::{Deserialize, Serialize};

/// Fallback CIFAR-10 directory when `dataset.path` is not set.
pub const DATA_ROOT_ENV: &str = "FLOCORA_DATA_ROOT";

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

/// Invalid configuration or unreachable dataset; the binary exits with 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticConfig),
    /// Standard binary batches; `path` falls back to `FLOCORA_DATA_ROOT`.
    Cifar10 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<PathBuf>,
    },
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One full experiment per seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub model: ModelKind,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub federation: FederationConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate().map_err(|e| config_error(format!("invalid config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            return Err(config_error("seeds must list at least one seed"));
        }
        self.federation.validate().map_err(|e| config_error(e.to_string()))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Train and test splits.
    pub fn load_dataset(&self, data_root: Option<&Path>) -> anyhow::Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetConfig::Synthetic(s) => synthetic_split(s).map_err(|e| config_error(e.to_string())),
            DatasetConfig::Cifar10 { path } => {
                let dir = path.as_deref().or(data_root).ok_or_else(|| {
                    config_error(format!("dataset.path is not set and {DATA_ROOT_ENV} is unset"))
                })?;
                if !dir.is_dir() {
                    return Err(config_error(format!("dataset directory {} does not exist", dir.display())));
                }
                load_cifar10(dir).map_err(|e| config_error(format!("cannot load CIFAR-10 from {}: {e}", dir.display())))
            }
        }
    }

    pub fn model_spec(&self, data: &Dataset) -> anyhow::Result<ModelSpec> {
        self.model
            .spec(data.num_classes(), data.image_shape())
            .map_err(|e| config_error(format!("model does not fit the dataset: {e}")))
    }
}

/// 2 for configuration and dataset problems, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<flocora::Error>() {
            if matches!(
                e,
                flocora::Error::Config(_) | flocora::Error::Format(_) | flocora::Error::Label { .. }
            ) {
                return 2;
            }
        }
    }
    1
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [model]
        arch = "tiny"
        width = 8

        [dataset]
        kind = "synthetic"
        train_per_class = 10
    "#;

    #[test]
    fn defaults_fill_in() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.federation, FederationConfig::default());
        assert_eq!(cfg.model, ModelKind::Tiny { width: 8 });
        match cfg.dataset {
            DatasetConfig::Synthetic(s) => assert_eq!(s.train_per_class, 10),
            _ => panic!("wrong dataset"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for extra in ["bogus = 1", "[federation]\nlearning_rate = 0.1", "[dataset.extra]\nx = 1"] {
            let text = format!("{MINIMAL}\n{extra}");
            assert!(toml::from_str::<ExperimentConfig>(&text).is_err(), "{extra}");
        }
        let typo = MINIMAL.replace("train_per_class", "train_per_klass");
        assert!(toml::from_str::<ExperimentConfig>(&typo).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.federation.quant_bits = Some(flocora::BitWidth::B4);
        let text = cfg.to_toml().unwrap();
        assert_eq!(toml::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn missing_cifar_directory_names_the_path() {
        let cfg = ExperimentConfig {
            dataset: DatasetConfig::Cifar10 { path: Some("/nonexistent/cifar".into()) },
            ..toml::from_str(MINIMAL).unwrap()
        };
        let err = cfg.load_dataset(None).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().contains("/nonexistent/cifar"));
    }
}
