//! Run configuration: a TOML document with environment overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use swinsyn::inference::TilingConfig;
use swinsyn::metrics::{EmptyDice, SsimConfig};
use swinsyn::model::ModelConfig;
use swinsyn::training::TrainConfig;
use swinsyn::volume::DEFAULT_PATTERN;

/// Prefix of environment overrides: `SWINSYN__TRAIN__EPOCHS=5` sets
/// `train.epochs`.
pub const ENV_PREFIX: &str = "SWINSYN__";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding one subdirectory per subject.
    pub root: PathBuf,
    /// File naming inside a subject directory.
    pub pattern: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: PathBuf::from("data"),
            pattern: DEFAULT_PATTERN.to_string(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Dice of a region absent from both masks.
    pub empty_dice: EmptyDice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of the modality dropout.
    pub seed: u64,
    /// Parallel subjects during synthesis and evaluation.
    pub workers: usize,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tiling: TilingConfig,
    pub ssim: SsimConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            tiling: TilingConfig::default(),
            ssim: SsimConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a string.
fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().context("empty override key")?;
    let mut table = root;
    for key in parents {
        let entry = table
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override path {} crosses a non-table value", path.join(".")),
        };
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.tiling.validate()?;
        self.ssim.validate()?;
        if self.workers == 0 {
            bail!(swinsyn::Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Reads `path` (or starts from defaults), then applies overrides from
    /// `env` pairs carrying [`ENV_PREFIX`].
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<RunConfig> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    swinsyn::Error::Config(format!("cannot read {}: {e}", p.display()))
                })?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| swinsyn::Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        overrides.sort();
        for (key, raw) in overrides {
            let path: Vec<String> = key[ENV_PREFIX.len()..]
                .split("__")
                .map(str::to_ascii_lowercase)
                .collect();
            apply_override(&mut table, &path, parse_literal(&raw))
                .map_err(|e| swinsyn::Error::Config(format!("{key}: {e}")))?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| swinsyn::Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG);
        let text = toml::to_string_pretty(self).context("serializing configuration")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = RunConfig::load(
            None,
            env(&[
                ("SWINSYN__TRAIN__EPOCHS", "7"),
                ("SWINSYN__TRAIN__TARGET_MODALITY", "t2"),
                ("SWINSYN__TILING__OVERLAP", "0.25"),
                ("SWINSYN__SEED", "9"),
                ("SWINSYN__DATA__ROOT", "/tmp/x"),
                ("UNRELATED", "1"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.target_modality, swinsyn::volume::Modality::T2w);
        assert_eq!(cfg.tiling.overlap, 0.25);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.data.root, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::load(None, env(&[("SWINSYN__TRAIN__EPOCS", "7")])).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[model]\nwindw = 3\n").unwrap();
        assert!(RunConfig::load(Some(&path), Vec::new()).is_err());
        std::fs::write(&path, "seed = 3\n[train]\nepochs = 0\n").unwrap();
        assert!(RunConfig::load(Some(&path), Vec::new()).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.train.steps_per_epoch = Some(3);
        let path = cfg.write_resolved(dir.path()).unwrap();
        assert_eq!(RunConfig::load(Some(&path), Vec::new()).unwrap(), cfg);
    }
}
