//! Run configuration files, manifests and checkpoint files on disk.

use std::fs;
use std::path::{Path, PathBuf};

use mobivit_core::{checkpoint, build_model, Model, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::data::{self, CifarSplit, Dataset, LabeledImage, Preprocess, Split, SyntheticKind};
use crate::error::{CliError, Result};

/// Where training and evaluation images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Train images are indices `0..n_train` of the synthetic stream, val
    /// images the next `n_val`.
    Synthetic {
        kind: SyntheticKind,
        n_train: usize,
        n_val: usize,
        classes: usize,
        /// Image side before preprocessing.
        size: usize,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    /// Training images from the train batches, validation from the test batch.
    Cifar10 {
        dir: PathBuf,
        train_limit: Option<usize>,
        val_limit: Option<usize>,
    },
}

fn default_sigma() -> f64 {
    data::DEFAULT_SIGMA
}

pub enum Loaded {
    Synthetic(Vec<LabeledImage>),
    Cifar(CifarSplit),
}

impl Loaded {
    pub fn as_dataset(&self) -> &dyn Dataset {
        match self {
            Loaded::Synthetic(v) => v,
            Loaded::Cifar(c) => c,
        }
    }
}

impl DataSource {
    /// Loads `(train, val)`; synthetic sets are generated from `seed`.
    pub fn load(&self, seed: u64) -> Result<(Loaded, Loaded)> {
        match self {
            DataSource::Synthetic {
                kind,
                n_train,
                n_val,
                classes,
                size,
                sigma,
            } => {
                let mut all = data::synthetic_set(*kind, n_train + n_val, *size, *classes, seed, *sigma)?;
                let val = all.split_off(*n_train);
                Ok((Loaded::Synthetic(all), Loaded::Synthetic(val)))
            }
            DataSource::Cifar10 {
                dir,
                train_limit,
                val_limit,
            } => {
                let mut train = data::load_cifar10(dir, Split::Train)?;
                let mut val = data::load_cifar10(dir, Split::Test)?;
                if let Some(n) = train_limit {
                    train.truncate(*n);
                }
                if let Some(n) = val_limit {
                    val.truncate(*n);
                }
                Ok((Loaded::Cifar(train), Loaded::Cifar(val)))
            }
        }
    }

    /// Validation split only (used by `eval`).
    pub fn load_val(&self, seed: u64) -> Result<Loaded> {
        match self {
            DataSource::Synthetic {
                kind,
                n_train,
                n_val,
                classes,
                size,
                sigma,
            } => {
                let mut all = data::synthetic_set(*kind, n_train + n_val, *size, *classes, seed, *sigma)?;
                Ok(Loaded::Synthetic(all.split_off(*n_train)))
            }
            DataSource::Cifar10 { dir, val_limit, .. } => {
                let mut val = data::load_cifar10(dir, Split::Test)?;
                if let Some(n) = val_limit {
                    val.truncate(*n);
                }
                Ok(Loaded::Cifar(val))
            }
        }
    }
}

/// The TOML run file. Exactly one of `preset` and `[model]` is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: Option<DataSource>,
    #[serde(default)]
    pub preprocess: Preprocess,
    /// Worker threads per batch; results depend on this count but are
    /// reproducible for a fixed value.
    #[serde(default = "one")]
    pub threads: usize,
}

fn one() -> usize {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            model: None,
            train: TrainConfig::default(),
            data: None,
            preprocess: Preprocess::default(),
            threads: one(),
        }
    }
}

impl RunConfig {
    pub fn from_preset(name: &str) -> Self {
        Self {
            preset: Some(name.to_string()),
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = match (&self.preset, &self.model) {
            (Some(p), None) => ModelConfig::preset(p)?,
            (None, Some(m)) => m.clone(),
            (Some(_), Some(_)) => return Err(CliError::Config("give either `preset` or `[model]`, not both".into())),
            (None, None) => return Err(CliError::Config("a `preset` or a `[model]` table is required".into())),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train.validate()?;
        self.preprocess.validate()?;
        if self.threads == 0 {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        Ok(())
    }
}

/// Snapshot written before any compute; `train --manifest` replays it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub threads: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<DataSource>,
    pub preprocess: Preprocess,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

impl RunManifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("manifest not serializable: {e}")))
    }

    pub fn write(&self) -> Result<PathBuf> {
        create_dir(&self.output_dir)?;
        let path = self.output_dir.join(MANIFEST_FILE);
        write_file(&path, self.to_toml()?.as_bytes())?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Architecture and preprocessing stored next to each `.ckpt` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub preprocess: Preprocess,
    /// Epoch the parameters come from; absent for the initial model.
    pub epoch: Option<usize>,
    pub val_accuracy: Option<f64>,
}

pub fn meta_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("toml")
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes `<name>.ckpt` and its `<name>.toml` sidecar. The sidecar is
/// written first so a readable checkpoint always has its config.
pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, ckpt: &Path) -> Result<()> {
    let text = toml::to_string(meta).map_err(|e| CliError::Config(e.to_string()))?;
    write_file(&meta_path(ckpt), text.as_bytes())?;
    write_file(ckpt, &checkpoint::encode(&model.store))
}

pub fn load_checkpoint(ckpt: &Path) -> Result<(Model, CheckpointMeta)> {
    let mp = meta_path(ckpt);
    let text = fs::read_to_string(&mp).map_err(|e| CliError::io(&mp, e))?;
    let meta: CheckpointMeta = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", mp.display())))?;
    let bytes = fs::read(ckpt).map_err(|e| CliError::io(ckpt, e))?;
    let mut model = build_model(&meta.model, 0)?;
    checkpoint::load_into(&mut model.store, &bytes).map_err(|e| match e {
        e @ mobivit_core::Error::Format { .. } => CliError::data(ckpt, e),
        e => CliError::Config(format!("{}: checkpoint does not match its config: {e}", ckpt.display())),
    })?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("preset = \"desk-32\"\n").is_ok());
        assert!(RunConfig::parse("preset = \"desk-32\"\nepochs = 3\n").is_err());
        assert!(RunConfig::parse("preset = \"desk-32\"\n[train]\nepoch = 3\n").is_err());
        let bad = "preset = \"desk-32\"\n[data]\nsource = \"synthetic\"\nkind = \"two_gaussians\"\nn_train = 4\nn_val = 2\nclasses = 2\nsize = 32\nfoo = 1\n";
        assert!(RunConfig::parse(bad).is_err());
    }

    #[test]
    fn preset_xor_model() {
        let both = RunConfig {
            model: Some(ModelConfig::preset("desk-32").unwrap()),
            ..RunConfig::from_preset("desk-32")
        };
        assert!(matches!(both.model_config(), Err(CliError::Config(_))));
        assert!(RunConfig::default().model_config().is_err());
        assert!(RunConfig::from_preset("nope").model_config().is_err());
    }

    #[test]
    fn manifest_round_trips() {
        let m = RunManifest {
            subcommand: "train".into(),
            config_path: None,
            seed: 7,
            output_dir: "out".into(),
            threads: 1,
            model: ModelConfig::preset("desk-64").unwrap(),
            train: TrainConfig::default(),
            data: Some(DataSource::Synthetic {
                kind: SyntheticKind::TwoGaussians,
                n_train: 10,
                n_val: 4,
                classes: 2,
                size: 32,
                sigma: data::DEFAULT_SIGMA,
            }),
            preprocess: Preprocess::default(),
        };
        let text = m.to_toml().unwrap();
        let back: RunManifest = toml::from_str(&text).unwrap();
        assert_eq!(back, m);
    }
}
