//! Flat `key = value` run configuration.
//!
//! Every key has a default, unknown keys are errors and `#` starts a
//! comment. [`RunConfig::to_text`] writes every key in canonical order, so a
//! parsed config echoes back byte-identically.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::train::{Grid, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given twice")]
    Duplicate { line: usize, key: String },
    #[error("{key}: cannot parse {value:?} ({expected})")]
    Value {
        key: String,
        value: String,
        expected: String,
    },
    #[error("unknown preset {0:?} (desk, paper)")]
    Preset(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Everything one run needs: training hyper-parameters, architecture,
/// augmentation and paths.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub manifest: Option<PathBuf>,
    pub donor: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            manifest: None,
            donor: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Keys in canonical order.
pub const KEYS: [&str; 24] = [
    "seed",
    "init_mode",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "lr_decay",
    "batch_size",
    "epochs",
    "augment",
    "augment_rotation",
    "augment_scale",
    "augment_translation",
    "input_size",
    "initial_channels",
    "growth_rate",
    "block_layout",
    "compression",
    "num_classes",
    "norm_momentum",
    "norm_epsilon",
    "manifest",
    "donor",
    "out_dir",
];

/// Keys that accept a comma-separated list in a grid file.
pub const GRID_KEYS: [&str; 7] = [
    "learning_rate",
    "lr_decay",
    "batch_size",
    "augment_rotation",
    "augment_scale",
    "augment_translation",
    "epochs",
];

fn parse_value<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<T> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        expected: expected.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str, expected: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| parse_value(key, v.trim(), expected))
        .collect()
}

fn path_value(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn path_text(path: &Option<PathBuf>) -> String {
    path.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

/// Splits config text into `(line, key, value)` triples.
fn entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        let key = key.trim().to_string();
        if !seen.insert(key.clone()) {
            return Err(ConfigError::Duplicate { line: i + 1, key });
        }
        out.push((i + 1, key, value.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "paper" => Ok(Self {
                train: TrainConfig::paper(),
                ..Self::default()
            }),
            other => Err(ConfigError::Preset(other.to_string())),
        }
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), ConfigError> {
        let t = &mut self.train;
        let float = "a number";
        let count = "a nonnegative integer";
        match key {
            "seed" => t.seed = parse_value(key, value, count)?,
            "init_mode" => t.init_mode = parse_value(key, value, "gaussian or pretrained-frozen")?,
            "learning_rate" => t.adam.learning_rate = parse_value(key, value, float)?,
            "beta1" => t.adam.beta1 = parse_value(key, value, float)?,
            "beta2" => t.adam.beta2 = parse_value(key, value, float)?,
            "epsilon" => t.adam.epsilon = parse_value(key, value, float)?,
            "lr_decay" => t.lr_decay = parse_value(key, value, float)?,
            "batch_size" => t.batch_size = parse_value(key, value, count)?,
            "epochs" => t.epochs = parse_value(key, value, count)?,
            "augment" => t.augment.enabled = parse_value(key, value, "true or false")?,
            "augment_rotation" => t.augment.rotation = parse_value(key, value, float)?,
            "augment_scale" => t.augment.scale = parse_value(key, value, float)?,
            "augment_translation" => t.augment.translation = parse_value(key, value, float)?,
            "input_size" => t.spec.input_size = parse_value(key, value, count)?,
            "initial_channels" => t.spec.initial_channels = parse_value(key, value, count)?,
            "growth_rate" => t.spec.growth_rate = parse_value(key, value, count)?,
            "block_layout" => t.spec.block_layout = parse_list(key, value, "comma-separated layer counts")?,
            "compression" => t.spec.compression = parse_value(key, value, float)?,
            "num_classes" => t.spec.num_classes = parse_value(key, value, count)?,
            "norm_momentum" => t.spec.norm_momentum = parse_value(key, value, float)?,
            "norm_epsilon" => t.spec.norm_epsilon = parse_value(key, value, float)?,
            "manifest" => self.manifest = path_value(value),
            "donor" => self.donor = path_value(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "seed" => t.seed.to_string(),
            "init_mode" => t.init_mode.as_str().to_string(),
            "learning_rate" => t.adam.learning_rate.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "epsilon" => t.adam.epsilon.to_string(),
            "lr_decay" => t.lr_decay.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "epochs" => t.epochs.to_string(),
            "augment" => t.augment.enabled.to_string(),
            "augment_rotation" => t.augment.rotation.to_string(),
            "augment_scale" => t.augment.scale.to_string(),
            "augment_translation" => t.augment.translation.to_string(),
            "input_size" => t.spec.input_size.to_string(),
            "initial_channels" => t.spec.initial_channels.to_string(),
            "growth_rate" => t.spec.growth_rate.to_string(),
            "block_layout" => t
                .spec
                .block_layout
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "compression" => t.spec.compression.to_string(),
            "num_classes" => t.spec.num_classes.to_string(),
            "norm_momentum" => t.spec.norm_momentum.to_string(),
            "norm_epsilon" => t.spec.norm_epsilon.to_string(),
            "manifest" => path_text(&self.manifest),
            "donor" => path_text(&self.donor),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(Self::default(), text)
    }

    pub fn parse_over(mut base: Self, text: &str) -> Result<Self> {
        for (line, key, value) in entries(text)? {
            base.set(&key, &value).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line, key },
                other => other,
            })?;
        }
        Ok(base)
    }

    /// Canonical text: every key, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("every key renders")))
            .collect()
    }
}

/// Parses a grid file: the grid keys take comma-separated lists.
pub fn parse_grid(text: &str) -> Result<Grid> {
    let mut grid = Grid::default();
    for (line, key, value) in entries(text)? {
        let float = "comma-separated numbers";
        let count = "comma-separated integers";
        match key.as_str() {
            "learning_rate" => grid.learning_rate = parse_list(&key, &value, float)?,
            "lr_decay" => grid.lr_decay = parse_list(&key, &value, float)?,
            "batch_size" => grid.batch_size = parse_list(&key, &value, count)?,
            "augment_rotation" => grid.rotation = parse_list(&key, &value, float)?,
            "augment_scale" => grid.scale = parse_list(&key, &value, float)?,
            "augment_translation" => grid.translation = parse_list(&key, &value, float)?,
            "epochs" => grid.epochs = parse_list(&key, &value, count)?,
            _ => return Err(ConfigError::UnknownKey { line, key }),
        }
    }
    Ok(grid)
}

/// Default search grid.
pub fn default_grid() -> Grid {
    Grid {
        learning_rate: vec![0.001, 0.0005],
        lr_decay: vec![1.0, 0.98],
        ..Grid::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::InitMode;

    #[test]
    fn canonical_text_round_trips() {
        let c = RunConfig::default();
        let text = c.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(RunConfig::parse(&text).unwrap().to_text(), text);
        assert!(text.starts_with("seed = 42\ninit_mode = gaussian\nlearning_rate = 0.001\n"));
    }

    #[test]
    fn comments_and_overrides() {
        let c = RunConfig::parse("# run\nepochs = 7  # short\nblock_layout = 2, 3\n\ninit_mode = pretrained-frozen\n").unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.spec.block_layout, vec![2, 3]);
        assert_eq!(c.train.init_mode, InitMode::PretrainedFrozen);
        assert_eq!(c.train.adam.beta2, 0.999);
    }

    #[test]
    fn unknown_duplicate_and_malformed() {
        assert_eq!(
            RunConfig::parse("epochs = 1\nwarmup = 3\n"),
            Err(ConfigError::UnknownKey {
                line: 2,
                key: "warmup".into()
            })
        );
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(ConfigError::Duplicate { .. })));
        assert!(matches!(RunConfig::parse("seed"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse("batch_size = five"), Err(ConfigError::Value { .. })));
    }

    #[test]
    fn presets() {
        assert_eq!(RunConfig::preset("desk").unwrap().train.epochs, 100);
        assert_eq!(RunConfig::preset("paper").unwrap().train.epochs, 350);
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn grid_lists() {
        let g = parse_grid("learning_rate = 0.01, 0.001\nbatch_size = 5\n").unwrap();
        assert_eq!(g.learning_rate, vec![0.01, 0.001]);
        assert_eq!(g.batch_size, vec![5]);
        assert!(parse_grid("beta1 = 0.9").is_err());
    }
}
