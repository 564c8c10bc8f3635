//! Size parsing and the flag > config file > default merge.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use defectkan::{KanConfig, ModelName, TrainConfig};

use crate::RunFlags;

fn parse_dims<const N: usize>(s: &str, what: &str) -> Result<[usize; N], String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    if parts.len() != N {
        return Err(format!("expected {what}, got {s:?}"));
    }
    let mut out = [0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .trim()
            .parse()
            .map_err(|_| format!("expected {what}, got {s:?}"))?;
        if *o == 0 {
            return Err(format!("dimensions in {s:?} must be positive"));
        }
    }
    Ok(out)
}

/// `HxW`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ImageSize(pub [usize; 2]);

impl FromStr for ImageSize {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        parse_dims(s, "HxW").map(ImageSize)
    }
}

impl TryFrom<String> for ImageSize {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<ImageSize> for String {
    fn from(s: ImageSize) -> String {
        s.to_string()
    }
}

impl fmt::Display for ImageSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0[0], self.0[1])
    }
}

/// `CxHxW`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct InputShape(pub [usize; 3]);

impl FromStr for InputShape {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        parse_dims(s, "CxHxW").map(InputShape)
    }
}

impl TryFrom<String> for InputShape {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<InputShape> for String {
    fn from(s: InputShape) -> String {
        s.to_string()
    }
}

impl fmt::Display for InputShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

pub const DEFAULT_INPUT: InputShape = InputShape([1, 64, 64]);

/// Keys accepted in a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<ModelName>,
    pub models: Option<Vec<ModelName>>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub input: Option<InputShape>,
    pub grid_update: Option<bool>,
    pub split_seed: Option<u64>,
    pub grid_size: Option<usize>,
    pub spline_degree: Option<usize>,
    pub base_term: Option<bool>,
    pub repeats: Option<usize>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, UsageError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("bad config {}: {e}", path.display())))
    }
}

/// Invalid or missing settings, detected before any work starts.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Fully resolved settings of a `train` or `benchmark` run; echoed and saved.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSettings {
    pub command: String,
    pub models: Vec<ModelName>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub input: InputShape,
    pub split_seed: u64,
    pub split_fractions: [f64; 3],
    pub kan: KanConfig,
    pub train: TrainConfig,
}

fn required<T>(flag: Option<T>, file: Option<T>, name: &str) -> Result<T, UsageError> {
    flag.or(file)
        .ok_or_else(|| UsageError(format!("--{name} is required (flag or config key)")))
}

pub fn resolve(
    command: &str,
    models: Vec<ModelName>,
    repeats: Option<usize>,
    flags: RunFlags,
) -> Result<RunSettings, UsageError> {
    let file = FileConfig::load(flags.config.as_deref())?;
    let models = if !models.is_empty() {
        models
    } else if command == "train" {
        file.model.into_iter().collect()
    } else {
        file.models.unwrap_or_default()
    };
    if models.is_empty() {
        let flag = if command == "train" { "model" } else { "models" };
        return Err(UsageError(format!("--{flag} is required (flag or config key)")));
    }
    let defaults = TrainConfig::default();
    let train = TrainConfig {
        epochs: flags.epochs.or(file.epochs).unwrap_or(defaults.epochs),
        batch_size: flags.batch.or(file.batch).unwrap_or(defaults.batch_size),
        lr: flags.lr.or(file.lr).unwrap_or(defaults.lr),
        beta1: file.beta1.unwrap_or(defaults.beta1),
        beta2: file.beta2.unwrap_or(defaults.beta2),
        eps: file.eps.unwrap_or(defaults.eps),
        seed: flags.seed.or(file.seed).unwrap_or(defaults.seed),
        grid_update: flags.grid_update || file.grid_update.unwrap_or(false),
        repeats: if command == "train" {
            1
        } else {
            repeats.or(file.repeats).unwrap_or(defaults.repeats)
        },
    };
    train
        .validate()
        .map_err(|e| UsageError(e.to_string()))?;
    let kan_defaults = KanConfig::default();
    let kan = KanConfig {
        grid_size: flags.grid_size.or(file.grid_size).unwrap_or(kan_defaults.grid_size),
        degree: flags
            .spline_degree
            .or(file.spline_degree)
            .unwrap_or(kan_defaults.degree),
        base_term: !flags.no_base_term && file.base_term.unwrap_or(kan_defaults.base_term),
        ..kan_defaults
    };
    Ok(RunSettings {
        command: command.to_string(),
        models,
        data: required(flags.data, file.data, "data")?,
        out: required(flags.out, file.out, "out")?,
        input: flags.input.or(file.input).unwrap_or(DEFAULT_INPUT),
        split_seed: flags.split_seed.or(file.split_seed).unwrap_or(0),
        split_fractions: defectkan::data::DEFAULT_FRACTIONS,
        kan,
        train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!("3x200x200".parse::<InputShape>().unwrap(), InputShape([3, 200, 200]));
        assert_eq!("64X32".parse::<ImageSize>().unwrap(), ImageSize([64, 32]));
        assert!("3x200".parse::<InputShape>().is_err());
        assert!("0x4".parse::<ImageSize>().is_err());
        assert!("ax4".parse::<ImageSize>().is_err());
    }

    #[test]
    fn flags_override_file_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(
            &path,
            r#"{"model":"TwoLayerConvKAN","data":"d","out":"o","epochs":7,"lr":0.01,"input":"1x32x32"}"#,
        )
        .unwrap();
        let flags = RunFlags {
            config: Some(path),
            epochs: Some(3),
            ..Default::default()
        };
        let s = resolve("train", Vec::new(), None, flags).unwrap();
        assert_eq!(s.models, vec![ModelName::TwoLayerConvKAN]);
        assert_eq!(s.train.epochs, 3);
        assert_eq!(s.train.lr, 0.01);
        assert_eq!(s.train.batch_size, 32);
        assert_eq!(s.input, InputShape([1, 32, 32]));
    }

    #[test]
    fn unknown_keys_and_missing_values_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"epoch": 3}"#).unwrap();
        let flags = RunFlags {
            config: Some(path),
            ..Default::default()
        };
        assert!(resolve("train", vec![ModelName::TwoLayerConvNet], None, flags).is_err());
        let missing = RunFlags::default();
        assert!(resolve("train", vec![ModelName::TwoLayerConvNet], None, missing).is_err());
    }
}
