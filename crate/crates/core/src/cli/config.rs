//! Flat `key = value` run configuration. Keys are grouped by prefix
//! (`train.`, `encoder.`, `metric.`, `synth.`, `data.`); unknown keys are
//! rejected and relative paths resolve against the config file's directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::encoder::EncoderConfig;
use crate::metrics::{parse_ks, MetricConfig, Scale};
use crate::model::{BackboneSpec, CenterMode, DecayMode, TrainAugmentation, TrainConfig};
use crate::retrieval::Direction;
use crate::synthgen::SynthConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{path}: {reason}")]
    Read { path: String, reason: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown config key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate config key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("invalid value for `{key}`: {reason}")]
    Value { key: String, reason: String },
    #[error("missing config key `{0}`")]
    Missing(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Synth,
    Manifest,
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "synth" => Ok(Source::Synth),
            "manifest" => Ok(Source::Manifest),
            other => Err(format!("unknown source `{other}` (synth, manifest)")),
        }
    }
}

pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "out",
    "source",
    "data.train_manifest",
    "data.test_manifest",
    "data.vocab",
    "train.lr",
    "train.weight_decay",
    "train.decay",
    "train.epochs",
    "train.batch",
    "train.lambda_center",
    "train.aug",
    "train.center",
    "train.center_alpha",
    "train.backbone",
    "encoder.canvas_h",
    "encoder.canvas_w",
    "encoder.superpixel",
    "encoder.word_gap",
    "encoder.value_min",
    "encoder.value_max",
    "metric.ks",
    "metric.scale",
    "metric.exclude_pairs",
    "metric.direction",
    "synth.classes",
    "synth.images_per_class",
    "synth.texts_per_class",
    "synth.test_images_per_class",
    "synth.test_texts_per_class",
    "synth.concept_dim",
    "synth.noise_sigma",
    "synth.rho",
    "synth.vocab_size",
    "synth.words_per_text",
    "synth.word_dim",
    "synth.canvas_size",
    "synth.report_k",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub source: Source,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub train: TrainConfig,
    /// Set when `train.backbone` is given; otherwise the augmentation picks one.
    pub backbone: Option<BackboneSpec>,
    pub encoder: EncoderConfig,
    pub metric: MetricConfig,
    pub synth: SynthConfig,
    pub report_k: usize,
    present: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: None,
            source: Source::Synth,
            train_manifest: None,
            test_manifest: None,
            vocab: None,
            train: TrainConfig::default(),
            backbone: None,
            encoder: EncoderConfig::default(),
            metric: MetricConfig::default(),
            synth: SynthConfig::default(),
            report_k: 5,
            present: BTreeSet::new(),
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>().map_err(|e| ConfigError::Value {
        key: key.to_string(),
        reason: e.to_string(),
    })
}

pub fn parse_directions(raw: &str) -> Result<Vec<Direction>, String> {
    match raw {
        "both" => Ok(Direction::BOTH.to_vec()),
        other => Ok(vec![other.parse()?]),
    }
}

fn checked<T>(key: &str, r: Result<T, String>) -> Result<T, ConfigError> {
    r.map_err(|reason| ConfigError::Value {
        key: key.to_string(),
        reason,
    })
}

fn parse_bool(raw: &str) -> Result<bool, String> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(format!("`{other}` is not a boolean")),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (key, val) = (key.trim(), val.trim());
            if !KNOWN_KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line: i + 1,
                    key: key.to_string(),
                });
            }
            if !cfg.present.insert(key.to_string()) {
                return Err(ConfigError::Duplicate {
                    line: i + 1,
                    key: key.to_string(),
                });
            }
            cfg.set(key, val, base)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, raw: &str, base: &Path) -> Result<(), ConfigError> {
        let path = || base.join(raw);
        match key {
            "seed" => self.seed = value(key, raw)?,
            "out" => self.out = Some(path()),
            "source" => self.source = value(key, raw)?,
            "data.train_manifest" => self.train_manifest = Some(path()),
            "data.test_manifest" => self.test_manifest = Some(path()),
            "data.vocab" => self.vocab = Some(path()),
            "train.lr" => self.train.lr = value(key, raw)?,
            "train.weight_decay" => self.train.weight_decay = value(key, raw)?,
            "train.decay" => self.train.decay_mode = value::<DecayMode>(key, raw)?,
            "train.epochs" => self.train.epochs = value(key, raw)?,
            "train.batch" => self.train.batch = value(key, raw)?,
            "train.lambda_center" => self.train.lambda_center = value(key, raw)?,
            "train.aug" => self.train.augmentation = value::<TrainAugmentation>(key, raw)?,
            "train.center" => {
                self.train.center_mode = match raw {
                    "batch" => CenterMode::Batch,
                    "ema" => CenterMode::Ema {
                        alpha: match self.train.center_mode {
                            CenterMode::Ema { alpha } => alpha,
                            CenterMode::Batch => 0.5,
                        },
                    },
                    other => {
                        return checked(
                            key,
                            Err(format!("unknown center mode `{other}` (batch, ema)")),
                        )
                    }
                }
            }
            "train.center_alpha" => {
                let alpha = value(key, raw)?;
                if let CenterMode::Ema { alpha: a } = &mut self.train.center_mode {
                    *a = alpha;
                } else {
                    self.train.center_mode = CenterMode::Ema { alpha };
                }
            }
            "train.backbone" => self.backbone = Some(value(key, raw)?),
            "encoder.canvas_h" => self.encoder.canvas_h = value(key, raw)?,
            "encoder.canvas_w" => self.encoder.canvas_w = value(key, raw)?,
            "encoder.superpixel" => self.encoder.superpixel = value(key, raw)?,
            "encoder.word_gap" => self.encoder.word_gap = value(key, raw)?,
            "encoder.value_min" => self.encoder.value_min = value(key, raw)?,
            "encoder.value_max" => self.encoder.value_max = value(key, raw)?,
            "metric.ks" => self.metric.ks = checked(key, parse_ks(raw).map_err(|e| e.to_string()))?,
            "metric.scale" => self.metric.scale = value::<Scale>(key, raw)?,
            "metric.exclude_pairs" => self.metric.exclude_pairs = checked(key, parse_bool(raw))?,
            "metric.direction" => self.metric.directions = checked(key, parse_directions(raw))?,
            "synth.classes" => self.synth.classes = value(key, raw)?,
            "synth.images_per_class" => self.synth.images_per_class = value(key, raw)?,
            "synth.texts_per_class" => self.synth.texts_per_class = value(key, raw)?,
            "synth.test_images_per_class" => self.synth.test_images_per_class = value(key, raw)?,
            "synth.test_texts_per_class" => self.synth.test_texts_per_class = value(key, raw)?,
            "synth.concept_dim" => self.synth.concept_dim = value(key, raw)?,
            "synth.noise_sigma" => self.synth.noise_sigma = value(key, raw)?,
            "synth.rho" => self.synth.overlap_rho = value(key, raw)?,
            "synth.vocab_size" => self.synth.vocab_size = value(key, raw)?,
            "synth.words_per_text" => self.synth.words_per_text = value(key, raw)?,
            "synth.word_dim" => self.synth.word_dim = value(key, raw)?,
            "synth.canvas_size" => self.synth.canvas_size = value(key, raw)?,
            "synth.report_k" => self.report_k = value(key, raw)?,
            _ => unreachable!("key checked against KNOWN_KEYS"),
        }
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.present.contains(key)
    }

    pub fn require(&self, key: &str) -> Result<(), ConfigError> {
        if self.contains(key) {
            Ok(())
        } else {
            Err(ConfigError::Missing(key.to_string()))
        }
    }

    /// Training settings with the backbone resolved and the seed derived from the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            backbone: self
                .backbone
                .clone()
                .unwrap_or_else(|| self.train.augmentation.default_backbone()),
            seed: crate::io::derive_seed(self.seed, "train"),
            ..self.train.clone()
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: crate::io::derive_seed(self.seed, "synth"),
            ..self.synth.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_resolves_paths() {
        let text = "# run\nseed = 7\ntrain.lr = 0.01\ntrain.epochs=3\ntrain.aug = cfg-3\nmetric.ks = 1,2\nmetric.scale = percent\nmetric.exclude_pairs = true\nsynth.rho = 0.5\ndata.vocab = v/words.txt\nout = run\n";
        let cfg = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.metric.ks, vec![1, 2]);
        assert_eq!(cfg.metric.scale, Scale::Percent);
        assert!(cfg.metric.exclude_pairs);
        assert_eq!(cfg.synth.overlap_rho, 0.5);
        assert_eq!(cfg.vocab, Some(PathBuf::from("/base/v/words.txt")));
        assert_eq!(cfg.out, Some(PathBuf::from("/base/run")));
        assert_eq!(cfg.train_config().backbone, BackboneSpec::small_input());
        assert!(cfg.require("train.lr").is_ok());
        assert_eq!(
            cfg.require("train.batch"),
            Err(ConfigError::Missing("train.batch".into()))
        );
    }

    #[test]
    fn rejects_unknown_duplicate_and_bad_values() {
        let base = Path::new(".");
        assert!(matches!(
            RunConfig::parse("train.learning_rate = 1", base),
            Err(ConfigError::UnknownKey { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2", base),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(
            RunConfig::parse("seed", base),
            Err(ConfigError::Syntax { line: 1 })
        ));
        assert!(matches!(
            RunConfig::parse("train.lr = fast", base),
            Err(ConfigError::Value { .. })
        ));
        assert!(matches!(
            RunConfig::parse("metric.ks = 5,1", base),
            Err(ConfigError::Value { .. })
        ));
    }

    #[test]
    fn center_mode_keys() {
        let cfg = RunConfig::parse(
            "train.center = ema\ntrain.center_alpha = 0.25",
            Path::new("."),
        )
        .unwrap();
        assert_eq!(cfg.train.center_mode, CenterMode::Ema { alpha: 0.25 });
    }
}
