//! Plain-text run configuration: `[arch]`, `[train]`, `[data]` and
//! `[postproc]` sections of `key = value` lines.
//!
//! ```text
//! # comment
//! [arch]
//! variant = 3rnn
//! scale = 1/8
//! [train]
//! epochs = 200
//! ```
//!
//! Every key has a default, so an empty file is a complete configuration.
//! Unknown sections and keys are rejected, as are repeated keys.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::model::ArchitectureSpec;
use crate::objective::Aggregator;
use crate::postproc::{LabelRanges, PostprocConfig, SmoothingConfig};
use crate::trainer::{InitMode, OptimizerKind, TrainConfig};

pub const SECTIONS: [&str; 4] = ["arch", "train", "data", "postproc"];

#[derive(Debug, Error, PartialEq)]
#[error("{}{key}: {reason}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ConfigError {
    pub line: Option<usize>,
    /// `section.key`, or the offending text when no key could be read.
    pub key: String,
    pub reason: String,
}

impl ConfigError {
    fn new(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            line: None,
            key: key.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub aggregator: Aggregator,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub seq_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// `fresh`, `load-whole` or `load-components`.
    pub init_mode: String,
    /// Source for `load-whole`.
    pub init_checkpoint: String,
    /// Branch sources for `load-components`.
    pub init_checkpoint_a: String,
    pub init_checkpoint_b: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            aggregator: t.aggregator,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            batch_size: t.batch_size,
            seq_len: t.seq_len,
            epochs: t.epochs,
            seed: t.seed,
            clip_norm: t.clip_norm,
            init_mode: t.init_mode.to_string(),
            init_checkpoint: String::new(),
            init_checkpoint_a: String::new(),
            init_checkpoint_b: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostprocSection {
    pub window_valence: usize,
    pub window_arousal: usize,
    pub aggregator: Aggregator,
    pub smoothing: bool,
    pub min_frames: usize,
    pub alpha: f64,
}

impl Default for PostprocSection {
    fn default() -> Self {
        let p = PostprocConfig::default();
        let s = SmoothingConfig::default();
        Self {
            window_valence: p.window_valence,
            window_arousal: p.window_arousal,
            aggregator: p.aggregator(),
            smoothing: p.smoothing.is_some(),
            min_frames: s.min_frames,
            alpha: s.alpha,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub arch: ArchitectureSpec,
    pub train: TrainSection,
    pub data: LabelRanges,
    pub postproc: PostprocSection,
}

fn parse<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: ToString,
{
    value.parse().map_err(|e: T::Err| {
        let e = e.to_string();
        if e.contains(value) {
            e
        } else {
            format!("cannot parse `{value}`: {e}")
        }
    })
}

fn finite(value: &str) -> Result<f64, String> {
    parse::<f64>(value).and_then(|v| if v.is_finite() { Ok(v) } else { Err(format!("`{value}` is not finite")) })
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut section: Option<&str> = None;
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let at = |mut e: ConfigError| {
                e.line = Some(i + 1);
                e
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| at(ConfigError::new(line, "unterminated section header")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(at(ConfigError::new(
                        format!("[{name}]"),
                        format!("unknown section (expected one of {})", SECTIONS.join(", ")),
                    )));
                }
                section = SECTIONS.iter().copied().find(|s| *s == name);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(ConfigError::new(line, "expected `key = value`")))?;
            let sec = section.ok_or_else(|| at(ConfigError::new(key.trim(), "key outside any section")))?;
            let full = format!("{sec}.{}", key.trim());
            if !seen.insert(full.clone()) {
                return Err(at(ConfigError::new(full, "repeated key")));
            }
            cfg.set(&full, value.trim()).map_err(at)?;
        }
        Ok(cfg)
    }

    /// Apply `section.key = value`, as used for command-line overrides.
    pub fn set(&mut self, full_key: &str, value: &str) -> Result<(), ConfigError> {
        let (section, key) = full_key
            .split_once('.')
            .ok_or_else(|| ConfigError::new(full_key, "expected `section.key`"))?;
        let value = value.trim();
        let r: Result<(), String> = match section {
            "arch" => self.arch.set(key, value).map_err(|e| {
                // ArchitectureSpec::set prefixes its own key name
                e.strip_prefix(&format!("{key}: ")).map(str::to_string).unwrap_or(e)
            }),
            "train" => self.set_train(key, value),
            "data" => self.set_data(key, value),
            "postproc" => self.set_postproc(key, value),
            _ => Err(format!("unknown section (expected one of {})", SECTIONS.join(", "))),
        };
        r.map_err(|reason| ConfigError::new(full_key, reason))
    }

    fn set_train(&mut self, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key {
            "aggregator" => t.aggregator = parse(value)?,
            "learning_rate" => t.learning_rate = finite(value)?,
            "optimizer" => t.optimizer = parse(value)?,
            "batch_size" => t.batch_size = parse(value)?,
            "seq_len" => t.seq_len = parse(value)?,
            "epochs" => t.epochs = parse(value)?,
            "seed" => t.seed = parse(value)?,
            "clip_norm" => t.clip_norm = finite(value)?,
            "init_mode" => {
                InitMode::from_str(value)?;
                t.init_mode = value.to_string();
            }
            "init_checkpoint" => t.init_checkpoint = value.to_string(),
            "init_checkpoint_a" => t.init_checkpoint_a = value.to_string(),
            "init_checkpoint_b" => t.init_checkpoint_b = value.to_string(),
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    fn set_data(&mut self, key: &str, value: &str) -> Result<(), String> {
        let r = &mut self.data;
        let slot = match key {
            "valence_min" => &mut r.valence.0,
            "valence_max" => &mut r.valence.1,
            "arousal_min" => &mut r.arousal.0,
            "arousal_max" => &mut r.arousal.1,
            _ => return Err("unknown key".into()),
        };
        *slot = finite(value)?;
        Ok(())
    }

    fn set_postproc(&mut self, key: &str, value: &str) -> Result<(), String> {
        let p = &mut self.postproc;
        match key {
            "window_valence" => p.window_valence = parse(value)?,
            "window_arousal" => p.window_arousal = parse(value)?,
            "aggregator" => p.aggregator = parse(value)?,
            "smoothing" => p.smoothing = parse(value)?,
            "min_frames" => p.min_frames = parse(value)?,
            "alpha" => p.alpha = finite(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Every key with its effective value, in a form [`Config::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = |name: &str, pairs: Vec<(&str, String)>| {
            let _ = writeln!(s, "[{name}]");
            for (k, v) in pairs {
                let _ = writeln!(s, "{k} = {v}");
            }
            s.push('\n');
        };
        section("arch", self.arch.to_pairs());
        let t = &self.train;
        section(
            "train",
            vec![
                ("aggregator", t.aggregator.to_string()),
                ("learning_rate", t.learning_rate.to_string()),
                ("optimizer", t.optimizer.to_string()),
                ("batch_size", t.batch_size.to_string()),
                ("seq_len", t.seq_len.to_string()),
                ("epochs", t.epochs.to_string()),
                ("seed", t.seed.to_string()),
                ("clip_norm", t.clip_norm.to_string()),
                ("init_mode", t.init_mode.clone()),
                ("init_checkpoint", t.init_checkpoint.clone()),
                ("init_checkpoint_a", t.init_checkpoint_a.clone()),
                ("init_checkpoint_b", t.init_checkpoint_b.clone()),
            ],
        );
        let d = &self.data;
        section(
            "data",
            vec![
                ("valence_min", d.valence.0.to_string()),
                ("valence_max", d.valence.1.to_string()),
                ("arousal_min", d.arousal.0.to_string()),
                ("arousal_max", d.arousal.1.to_string()),
            ],
        );
        let p = &self.postproc;
        section(
            "postproc",
            vec![
                ("window_valence", p.window_valence.to_string()),
                ("window_arousal", p.window_arousal.to_string()),
                ("aggregator", p.aggregator.to_string()),
                ("smoothing", p.smoothing.to_string()),
                ("min_frames", p.min_frames.to_string()),
                ("alpha", p.alpha.to_string()),
            ],
        );
        s.pop();
        s
    }

    /// The training configuration, with checkpoint paths checked against `init_mode`.
    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let t = &self.train;
        let need = |key: &str, v: &str| {
            if v.is_empty() {
                Err(ConfigError::new(
                    format!("train.{key}"),
                    format!("required by init_mode = {}", t.init_mode),
                ))
            } else {
                Ok(PathBuf::from(v))
            }
        };
        let init_mode = match InitMode::from_str(&t.init_mode).map_err(|e| ConfigError::new("train.init_mode", e))? {
            InitMode::Fresh => InitMode::Fresh,
            InitMode::LoadWhole(_) => InitMode::LoadWhole(need("init_checkpoint", &t.init_checkpoint)?),
            InitMode::LoadComponents { .. } => InitMode::LoadComponents {
                a: need("init_checkpoint_a", &t.init_checkpoint_a)?,
                b: need("init_checkpoint_b", &t.init_checkpoint_b)?,
            },
        };
        Ok(TrainConfig {
            arch: self.arch.clone(),
            aggregator: t.aggregator,
            learning_rate: t.learning_rate,
            optimizer: t.optimizer,
            batch_size: t.batch_size,
            seq_len: t.seq_len,
            epochs: t.epochs,
            seed: t.seed,
            clip_norm: t.clip_norm,
            init_mode,
            ranges: self.data,
        })
    }

    pub fn postproc_config(&self) -> PostprocConfig {
        let p = &self.postproc;
        PostprocConfig {
            window_valence: p.window_valence,
            window_arousal: p.window_arousal,
            aggregator: p.aggregator.to_string(),
            smoothing: p.smoothing.then_some(SmoothingConfig {
                min_frames: p.min_frames,
                alpha: p.alpha,
            }),
            ranges: self.data,
        }
    }
}
