//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use whyprompt_core::encoder::{load_encoder_checkpoint, EncoderConfig, TinyClip};
use whyprompt_core::trainer::TrainConfig;

pub const KEYS: &[&str] = &[
    "backend",
    "prompt.mode",
    "prompt.length",
    "train.lr",
    "train.epochs",
    "train.temperature",
    "train.batch_size",
    "train.optimizer",
    "seed",
];

/// Which frozen encoder to load: a built-in preset with its weight seed, or an
/// encoder checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Preset { name: String, seed: u64 },
    Checkpoint(PathBuf),
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Preset {
            name: "tiny".into(),
            seed: 0,
        }
    }
}

impl std::str::FromStr for BackendSpec {
    type Err = anyhow::Error;

    /// `tiny`, `compact`, `tiny:SEED`, `compact:SEED`, or a `.wenc` path.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.ends_with(".wenc") {
            return Ok(BackendSpec::Checkpoint(PathBuf::from(s)));
        }
        let (name, seed) = match s.split_once(':') {
            Some((n, seed)) => (n, seed.parse().with_context(|| format!("bad backend seed in {s:?}"))?),
            None => (s, 0),
        };
        EncoderConfig::preset(name, seed)?;
        Ok(BackendSpec::Preset { name: name.into(), seed })
    }
}

impl BackendSpec {
    pub fn load(&self) -> Result<TinyClip> {
        Ok(match self {
            BackendSpec::Preset { name, seed } => TinyClip::new(EncoderConfig::preset(name, *seed)?)?,
            BackendSpec::Checkpoint(path) => load_encoder_checkpoint(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backend: BackendSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backend: BackendSpec::default(),
            train: TrainConfig::small(),
        }
    }
}

/// `imagenet+` or `small`.
pub fn preset(name: &str) -> Result<TrainConfig> {
    match name {
        "imagenet+" | "imagenet-plus" => Ok(TrainConfig::imagenet_plus()),
        "small" => Ok(TrainConfig::small()),
        other => bail!("unknown preset {other:?}, expected imagenet+ or small"),
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| anyhow!("{key}: cannot parse {value:?}: {e}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "backend" => self.backend = value.parse()?,
            "prompt.mode" => t.prompt_mode = parse_value(key, value)?,
            "prompt.length" => t.prompt_length = parse_value(key, value)?,
            "train.lr" => t.learning_rate = parse_value(key, value)?,
            "train.epochs" => t.epochs = parse_value(key, value)?,
            "train.temperature" => t.temperature = parse_value(key, value)?,
            "train.batch_size" => t.batch_size = parse_value(key, value)?,
            "train.optimizer" => t.optimizer = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            other => bail!("unknown config key {other:?} (known: {})", KEYS.join(", ")),
        }
        Ok(())
    }

    /// Applies `key = value` lines. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected key = value", n + 1))?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Preset, then config file, then `key=value` overrides.
    pub fn resolve(preset_name: Option<&str>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut config = RunConfig::default();
        if let Some(name) = preset_name {
            config.train = preset(name)?;
        }
        if let Some(path) = file {
            config.apply_file(path)?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("override {o:?} is not key=value"))?;
            config.set(k.trim(), v.trim())?;
        }
        config.train.validate()?;
        Ok(config)
    }
}
