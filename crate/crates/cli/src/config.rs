//! Run configuration: defaults, flat `key = value` files and overrides.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use serpent_core::attention::ChannelAttentionKind;
use serpent_core::encoder::ConvKind;
use serpent_core::model::ModelConfig;
use serpent_core::optim::AdamConfig;
use serpent_core::train::TrainConfig;

use crate::CliError;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "SERPENT_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Tiny,
    Desk,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Tiny => "tiny",
            Preset::Desk => "desk",
        }
    }

    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Desk => ModelConfig::desk(),
        }
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "desk" => Ok(Preset::Desk),
            other => Err(format!("unknown preset `{other}` (expected tiny|desk)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    /// Seed and ablation switches here are authoritative over the copies
    /// inside `model`; [`RunConfig::model_config`] reconciles them.
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        RunConfig {
            preset: Preset::Tiny,
            model: ModelConfig::tiny(),
            epochs: 30,
            batch: 8,
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            seed: 0,
            augment: false,
            manifest: PathBuf::from("data/manifest.txt"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Usage(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[usize; N], CliError> {
    let items = value
        .split(',')
        .map(|v| parse::<usize>(key, v.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    items
        .try_into()
        .map_err(|v: Vec<usize>| CliError::Usage(format!("`{key}` needs {N} comma-separated values, got {}", v.len())))
}

fn join(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(CliError::Usage(format!("`{key}`: expected true|false, got `{other}`"))),
    }
}

/// Parses flat `key = value` lines. Blank lines and `#` comments are
/// skipped; duplicate keys are errors.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if seen.insert(k.clone(), i + 1).is_some() {
            return Err(CliError::Usage(format!("config line {}: duplicate key `{k}`", i + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

impl RunConfig {
    /// Applies `key = value` pairs. A `preset` entry is applied first so
    /// that explicit width keys refine it regardless of line order.
    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<(), CliError> {
        if let Some((_, v)) = pairs.iter().find(|(k, _)| k == "preset") {
            self.set_preset(parse::<Preset>("preset", v)?);
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Resets the model to a preset, keeping the ablation switches.
    pub fn set_preset(&mut self, preset: Preset) {
        let (conv, attention) = (self.model.conv, self.model.attention);
        self.preset = preset;
        self.model = ModelConfig { conv, attention, ..preset.model() };
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let m = &mut self.model;
        match key {
            "preset" => self.set_preset(parse(key, value)?),
            "conv" => m.conv = value.parse::<ConvKind>().map_err(|e| CliError::Usage(e.to_string()))?,
            "channel_attention" => {
                m.attention = value.parse::<ChannelAttentionKind>().map_err(|e| CliError::Usage(e.to_string()))?
            }
            "dsc_widths" => m.dsc_widths = parse_list(key, value)?,
            "mit_widths" => m.mit.widths = parse_list(key, value)?,
            "mit_depths" => m.mit.depths = parse_list(key, value)?,
            "mit_heads" => m.mit.heads = parse_list(key, value)?,
            "mit_reductions" => m.mit.reductions = parse_list(key, value)?,
            "dec_widths" => m.dec_widths = parse_list(key, value)?,
            "ratio" => m.ratio = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "manifest" => self.manifest = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(CliError::Usage(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { seed: self.seed, ..self.model }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            adam: AdamConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamConfig::default()
            },
            seed: self.seed,
            augment: self.augment,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(CliError::Usage("epochs and batch must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(CliError::Usage("lr must be positive and weight_decay non-negative".into()));
        }
        self.model_config().validate().map_err(|e| CliError::Usage(e.to_string()))
    }

    /// Every field as `key = value`, in a form [`RunConfig::apply_pairs`]
    /// reads back to an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let lines = [
            ("preset", self.preset.as_str().to_string()),
            ("conv", m.conv.to_string()),
            ("channel_attention", m.attention.to_string()),
            ("dsc_widths", join(&m.dsc_widths)),
            ("mit_widths", join(&m.mit.widths)),
            ("mit_depths", join(&m.mit.depths)),
            ("mit_heads", join(&m.mit.heads)),
            ("mit_reductions", join(&m.mit.reductions)),
            ("dec_widths", join(&m.dec_widths)),
            ("ratio", m.ratio.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("seed", self.seed.to_string()),
            ("augment", self.augment.to_string()),
            ("manifest", self.manifest.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
