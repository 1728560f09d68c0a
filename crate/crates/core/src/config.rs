//! Architecture, training and data hyperparameters.
//!
//! Configs are loaded from a flat text file of `key = value` lines. Blank
//! lines and anything after `#` are ignored. Keys are the struct field names
//! below; tuples are comma separated (`stage_depths = 3, 4, 6, 3`). An optional
//! `preset = tiny|small|base` line selects the architecture defaults that the
//! remaining keys override, regardless of where it appears in the file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PRESET_NAMES: [&str; 3] = ["tiny", "small", "base"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` set twice")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    Value {
        line: usize,
        key: String,
        msg: String,
    },
    #[error("invalid {field}: {msg}")]
    Invalid { field: &'static str, msg: String },
    #[error("unknown preset `{name}`; valid presets: {}", PRESET_NAMES.join(", "))]
    UnknownPreset { name: String },
    #[error("unknown attention variant `{0}`; valid variants: csw_sa, sw_sa")]
    UnknownVariant(String),
}

impl ConfigError {
    /// The offending field for validation errors.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { field, .. } => Some(field),
            ConfigError::Value { key, .. }
            | ConfigError::UnknownKey { key, .. }
            | ConfigError::DuplicateKey { key, .. } => Some(key),
            _ => None,
        }
    }
}

fn invalid(field: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        msg: msg.into(),
    }
}

/// Bottleneck attention flavour: context-aware (with the patch-merge branch)
/// or plain shifted-window attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    CswSa,
    SwSa,
}

impl AttentionVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionVariant::CswSa => "csw_sa",
            AttentionVariant::SwSa => "sw_sa",
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionVariant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "csw_sa" => Ok(AttentionVariant::CswSa),
            "sw_sa" => Ok(AttentionVariant::SwSa),
            _ => Err(ConfigError::UnknownVariant(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Output classes including background.
    pub num_classes: usize,
    /// Residual units per encoder stage.
    pub stage_depths: [usize; 4],
    /// Filters per encoder stage.
    pub stage_channels: [usize; 4],
    /// Bottleneck token width.
    pub embed_dim: usize,
    pub window_size: usize,
    pub shift_size: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub attention_variant: AttentionVariant,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.in_channels == 0 {
            return Err(invalid("in_channels", "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(invalid(
                "num_classes",
                format!("need at least 2 classes, got {}", self.num_classes),
            ));
        }
        if self.stage_channels.contains(&0) {
            return Err(invalid(
                "stage_channels",
                "every stage needs at least one filter",
            ));
        }
        if self.stage_channels.windows(2).any(|w| w[0] > w[1]) {
            return Err(invalid(
                "stage_channels",
                format!("must be non-decreasing, got {:?}", self.stage_channels),
            ));
        }
        if self.embed_dim == 0 {
            return Err(invalid("embed_dim", "must be positive"));
        }
        if self.num_heads == 0 {
            return Err(invalid("num_heads", "must be positive"));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(invalid(
                "num_heads",
                format!(
                    "embed_dim {} is not divisible by {} heads",
                    self.embed_dim, self.num_heads
                ),
            ));
        }
        if self.window_size == 0 {
            return Err(invalid("window_size", "must be positive"));
        }
        if self.shift_size == 0 || self.shift_size >= self.window_size {
            return Err(invalid(
                "shift_size",
                format!(
                    "need 0 < shift_size < window_size ({}), got {}",
                    self.window_size, self.shift_size
                ),
            ));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(invalid(
                "mlp_ratio",
                format!("must give a positive hidden width, got {}", self.mlp_ratio),
            ));
        }
        Ok(())
    }

    /// Hidden width of the bottleneck MLPs.
    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn with_attention(mut self, variant: AttentionVariant) -> Self {
        self.attention_variant = variant;
        self
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        preset("base").expect("base preset exists")
    }
}

/// Architecture of a named model variant.
pub fn preset(name: &str) -> Result<ModelConfig, ConfigError> {
    let (depths, channels) = match name.trim().to_ascii_lowercase().as_str() {
        "tiny" => ([2, 2, 2, 2], [32, 64, 128, 256]),
        "small" => ([3, 4, 6, 3], [32, 64, 128, 256]),
        "base" => ([3, 4, 6, 3], [64, 128, 256, 512]),
        _ => {
            return Err(ConfigError::UnknownPreset {
                name: name.to_string(),
            })
        }
    };
    Ok(ModelConfig {
        in_channels: 1,
        num_classes: 15,
        stage_depths: depths,
        stage_channels: channels,
        embed_dim: 48,
        window_size: 4,
        shift_size: 2,
        num_heads: 3,
        mlp_ratio: 4.0,
        attention_variant: AttentionVariant::CswSa,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub patch_size: [usize; 3],
    pub lambda_dice: f64,
    pub lambda_ce: f64,
    pub rng_seed: u64,
    /// Iterations between checkpoints; a final checkpoint is always written.
    pub checkpoint_every: usize,
    /// Iterations between validation passes; 0 disables validation.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            iterations: 3000,
            batch_size: 4,
            patch_size: [128, 128, 128],
            lambda_dice: 1.0,
            lambda_ce: 1.0,
            rng_seed: 0,
            checkpoint_every: 500,
            validate_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("learning_rate", "must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay", "must be non-negative"));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        if self.patch_size.iter().any(|&p| p == 0 || p % 16 != 0) {
            return Err(invalid(
                "patch_size",
                format!(
                    "every axis must be a positive multiple of 16, got {:?}",
                    self.patch_size
                ),
            ));
        }
        for (field, v) in [
            ("lambda_dice", self.lambda_dice),
            ("lambda_ce", self.lambda_ce),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(field, format!("must be non-negative, got {v}")));
            }
        }
        if self.lambda_dice == 0.0 && self.lambda_ce == 0.0 {
            return Err(invalid(
                "lambda_dice",
                "lambda_dice and lambda_ce are both zero",
            ));
        }
        if self.checkpoint_every == 0 {
            return Err(invalid("checkpoint_every", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Isotropic resampling target in mm.
    pub target_spacing: f64,
    /// Intensity window (lo, hi) in HU mapped to [0, 1].
    pub intensity_window: (f64, f64),
    /// Relative weights of foreground- and background-centred crops.
    pub pos_neg_ratio: (f64, f64),
    pub samples_per_volume: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            target_spacing: 1.5,
            intensity_window: (-175.0, 250.0),
            pos_neg_ratio: (1.0, 1.0),
            samples_per_volume: 4,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.target_spacing.is_finite() && self.target_spacing > 0.0) {
            return Err(invalid("target_spacing", "must be positive"));
        }
        let (lo, hi) = self.intensity_window;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(invalid(
                "intensity_window",
                format!("need lo < hi, got ({lo}, {hi})"),
            ));
        }
        let (p, n) = self.pos_neg_ratio;
        if !(p.is_finite() && n.is_finite() && p >= 0.0 && n >= 0.0) {
            return Err(invalid("pos_neg_ratio", "weights must be non-negative"));
        }
        if p + n == 0.0 {
            return Err(invalid("pos_neg_ratio", "weights are both zero"));
        }
        if self.samples_per_volume == 0 {
            return Err(invalid("samples_per_volume", "must be positive"));
        }
        Ok(())
    }
}

/// Everything a run needs, as loaded from one config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    /// Parses the key-value format, starting from defaults. Validates the result.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: Vec<(usize, &str, &str)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("expected `key = value`, got `{body}`"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    msg: "missing key before `=`".into(),
                });
            }
            if entries.iter().any(|(_, k, _)| *k == key) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
            entries.push((line, key, value));
        }

        let mut cfg = RunConfig::default();
        if let Some(&(line, _, name)) = entries.iter().find(|(_, k, _)| *k == "preset") {
            cfg.model = preset(name).map_err(|e| ConfigError::Value {
                line,
                key: "preset".into(),
                msg: e.to_string(),
            })?;
        }
        for (line, key, value) in entries {
            if key != "preset" {
                cfg.set(line, key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |msg: String| ConfigError::Value {
            line,
            key: key.to_string(),
            msg,
        };
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "in_channels" => m.in_channels = scalar(value).map_err(bad)?,
            "num_classes" => m.num_classes = scalar(value).map_err(bad)?,
            "stage_depths" => m.stage_depths = tuple(value).map_err(bad)?,
            "stage_channels" => m.stage_channels = tuple(value).map_err(bad)?,
            "embed_dim" => m.embed_dim = scalar(value).map_err(bad)?,
            "window_size" => m.window_size = scalar(value).map_err(bad)?,
            "shift_size" => m.shift_size = scalar(value).map_err(bad)?,
            "num_heads" => m.num_heads = scalar(value).map_err(bad)?,
            "mlp_ratio" => m.mlp_ratio = scalar(value).map_err(bad)?,
            "attention_variant" => {
                m.attention_variant = value.parse().map_err(|e: ConfigError| bad(e.to_string()))?
            }
            "learning_rate" => t.learning_rate = scalar(value).map_err(bad)?,
            "weight_decay" => t.weight_decay = scalar(value).map_err(bad)?,
            "iterations" => t.iterations = scalar(value).map_err(bad)?,
            "batch_size" => t.batch_size = scalar(value).map_err(bad)?,
            "patch_size" => t.patch_size = tuple(value).map_err(bad)?,
            "lambda_dice" => t.lambda_dice = scalar(value).map_err(bad)?,
            "lambda_ce" => t.lambda_ce = scalar(value).map_err(bad)?,
            "rng_seed" => t.rng_seed = scalar(value).map_err(bad)?,
            "checkpoint_every" => t.checkpoint_every = scalar(value).map_err(bad)?,
            "validate_every" => t.validate_every = scalar(value).map_err(bad)?,
            "target_spacing" => d.target_spacing = scalar(value).map_err(bad)?,
            "intensity_window" => {
                let [lo, hi] = tuple(value).map_err(bad)?;
                d.intensity_window = (lo, hi);
            }
            "pos_neg_ratio" => {
                let [p, n] = tuple(value).map_err(bad)?;
                d.pos_neg_ratio = (p, n);
            }
            "samples_per_volume" => d.samples_per_volume = scalar(value).map_err(bad)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Renders every field in the format accepted by [`RunConfig::parse`].
    pub fn to_config_string(&self) -> String {
        fn join<T: fmt::Display>(xs: &[T]) -> String {
            xs.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        }
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let lines = [
            "# model".to_string(),
            format!("in_channels = {}", m.in_channels),
            format!("num_classes = {}", m.num_classes),
            format!("stage_depths = {}", join(&m.stage_depths)),
            format!("stage_channels = {}", join(&m.stage_channels)),
            format!("embed_dim = {}", m.embed_dim),
            format!("window_size = {}", m.window_size),
            format!("shift_size = {}", m.shift_size),
            format!("num_heads = {}", m.num_heads),
            format!("mlp_ratio = {:?}", m.mlp_ratio),
            format!("attention_variant = {}", m.attention_variant),
            String::new(),
            "# training".to_string(),
            format!("learning_rate = {:?}", t.learning_rate),
            format!("weight_decay = {:?}", t.weight_decay),
            format!("iterations = {}", t.iterations),
            format!("batch_size = {}", t.batch_size),
            format!("patch_size = {}", join(&t.patch_size)),
            format!("lambda_dice = {:?}", t.lambda_dice),
            format!("lambda_ce = {:?}", t.lambda_ce),
            format!("rng_seed = {}", t.rng_seed),
            format!("checkpoint_every = {}", t.checkpoint_every),
            format!("validate_every = {}", t.validate_every),
            String::new(),
            "# data".to_string(),
            format!("target_spacing = {:?}", d.target_spacing),
            format!(
                "intensity_window = {:?}, {:?}",
                d.intensity_window.0, d.intensity_window.1
            ),
            format!(
                "pos_neg_ratio = {:?}, {:?}",
                d.pos_neg_ratio.0, d.pos_neg_ratio.1
            ),
            format!("samples_per_volume = {}", d.samples_per_volume),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

/// Reads and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RunConfig::parse(&text)
}

fn scalar<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| format!("`{}`: {e}", value.trim()))
}

fn tuple<T: FromStr + Copy + Default, const N: usize>(value: &str) -> Result<[T; N], String>
where
    T::Err: fmt::Display,
{
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!(
            "expected {N} comma-separated values, got {}",
            parts.len()
        ));
    }
    let mut out = [T::default(); N];
    for (slot, part) in out.iter_mut().zip(parts) {
        *slot = scalar(part)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn presets_match_variant_table() {
        let base = preset("base").unwrap();
        assert_eq!(base.stage_depths, [3, 4, 6, 3]);
        assert_eq!(base.stage_channels, [64, 128, 256, 512]);
        assert_eq!(base.embed_dim, 48);
        assert_eq!(base.attention_variant, AttentionVariant::CswSa);
        let tiny = preset("tiny").unwrap();
        assert_eq!(tiny.stage_depths, [2, 2, 2, 2]);
        assert_eq!(tiny.stage_channels, [32, 64, 128, 256]);
        assert_eq!(tiny.embed_dim, 48);
        let small = preset("small").unwrap();
        assert_eq!(small.stage_depths, [3, 4, 6, 3]);
        assert_eq!(small.stage_channels, [32, 64, 128, 256]);
        for name in PRESET_NAMES {
            assert_eq!(preset(name).unwrap(), preset(name).unwrap());
            preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn unknown_preset_lists_valid_names() {
        let msg = preset("mega").unwrap_err().to_string();
        for name in PRESET_NAMES {
            assert!(msg.contains(name), "{msg}");
        }
    }

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.model, preset("base").unwrap());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.data, DataConfig::default());
        let commented = RunConfig::parse("# nothing here\n\n   # still nothing\n").unwrap();
        assert_eq!(commented, cfg);
    }

    #[test]
    fn window_and_shift_accepted_when_ordered() {
        let cfg = RunConfig::parse("window_size = 4\nshift_size = 2\n").unwrap();
        assert_eq!((cfg.model.window_size, cfg.model.shift_size), (4, 2));
    }

    #[test]
    fn shift_equal_to_window_rejected() {
        let err = RunConfig::parse("shift_size = 4\nwindow_size = 4\n").unwrap_err();
        assert_eq!(err.field(), Some("shift_size"));
    }

    #[test]
    fn preset_line_applies_before_overrides() {
        let cfg = RunConfig::parse("embed_dim = 24\npreset = tiny # small model\n").unwrap();
        assert_eq!(cfg.model.stage_depths, [2, 2, 2, 2]);
        assert_eq!(cfg.model.embed_dim, 24);
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        match RunConfig::parse("iterations = 10\n\nthis is not valid\n").unwrap_err() {
            ConfigError::Syntax { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        match RunConfig::parse("iterations = ten\n").unwrap_err() {
            ConfigError::Value { line, key, .. } => {
                assert_eq!((line, key.as_str()), (1, "iterations"))
            }
            e => panic!("unexpected {e}"),
        }
        match RunConfig::parse("batch_size = 2\nfoo = 1\n").unwrap_err() {
            ConfigError::UnknownKey { line, key } => assert_eq!((line, key.as_str()), (2, "foo")),
            e => panic!("unexpected {e}"),
        }
        match RunConfig::parse("stage_depths = 1, 2\n").unwrap_err() {
            ConfigError::Value { key, .. } => assert_eq!(key, "stage_depths"),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            RunConfig::parse("seed = 1\nseed = 2\n").unwrap_err(),
            ConfigError::DuplicateKey { line: 2, .. }
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_config("/nonexistent/run.cfg").unwrap_err();
        assert!(matches!(err, ConfigError::Io { .. }));
    }

    fn rejected(text: &str, field: &str) {
        let err = RunConfig::parse(text).expect_err(text);
        assert_eq!(err.field(), Some(field), "{text}: {err}");
    }

    #[test]
    fn every_invariant_is_enforced() {
        rejected("embed_dim = 48\nnum_heads = 5", "num_heads");
        rejected("shift_size = 0", "shift_size");
        rejected("window_size = 2\nshift_size = 3", "shift_size");
        rejected("stage_channels = 0, 64, 128, 256", "stage_channels");
        rejected("stage_channels = 64, 32, 128, 256", "stage_channels");
        rejected("num_classes = 1", "num_classes");
        rejected("in_channels = 0", "in_channels");
        rejected("embed_dim = 0", "embed_dim");
        rejected("mlp_ratio = 0", "mlp_ratio");
        rejected("learning_rate = 0", "learning_rate");
        rejected("weight_decay = -1e-5", "weight_decay");
        rejected("iterations = 0", "iterations");
        rejected("batch_size = 0", "batch_size");
        rejected("patch_size = 128, 128, 100", "patch_size");
        rejected("lambda_ce = -1", "lambda_ce");
        rejected("lambda_dice = 0\nlambda_ce = 0", "lambda_dice");
        rejected("target_spacing = 0", "target_spacing");
        rejected("intensity_window = 250, -175", "intensity_window");
        rejected("pos_neg_ratio = -1, 1", "pos_neg_ratio");
        rejected("pos_neg_ratio = 0, 0", "pos_neg_ratio");
        rejected("samples_per_volume = 0", "samples_per_volume");
        rejected("checkpoint_every = 0", "checkpoint_every");
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        let model = (
            1usize..4,
            2usize..20,
            prop::array::uniform4(0usize..8),
            prop::array::uniform4(1usize..64),
            1usize..8,
            1usize..5,
            2usize..9,
            0.25f64..8.0,
            prop::bool::ANY,
        )
            .prop_flat_map(
                |(inc, nc, depths, mut ch, heads, mult, window, ratio, csw)| {
                    ch.sort_unstable();
                    (1..window).prop_map(move |shift| ModelConfig {
                        in_channels: inc,
                        num_classes: nc,
                        stage_depths: depths,
                        stage_channels: ch,
                        embed_dim: heads * mult * 4,
                        window_size: window,
                        shift_size: shift,
                        num_heads: heads,
                        mlp_ratio: ratio,
                        attention_variant: if csw {
                            AttentionVariant::CswSa
                        } else {
                            AttentionVariant::SwSa
                        },
                    })
                },
            );
        let train = (
            1e-7f64..1.0,
            0.0f64..0.1,
            1usize..10_000,
            1usize..16,
            prop::array::uniform3(1usize..12),
            0.0f64..3.0,
            0.01f64..3.0,
            any::<u64>(),
            1usize..1000,
            0usize..1000,
        )
            .prop_map(|(lr, wd, it, bs, p, ld, lc, seed, ck, va)| TrainConfig {
                learning_rate: lr,
                weight_decay: wd,
                iterations: it,
                batch_size: bs,
                patch_size: p.map(|v| v * 16),
                lambda_dice: ld,
                lambda_ce: lc,
                rng_seed: seed,
                checkpoint_every: ck,
                validate_every: va,
            });
        let data = (
            0.1f64..5.0,
            -2000.0f64..0.0,
            0.5f64..3000.0,
            0.0f64..5.0,
            0.01f64..5.0,
            1usize..32,
        )
            .prop_map(|(sp, lo, width, p, n, k)| DataConfig {
                target_spacing: sp,
                intensity_window: (lo, lo + width),
                pos_neg_ratio: (p, n),
                samples_per_volume: k,
            });
        (model, train, data).prop_map(|(model, train, data)| RunConfig { model, train, data })
    }

    proptest! {
        #[test]
        fn serialized_configs_round_trip(cfg in arb_config()) {
            cfg.validate().unwrap();
            let text = cfg.to_config_string();
            let back = RunConfig::parse(&text).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
