//! Run configuration: `key = value` files, flag overrides, defaults.

use std::fmt;
use std::fs;
use std::path::Path;

use densepipe_core::checkpoint::FreezePolicy;
use densepipe_core::graph::{DenseNetConfig, HeadConfig, ModelKind, StemConfig};
use densepipe_core::optim::OptimizerKind;
use densepipe_core::train::{ClassWeighting, TrainConfig};

/// Configuration failures; each kind is reported distinctly and maps to
/// exit code 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    UnknownKey(String),
    BadValue { key: String, value: String },
    MissingFile(String),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::UnknownKey(k) => write!(f, "unknown config key '{k}'"),
            ConfigError::BadValue { key, value } => {
                write!(f, "cannot parse value '{value}' for key '{key}'")
            }
            ConfigError::MissingFile(p) => write!(f, "config file not found: {p}"),
            ConfigError::Invalid(m) => write!(f, "invalid config: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezeOpt {
    None,
    Backbone,
}

impl FreezeOpt {
    pub fn policy(&self) -> FreezePolicy {
        match self {
            FreezeOpt::None => FreezePolicy::None,
            FreezeOpt::Backbone => FreezePolicy::Backbone,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    // training hyperparameters
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub dropout_rate: f64,
    pub early_stop_patience: usize,
    pub class_weighting: ClassWeighting,
    /// Unset falls back to DENSEPIPE_SEED, then 0.
    pub seed: Option<u64>,
    // model shape
    pub kind: ModelKind,
    pub k0: usize,
    pub block_sizes: Vec<usize>,
    pub growth_rate: usize,
    pub bottleneck_multiplier: usize,
    pub compression: f64,
    pub head_widths: Vec<usize>,
    pub resolution: usize,
    pub channels: usize,
    // paths
    pub manifest: Option<String>,
    pub checkpoint: Option<String>,
    pub out_dir: Option<String>,
    pub image: Option<String>,
    // command-specific knobs
    pub n: usize,
    pub balance: f64,
    pub k: usize,
    pub warmup: usize,
    pub runs: usize,
    pub alpha: f64,
    pub threads: usize,
    pub class: Option<usize>,
    pub target_layer: Option<String>,
    pub freeze: FreezeOpt,
}

impl Default for CliConfig {
    /// Training defaults follow the published recipe: lr 1e-4, batch 16,
    /// 50 epochs, Adam, dropout 0.5. The model default is the small dense
    /// network suited to 32x32 synthetic data.
    fn default() -> Self {
        CliConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 50,
            optimizer: OptimizerKind::Adam,
            dropout_rate: 0.5,
            early_stop_patience: 5,
            class_weighting: ClassWeighting::InverseFrequency,
            seed: None,
            kind: ModelKind::Dense,
            k0: 16,
            block_sizes: vec![3, 3],
            growth_rate: 12,
            bottleneck_multiplier: 4,
            compression: 0.5,
            head_widths: vec![64],
            resolution: 32,
            channels: 1,
            manifest: None,
            checkpoint: None,
            out_dir: None,
            image: None,
            n: 1000,
            balance: 0.5,
            k: 5,
            warmup: 2,
            runs: 5,
            alpha: 0.4,
            threads: 1,
            class: None,
            target_layer: None,
            freeze: FreezeOpt::None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    value
        .split(',')
        .map(|p| parse::<usize>(key, p.trim()))
        .collect()
}

fn join_list(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl CliConfig {
    /// Apply one `key = value` assignment; unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "rmsprop" => OptimizerKind::RmsProp,
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(bad()),
                }
            }
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            "early_stop_patience" => self.early_stop_patience = parse(key, value)?,
            "class_weighting" => {
                self.class_weighting = ClassWeighting::parse(value).map_err(|_| bad())?
            }
            "seed" => self.seed = Some(parse(key, value)?),
            "kind" => self.kind = ModelKind::parse(value).map_err(|_| bad())?,
            "k0" => self.k0 = parse(key, value)?,
            "block_sizes" => self.block_sizes = parse_list(key, value)?,
            "growth_rate" => self.growth_rate = parse(key, value)?,
            "bottleneck_multiplier" => self.bottleneck_multiplier = parse(key, value)?,
            "compression" => self.compression = parse(key, value)?,
            "head" => {
                self.head_widths = HeadConfig::preset(value).map_err(|_| bad())?.dense_widths
            }
            "head_widths" => self.head_widths = parse_list(key, value)?,
            "resolution" => self.resolution = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "manifest" => self.manifest = Some(value.to_string()),
            "checkpoint" => self.checkpoint = Some(value.to_string()),
            "out_dir" | "out" => self.out_dir = Some(value.to_string()),
            "image" => self.image = Some(value.to_string()),
            "n" => self.n = parse(key, value)?,
            "balance" => self.balance = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "runs" => self.runs = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "threads" => {
                self.threads = parse(key, value)?;
                if self.threads != 1 {
                    return Err(ConfigError::Invalid(
                        "only threads = 1 is supported".into(),
                    ));
                }
            }
            "class" => self.class = Some(parse(key, value)?),
            "target_layer" => self.target_layer = Some(value.to_string()),
            "freeze" => {
                self.freeze = match value {
                    "none" => FreezeOpt::None,
                    "backbone" => FreezeOpt::Backbone,
                    _ => return Err(bad()),
                }
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parse a `key = value` file (UTF-8, `#` comments) over the defaults.
    pub fn from_file(path: &Path) -> Result<CliConfig, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|_| ConfigError::MissingFile(path.display().to_string()))?;
        let mut cfg = CliConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Invalid(format!("bad config line '{line}'")))?;
            self.apply(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Serialize so that re-parsing yields an identical config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("learning_rate", self.learning_rate.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv(
            "optimizer",
            match self.optimizer {
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::RmsProp => "rmsprop",
                OptimizerKind::Adam => "adam",
            }
            .to_string(),
        );
        kv("dropout_rate", self.dropout_rate.to_string());
        kv("early_stop_patience", self.early_stop_patience.to_string());
        kv("class_weighting", self.class_weighting.as_str().to_string());
        if let Some(seed) = self.seed {
            kv("seed", seed.to_string());
        }
        kv("kind", self.kind.as_str().to_string());
        kv("k0", self.k0.to_string());
        kv("block_sizes", join_list(&self.block_sizes));
        kv("growth_rate", self.growth_rate.to_string());
        kv("bottleneck_multiplier", self.bottleneck_multiplier.to_string());
        kv("compression", self.compression.to_string());
        kv("head_widths", join_list(&self.head_widths));
        kv("resolution", self.resolution.to_string());
        kv("channels", self.channels.to_string());
        for (k, v) in [
            ("manifest", &self.manifest),
            ("checkpoint", &self.checkpoint),
            ("out_dir", &self.out_dir),
            ("image", &self.image),
            ("target_layer", &self.target_layer),
        ] {
            if let Some(v) = v {
                kv(k, v.clone());
            }
        }
        kv("n", self.n.to_string());
        kv("balance", self.balance.to_string());
        kv("k", self.k.to_string());
        kv("warmup", self.warmup.to_string());
        kv("runs", self.runs.to_string());
        kv("alpha", self.alpha.to_string());
        kv("threads", self.threads.to_string());
        if let Some(c) = self.class {
            kv("class", c.to_string());
        }
        kv(
            "freeze",
            match self.freeze {
                FreezeOpt::None => "none",
                FreezeOpt::Backbone => "backbone",
            }
            .to_string(),
        );
        s
    }

    /// Final seed: explicit setting, then DENSEPIPE_SEED, then 0.
    pub fn resolve_seed(&self) -> u64 {
        self.seed.unwrap_or_else(|| {
            std::env::var("DENSEPIPE_SEED")
                .ok()
                .and_then(|s| s.parse().ok())
                .unwrap_or(0)
        })
    }

    /// Stem choice: the large 7x7 + pool stem for high resolutions, the
    /// 3x3 stem otherwise.
    pub fn stem(&self) -> StemConfig {
        if self.resolution >= 128 {
            StemConfig::large()
        } else {
            StemConfig::small()
        }
    }

    pub fn model_config(&self) -> DenseNetConfig {
        DenseNetConfig {
            stem: self.stem(),
            k0: self.k0,
            block_sizes: self.block_sizes.clone(),
            growth_rate: self.growth_rate,
            bottleneck_multiplier: self.bottleneck_multiplier,
            compression: self.compression,
            head: HeadConfig {
                dense_widths: self.head_widths.clone(),
                dropout_rate: self.dropout_rate,
            },
            num_classes: 2,
            input_resolution: self.resolution,
            in_channels: self.channels,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            optimizer: self.optimizer,
            dropout_rate: self.dropout_rate,
            seed: self.resolve_seed(),
            early_stop_patience: self.early_stop_patience,
            class_weighting: self.class_weighting,
        }
    }
}

/// Build a config from an optional `--config FILE` plus flag overrides
/// (flags win).
pub fn load_config(
    config_path: Option<&str>,
    overrides: &[(String, String)],
) -> Result<CliConfig, ConfigError> {
    let mut cfg = match config_path {
        Some(p) => CliConfig::from_file(Path::new(p))?,
        None => CliConfig::default(),
    };
    for (k, v) in overrides {
        cfg.apply(k, v)?;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_recipe() {
        let c = CliConfig::default();
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.epochs, 50);
        assert_eq!(c.optimizer, OptimizerKind::Adam);
        assert_eq!(c.dropout_rate, 0.5);
    }

    #[test]
    fn flag_overrides_file_value() {
        let mut c = CliConfig::default();
        c.apply_text("epochs = 50\n# comment\nlearning_rate = 0.001").unwrap();
        assert_eq!(c.epochs, 50);
        c.apply("epochs", "10").unwrap();
        assert_eq!(c.epochs, 10);
        assert_eq!(c.learning_rate, 0.001);
    }

    #[test]
    fn distinct_error_kinds() {
        let mut c = CliConfig::default();
        assert_eq!(
            c.apply("no_such_key", "1"),
            Err(ConfigError::UnknownKey("no_such_key".into()))
        );
        assert!(matches!(
            c.apply("learning_rate", "abc"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            CliConfig::from_file(Path::new("/nonexistent/config.txt")),
            Err(ConfigError::MissingFile(_))
        ));
    }

    #[test]
    fn round_trip_identity() {
        let mut c = CliConfig::default();
        c.apply("seed", "7").unwrap();
        c.apply("head", "B").unwrap();
        c.apply("manifest", "data/m.csv").unwrap();
        c.apply("optimizer", "rmsprop").unwrap();
        c.apply("freeze", "backbone").unwrap();
        let mut back = CliConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn head_presets_match_published_columns() {
        let widths = |p: &str| {
            let mut c = CliConfig::default();
            c.apply("head", p).unwrap();
            c.head_widths
        };
        assert_eq!(widths("A"), vec![1024]);
        assert_eq!(widths("B"), vec![1024, 512]);
        assert_eq!(widths("C"), vec![1024, 512, 256]);
        assert_eq!(widths("D"), vec![1024, 512, 256, 128]);
    }

    #[test]
    fn stem_follows_resolution() {
        let mut c = CliConfig::default();
        c.apply("resolution", "224").unwrap();
        assert_eq!(c.stem(), StemConfig::large());
        c.apply("resolution", "96").unwrap();
        assert_eq!(c.stem(), StemConfig::small());
    }

    #[test]
    fn seed_fallback_order() {
        let mut c = CliConfig::default();
        c.apply("seed", "9").unwrap();
        assert_eq!(c.resolve_seed(), 9);
    }
}
