//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys, repeated keys and
//! unparsable values are errors that carry the file name and line number.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use amg_core::criteria::{EntropyMode, TokenCriterion, TokenReduction};
use amg_core::{ModelSpec, PruneConfig, SyntheticSpec, TrainConfig};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criterion {
    Entropy,
    Taylor,
}

impl FromStr for Criterion {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "entropy" => Ok(Criterion::Entropy),
            "taylor" => Ok(Criterion::Taylor),
            _ => Err(format!("expected `entropy` or `taylor`, got `{s}`")),
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Entropy => "entropy",
            Criterion::Taylor => "taylor",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode(pub EntropyMode);

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "averaged_map" => Ok(Mode(EntropyMode::AveragedMap)),
            "sample_mean" => Ok(Mode(EntropyMode::SampleMean)),
            _ => Err(format!("expected `averaged_map` or `sample_mean`, got `{s}`")),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.0 {
            EntropyMode::AveragedMap => "averaged_map",
            EntropyMode::SampleMean => "sample_mean",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Reduction(pub TokenReduction);

impl FromStr for Reduction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "key_column" => Ok(Reduction(TokenReduction::KeyColumn)),
            "query_row" => Ok(Reduction(TokenReduction::QueryRow)),
            _ => Err(format!("expected `key_column` or `query_row`, got `{s}`")),
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.0 {
            TokenReduction::KeyColumn => "key_column",
            TokenReduction::QueryRow => "query_row",
        })
    }
}

macro_rules! config {
    ($($key:ident : $ty:ty = $default:expr,)*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $(pub $key: $ty,)*
        }

        impl Default for Config {
            fn default() -> Self {
                Config { $($key: $default,)* }
            }
        }

        impl Config {
            fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $(stringify!($key) => {
                        self.$key = value
                            .parse::<$ty>()
                            .map_err(|e| format!("bad value `{value}` for `{key}`: {e}"))?;
                    })*
                    _ => return Err(format!("unknown key `{key}`")),
                }
                Ok(())
            }

            /// Every key in declaration order, formatted as it would be parsed.
            pub fn snapshot(&self) -> Vec<(String, String)> {
                vec![$((stringify!($key).to_string(), self.$key.to_string()),)*]
            }
        }
    };
}

config! {
    // model
    image_size: usize = 16,
    patch_size: usize = 4,
    channels: usize = 3,
    embed_dim: usize = 32,
    layers: usize = 4,
    heads: usize = 4,
    head_dim: usize = 8,
    mlp_ratio: f64 = 4.0,
    num_classes: usize = 4,
    // synthetic data
    object_size: usize = SyntheticSpec::default().object_size,
    placement_stride: usize = SyntheticSpec::default().placement_stride,
    template_size: usize = SyntheticSpec::default().template_size,
    amplitude: f64 = SyntheticSpec::default().amplitude,
    sign_flip: bool = SyntheticSpec::default().sign_flip,
    noise: f64 = SyntheticSpec::default().noise,
    train_size: usize = SyntheticSpec::default().train_size,
    val_size: usize = SyntheticSpec::default().val_size,
    data_seed: u64 = SyntheticSpec::default().seed,
    // training
    seed: u64 = TrainConfig::default().seed,
    epochs: usize = TrainConfig::default().epochs,
    batch_size: usize = TrainConfig::default().batch_size,
    learning_rate: f64 = TrainConfig::default().learning_rate,
    weight_decay: f64 = TrainConfig::default().weight_decay,
    alpha: f64 = TrainConfig::default().alpha,
    finetune_epochs: usize = 30,
    // pruning
    head_rate: f64 = 0.0,
    token_rate: f64 = 0.0,
    lambda: f64 = 0.0,
    iterations: usize = 4,
    interleave_epochs: usize = 0,
    criterion: Criterion = Criterion::Entropy,
    entropy_mode: Mode = Mode(EntropyMode::AveragedMap),
    token_reduction: Reduction = Reduction(TokenReduction::KeyColumn),
    calibration_size: usize = 128,
    calibration_batch: usize = 32,
    // attention export
    export_samples: usize = 16,
}

impl Config {
    pub fn parse(text: &str, origin: &str) -> Result<Config, ConfigError> {
        let mut config = Config::default();
        let mut seen = std::collections::BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ConfigError(format!("{origin}:{line_no}: {msg}"));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(first) = seen.insert(key.to_string(), line_no) {
                return Err(err(format!("`{key}` already set on line {first}")));
            }
            config.set(key, value).map_err(err)?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        Config::parse(&text, &path.display().to_string())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec::uniform(
            self.image_size,
            self.patch_size,
            self.channels,
            self.embed_dim,
            self.layers,
            self.heads,
            self.head_dim,
            self.mlp_ratio,
            self.num_classes,
        )
    }

    /// Synthetic data matching `model`'s input geometry.
    pub fn data_spec(&self, model: &ModelSpec) -> SyntheticSpec {
        SyntheticSpec {
            image_size: model.image_size,
            channels: model.channels,
            num_classes: model.num_classes,
            object_size: self.object_size,
            placement_stride: self.placement_stride,
            amplitude: self.amplitude,
            template_size: self.template_size,
            sign_flip: self.sign_flip,
            noise: self.noise,
            train_size: self.train_size,
            val_size: self.val_size,
            seed: self.data_seed,
        }
    }

    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            alpha: self.alpha,
            seed: self.seed,
        }
    }

    pub fn prune_config(&self) -> PruneConfig {
        PruneConfig {
            head_rate: self.head_rate,
            token_rate: self.token_rate,
            lambda: self.lambda,
            head_iterations: self.iterations,
            entropy_mode: self.entropy_mode.0,
            token_criterion: match self.criterion {
                Criterion::Entropy => TokenCriterion::GradientAttention,
                Criterion::Taylor => TokenCriterion::Taylor,
            },
            token_reduction: self.token_reduction.0,
            calibration_batch: self.calibration_batch,
            ..PruneConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_whitespace() {
        let c = Config::parse("# toy\nlayers = 2  # fewer\n\n  lambda=0.1\ncriterion = taylor\n", "t").unwrap();
        assert_eq!(c.layers, 2);
        assert_eq!(c.lambda, 0.1);
        assert_eq!(c.criterion, Criterion::Taylor);
        assert_eq!(c.heads, 4);
    }

    #[test]
    fn errors_name_the_line() {
        let e = Config::parse("layers = 2\n\nheads = four\n", "run.cfg").unwrap_err();
        assert!(e.0.starts_with("run.cfg:3:"), "{e}");
        let e = Config::parse("bogus = 1\n", "run.cfg").unwrap_err();
        assert!(e.0.contains("run.cfg:1:") && e.0.contains("bogus"), "{e}");
        let e = Config::parse("seed = 1\nseed = 2\n", "c").unwrap_err();
        assert!(e.0.contains("c:2:") && e.0.contains("line 1"), "{e}");
        assert!(Config::parse("just words\n", "c").is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = Config::default();
        c.sign_flip = true;
        c.criterion = Criterion::Taylor;
        c.entropy_mode = Mode(EntropyMode::SampleMean);
        let text: String = c.snapshot().iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        assert_eq!(Config::parse(&text, "s").unwrap(), c);
    }
}
