//! Flat key=value configuration with `[section]` headers. Parsing is total:
//! every accepted file maps to exactly one validated config, and unknown keys
//! are rejected with their line number.

use std::fmt;
use std::path::Path;

use crate::augment::AugmentConfig;
use crate::checkpoint::Precision;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::NetworkDims;

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    // [train]
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    pub lambda_div: f64,
    pub lambda_dec: f64,
    pub seed: u64,
    pub precision: Precision,
    pub use_predictor: bool,
    pub checkpoint_every: usize,
    pub log_seconds: bool,
    pub network: NetworkSize,
    pub crop_seconds: f64,
    // [augment]
    pub augment_enabled: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub mix_min: f64,
    pub mix_max: f64,
    pub fade_min: f64,
    pub fade_max: f64,
    // [probe]
    pub probe_lr: f64,
    pub probe_iters: usize,
    pub probe_source: ProbeSource,
    pub probe_use_projection: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetworkSize {
    Default,
    Small,
    Tiny,
}

impl NetworkSize {
    pub fn dims(self) -> NetworkDims {
        match self {
            NetworkSize::Default => NetworkDims::default(),
            NetworkSize::Small => NetworkDims::small(),
            NetworkSize::Tiny => NetworkDims::tiny(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeSource {
    Online,
    Target,
}

impl fmt::Display for ProbeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbeSource::Online => write!(f, "online"),
            ProbeSource::Target => write!(f, "target"),
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 20,
            tau: 0.995,
            lambda_div: 1.0,
            lambda_dec: 1.0,
            seed: 0,
            precision: Precision::F32,
            use_predictor: true,
            checkpoint_every: 5,
            log_seconds: true,
            network: NetworkSize::Default,
            crop_seconds: 0.95,
            augment_enabled: true,
            scale_min: 0.6,
            scale_max: 1.5,
            aspect_min: 0.75,
            aspect_max: 1.33,
            mix_min: 0.0,
            mix_max: 0.2,
            fade_min: -1.0,
            fade_max: 1.0,
            probe_lr: 0.5,
            probe_iters: 400,
            probe_source: ProbeSource::Online,
            probe_use_projection: false,
        }
    }
}

impl Config {
    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda_div, self.lambda_dec)
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            scale: (self.scale_min, self.scale_max),
            aspect: (self.aspect_min, self.aspect_max),
            mix: (self.mix_min, self.mix_max),
            fade: (self.fade_min, self.fade_max),
            ..AugmentConfig::default()
        }
    }

    /// Apply one `section.key = value` assignment. `line` is used in errors;
    /// pass 0 for command-line overrides.
    pub fn set(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
        let bad = |what: &str| Error::Config {
            line,
            msg: format!("invalid value {value:?} for {section}.{key}: expected {what}"),
        };
        macro_rules! parse {
            ($what:expr) => {
                value.trim().parse().map_err(|_| bad($what))?
            };
        }
        match (section, key) {
            ("train", "learning_rate") => self.learning_rate = parse!("a float"),
            ("train", "batch_size") => self.batch_size = parse!("a positive integer"),
            ("train", "epochs") => self.epochs = parse!("a positive integer"),
            ("train", "tau") => self.tau = parse!("a float"),
            ("train", "lambda_div") => self.lambda_div = parse!("a float"),
            ("train", "lambda_dec") => self.lambda_dec = parse!("a float"),
            ("train", "seed") => self.seed = parse!("an integer"),
            ("train", "precision") => {
                self.precision = match value.trim() {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad("f32 or f64")),
                }
            }
            ("train", "use_predictor") => self.use_predictor = parse!("true or false"),
            ("train", "checkpoint_every") => self.checkpoint_every = parse!("a positive integer"),
            ("train", "log_seconds") => self.log_seconds = parse!("true or false"),
            ("train", "network") => {
                self.network = match value.trim() {
                    "default" => NetworkSize::Default,
                    "small" => NetworkSize::Small,
                    "tiny" => NetworkSize::Tiny,
                    _ => return Err(bad("default, small, or tiny")),
                }
            }
            ("train", "crop_seconds") => self.crop_seconds = parse!("a float"),
            ("augment", "enabled") => self.augment_enabled = parse!("true or false"),
            ("augment", "scale_min") => self.scale_min = parse!("a float"),
            ("augment", "scale_max") => self.scale_max = parse!("a float"),
            ("augment", "aspect_min") => self.aspect_min = parse!("a float"),
            ("augment", "aspect_max") => self.aspect_max = parse!("a float"),
            ("augment", "mix_min") => self.mix_min = parse!("a float"),
            ("augment", "mix_max") => self.mix_max = parse!("a float"),
            ("augment", "fade_min") => self.fade_min = parse!("a float"),
            ("augment", "fade_max") => self.fade_max = parse!("a float"),
            ("probe", "lr") => self.probe_lr = parse!("a float"),
            ("probe", "iters") => self.probe_iters = parse!("a positive integer"),
            ("probe", "source") => {
                self.probe_source = match value.trim() {
                    "online" => ProbeSource::Online,
                    "target" => ProbeSource::Target,
                    _ => return Err(bad("online or target")),
                }
            }
            ("probe", "use_projection") => self.probe_use_projection = parse!("true or false"),
            _ => {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown configuration key {section}.{key}"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config { line: 0, msg });
        if self.learning_rate <= 0.0 {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return fail(format!("tau must be in [0, 1], got {}", self.tau));
        }
        if self.lambda_div < 0.0 || self.lambda_dec < 0.0 {
            return fail("loss weights must be non-negative".into());
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be positive".into());
        }
        if self.crop_seconds <= 0.0 {
            return fail("crop_seconds must be positive".into());
        }
        for (name, (lo, hi)) in [
            ("scale", (self.scale_min, self.scale_max)),
            ("aspect", (self.aspect_min, self.aspect_max)),
            ("mix", (self.mix_min, self.mix_max)),
            ("fade", (self.fade_min, self.fade_max)),
        ] {
            if lo >= hi {
                return fail(format!("{name} range must satisfy min < max, got [{lo}, {hi})"));
            }
        }
        if self.probe_lr <= 0.0 || self.probe_iters == 0 {
            return fail("probe lr and iteration budget must be positive".into());
        }
        Ok(())
    }
}

/// Parse config text over the defaults. Returns the config and does not
/// validate ranges; call `validate` after applying any overrides.
pub fn parse(text: &str) -> Result<Config> {
    let mut cfg = Config::default();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') || line.len() < 3 {
                return Err(Error::Config {
                    line: line_no,
                    msg: format!("malformed section header {line:?}"),
                });
            }
            section = line[1..line.len() - 1].trim().to_string();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config {
                line: line_no,
                msg: format!("expected key = value, got {line:?}"),
            });
        };
        cfg.set(&section, key.trim(), value.trim(), line_no)?;
    }
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<Config> {
    let text = std::fs::read_to_string(path)?;
    parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_yields_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, Config::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn sections_and_comments_parse() {
        let text = "\
# pretraining setup
[train]
learning_rate = 0.001
batch_size = 16
tau = 0.99

[augment]
mix_max = 0.1

[probe]
source = target
";
        let cfg = parse(text).unwrap();
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.tau, 0.99);
        assert_eq!(cfg.mix_max, 0.1);
        assert_eq!(cfg.probe_source, ProbeSource::Target);
        // untouched keys keep their defaults
        assert_eq!(cfg.epochs, 20);
    }

    #[test]
    fn unknown_key_is_rejected_with_line_number() {
        let err = parse("[train]\nlearning_rate = 0.1\nwarmup = 5\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("warmup"), "{msg}");
    }

    #[test]
    fn bad_value_is_rejected_with_line_number() {
        let err = parse("[train]\nbatch_size = many\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn validation_rejects_out_of_range_values() {
        let mut cfg = Config::default();
        cfg.tau = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.scale_min = 2.0;
        assert!(cfg.validate().is_err());
    }

    proptest! {
        /// flag-style overrides (applied after the file) always win, and
        /// file values always beat defaults
        #[test]
        fn precedence_flags_over_file_over_defaults(
            file_lr in 1e-6f64..1e-1,
            flag_lr in 1e-6f64..1e-1,
            file_batch in 2usize..128,
            set_flag in any::<bool>(),
        ) {
            let text = format!("[train]\nlearning_rate = {file_lr}\nbatch_size = {file_batch}\n");
            let mut cfg = parse(&text).unwrap();
            if set_flag {
                cfg.set("train", "learning_rate", &flag_lr.to_string(), 0).unwrap();
            }
            let expect = if set_flag {
                flag_lr.to_string().parse::<f64>().unwrap()
            } else {
                file_lr.to_string().parse::<f64>().unwrap()
            };
            prop_assert_eq!(cfg.learning_rate, expect);
            prop_assert_eq!(cfg.batch_size, file_batch);
            // keys never mentioned stay at defaults
            prop_assert_eq!(cfg.epochs, Config::default().epochs);
        }
    }
}
