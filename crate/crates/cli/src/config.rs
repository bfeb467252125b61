//! Flat `key=value` run configuration.
//!
//! Top-level keys are `seed`, `shots`, `repeats`, `val_size` and
//! `test_size`. Section keys carry a prefix: `synth.p_in=0.05`,
//! `pretrain.epochs=200`, `tune.lr=0.005`. Blank lines and `#` comments
//! are ignored. Command-line flags override the file.

use std::path::Path;

use hetgpt_core::encoder::EncoderConfig;
use hetgpt_core::synth::{SplitSpec, SyntheticSpec};
use hetgpt_core::tuner::TuneConfig;

use crate::CliError;

pub const SEED_ENV: &str = "HETGPT_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub shots: usize,
    pub repeats: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub synth: SyntheticSpec,
    pub pretrain: EncoderConfig,
    pub tune: TuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let split = SplitSpec::new(5, 0);
        RunConfig {
            seed: 0,
            shots: split.shots,
            repeats: 10,
            val_size: split.val_size,
            test_size: split.test_size,
            synth: SyntheticSpec::acm_mini(0),
            pretrain: EncoderConfig::default(),
            tune: TuneConfig::default(),
        }
    }
}

/// Values given on the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub shots: Option<usize>,
    pub repeats: Option<usize>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("cannot parse {key} from {value:?}")))
}

fn apply_encoder(cfg: &mut EncoderConfig, key: &str, value: &str) -> Result<(), CliError> {
    match key {
        "dim" => cfg.dim = parse(key, value)?,
        "epochs" => cfg.epochs = parse(key, value)?,
        "lr" => cfg.lr = parse(key, value)?,
        "tau_pre" => cfg.tau_pre = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        _ => return Err(CliError::Config(format!("unknown key pretrain.{key}"))),
    }
    Ok(())
}

impl RunConfig {
    /// Defaults, then the file, then `HETGPT_SEED` if no seed was set so
    /// far, then flags.
    pub fn resolve(file: Option<&Path>, flags: &Overrides) -> Result<RunConfig, CliError> {
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(v) => Some(parse::<u64>(SEED_ENV, v.trim())?),
            Err(_) => None,
        };
        let text = match file {
            Some(path) => std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?,
            None => String::new(),
        };
        Self::from_parts(&text, env_seed, flags)
    }

    pub fn from_parts(text: &str, env_seed: Option<u64>, flags: &Overrides) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        let mut seed = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("config line {}: expected key=value", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key.ends_with(".seed") {
                return Err(CliError::Config(format!(
                    "{key}: seeds come from the top-level seed key"
                )));
            }
            match key.split_once('.') {
                Some(("synth", k)) => cfg.synth.apply(k, value)?,
                Some(("pretrain", k)) => apply_encoder(&mut cfg.pretrain, k, value)?,
                Some(("tune", k)) => {
                    if !cfg.tune.apply(k, value)? {
                        return Err(CliError::Config(format!("unknown key {key}")));
                    }
                }
                Some(_) => return Err(CliError::Config(format!("unknown key {key}"))),
                None => match key {
                    "seed" => seed = Some(parse(key, value)?),
                    "shots" => cfg.shots = parse(key, value)?,
                    "repeats" => cfg.repeats = parse(key, value)?,
                    "val_size" => cfg.val_size = parse(key, value)?,
                    "test_size" => cfg.test_size = parse(key, value)?,
                    _ => return Err(CliError::Config(format!("unknown key {key}"))),
                },
            }
        }
        cfg.seed = flags.seed.or(seed).or(env_seed).unwrap_or(0);
        if let Some(shots) = flags.shots {
            cfg.shots = shots;
        }
        if let Some(repeats) = flags.repeats {
            cfg.repeats = repeats;
        }
        cfg.synth.seed = cfg.seed;
        cfg.pretrain.seed = cfg.seed;
        cfg.tune.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.repeats == 0 {
            return Err(CliError::Config("repeats must be at least 1".into()));
        }
        self.split_spec(0).validate()?;
        self.synth.validate()?;
        self.pretrain.validate()?;
        self.tune.validate()?;
        Ok(())
    }

    /// Seed of repeat `r`.
    pub fn repeat_seed(&self, r: usize) -> u64 {
        self.seed.wrapping_add(r as u64)
    }

    pub fn split_spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            shots: self.shots,
            val_size: self.val_size,
            test_size: self.test_size,
            seed,
        }
    }

    /// Tuning config for repeat seed `seed`.
    pub fn tune_config(&self, seed: u64) -> TuneConfig {
        TuneConfig {
            seed,
            ..self.tune.clone()
        }
    }
}
