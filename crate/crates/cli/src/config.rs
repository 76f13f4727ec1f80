//! Run configuration: defaults, then a `key = value` file, then flags.

use std::collections::BTreeSet;
use std::path::PathBuf;

use s2m::data::GroupMode;
use s2m::ModelConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub decay_every: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    /// Stop training once validation `R_n@1` reaches this value.
    pub stop_at: Option<f64>,
    pub seed: u64,
    pub workers: usize,
    pub precision: Precision,
    pub min_count: usize,
    /// Candidates per validation context.
    pub valid_group: usize,
    /// Candidates per test context.
    pub group_size: usize,
    /// Test lines carry a leading session-id column instead of fixed groups.
    pub session_column: bool,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Keys set by the config file or a flag rather than left at their default.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: 5e-4,
            decay_rate: 0.9,
            decay_every: 5000,
            batch_size: 20,
            epochs: 10,
            max_steps: None,
            stop_at: None,
            seed: 0,
            workers: 1,
            precision: Precision::F32,
            min_count: 1,
            valid_group: 2,
            group_size: 10,
            session_column: false,
            train: None,
            valid: None,
            test: None,
            embeddings: None,
            vocab: None,
            checkpoint: None,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("{key}: cannot parse {value:?}")))
}

fn flag(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Usage(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Defaults, overridden by `file` lines, overridden by `flags`.
    pub fn resolve(file: Option<&str>, flags: &[(String, String)]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(text) = file {
            for (k, v) in parse_file(text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in flags {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let path = || Some(PathBuf::from(value));
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "decay_rate" => self.decay_rate = parse(key, value)?,
            "decay_every" => self.decay_every = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "max_steps" => self.max_steps = Some(parse(key, value)?),
            "stop_at" => self.stop_at = Some(parse(key, value)?),
            "seed" => self.seed = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "precision" => {
                self.precision = match value {
                    "32" => Precision::F32,
                    "64" => Precision::F64,
                    _ => return Err(CliError::Usage(format!("precision must be 32 or 64, got {value:?}"))),
                }
            }
            "min_count" => self.min_count = parse(key, value)?,
            "valid_group" => self.valid_group = parse(key, value)?,
            "group_size" => self.group_size = parse(key, value)?,
            "session_column" => self.session_column = flag(key, value)?,
            "train" => self.train = path(),
            "valid" => self.valid = path(),
            "test" => self.test = path(),
            "embeddings" => self.embeddings = path(),
            "vocab" => self.vocab = path(),
            "checkpoint" => self.checkpoint = path(),
            "dim" => {
                let d: usize = parse(key, value)?;
                self.model.embed_dim = d;
                self.model.hidden = d;
            }
            "cross_rep" | "self_rep_enabled" | "freeze_embeddings" => {
                self.model.set(key, &flag(key, value)?.to_string()).map_err(CliError::from_config)?
            }
            "vocab_size" => return Err(CliError::Usage("vocab_size is taken from the vocabulary file".into())),
            _ => self.model.set(key, value).map_err(CliError::from_config)?,
        }
        self.explicit.insert(key.to_owned());
        Ok(())
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Usage(m.to_owned()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad("decay rate must lie in (0, 1]");
        }
        if self.decay_every == 0 {
            return bad("decay interval must be at least one step");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.workers == 0 {
            return bad("worker count must be at least 1");
        }
        if self.group_size == 0 || self.valid_group == 0 {
            return bad("group sizes must be at least 1");
        }
        Ok(())
    }

    pub fn group_mode(&self) -> GroupMode {
        if self.session_column {
            GroupMode::SessionColumn
        } else {
            GroupMode::Fixed(self.group_size)
        }
    }

    pub fn train_config(&self) -> s2m::train::TrainConfig {
        s2m::train::TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            decay_rate: self.decay_rate,
            decay_every: self.decay_every,
            seed: self.seed,
            workers: self.workers,
            max_steps: self.max_steps,
            valid_group: self.valid_group,
            stop_at: self.stop_at,
        }
    }
}

/// Flat `key = value` lines; `#` starts a comment.
pub fn parse_file(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(CliError::Usage(format!("config line {}: missing key", i + 1)));
        }
        out.push((k.to_owned(), v.to_owned()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults() {
        let c = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(c.learning_rate, 5e-4);
        assert_eq!(c.decay_rate, 0.9);
        assert_eq!(c.decay_every, 5000);
        assert_eq!(c.batch_size, 20);
        assert_eq!(c.group_size, 10);
        assert_eq!(c.model, ModelConfig::default());
        assert!(c.explicit.is_empty());
    }

    #[test]
    fn file_comments_and_blank_lines() {
        let text = "# run\n\nstacks = 3   # fewer\n  learning_rate=0.01\n";
        assert_eq!(
            parse_file(text).unwrap(),
            kv(&[("stacks", "3"), ("learning_rate", "0.01")])
        );
        assert!(parse_file("stacks 3").is_err());
        assert!(parse_file("= 3").is_err());
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(RunConfig::resolve(None, &kv(&[("learning_rate", "0")])).is_err());
        assert!(RunConfig::resolve(None, &kv(&[("batch_size", "0")])).is_err());
        assert!(RunConfig::resolve(None, &kv(&[("bogus", "1")])).is_err());
        assert!(RunConfig::resolve(None, &kv(&[("precision", "16")])).is_err());
    }

    #[test]
    fn dim_sets_both_widths() {
        let c = RunConfig::resolve(Some("dim = 16"), &[]).unwrap();
        assert_eq!((c.model.embed_dim, c.model.hidden), (16, 16));
    }
}
