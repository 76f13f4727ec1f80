use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::Pooling;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelfRepKind {
    #[default]
    Cnn,
    Gru,
    Attention,
}

impl FromStr for SelfRepKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(SelfRepKind::Cnn),
            "gru" => Ok(SelfRepKind::Gru),
            "attention" => Ok(SelfRepKind::Attention),
            other => Err(Error::Config(format!(
                "unknown self-representation {other:?} (cnn|gru|attention)"
            ))),
        }
    }
}

impl fmt::Display for SelfRepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelfRepKind::Cnn => "cnn",
            SelfRepKind::Gru => "gru",
            SelfRepKind::Attention => "attention",
        })
    }
}

/// How the word-similarity channel is combined with sentence matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Integration {
    /// Sentence matching only.
    #[default]
    Pure,
    /// Inputs of both channels are mixed before every block.
    I1,
    /// Similarity matrices and pooled sentence vectors are exchanged at matching.
    I2,
    /// Matching features are concatenated into one shared aggregation GRU.
    I3,
}

impl Integration {
    pub const ALL: [Integration; 4] = [Integration::Pure, Integration::I1, Integration::I2, Integration::I3];

    pub fn has_word_channel(self) -> bool {
        self != Integration::Pure
    }

    /// Strategies that keep a separate aggregation head and loss per channel.
    pub fn separate_heads(self) -> bool {
        matches!(self, Integration::I1 | Integration::I2)
    }
}

impl FromStr for Integration {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pure" => Ok(Integration::Pure),
            "i1" => Ok(Integration::I1),
            "i2" => Ok(Integration::I2),
            "i3" => Ok(Integration::I3),
            other => Err(Error::Config(format!("unknown integration {other:?} (pure|i1|i2|i3)"))),
        }
    }
}

impl fmt::Display for Integration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Integration::Pure => "pure",
            Integration::I1 => "i1",
            Integration::I2 => "i2",
            Integration::I3 => "i3",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stacks: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub max_turns: usize,
    pub max_len: usize,
    pub self_rep: SelfRepKind,
    pub pooling: Pooling,
    pub cross_rep_enabled: bool,
    pub self_rep_enabled: bool,
    pub integration: Integration,
    /// Filters of the word channel's similarity-matrix convolution.
    pub word_filters: usize,
    pub vocab_size: usize,
    pub freeze_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stacks: 7,
            embed_dim: 200,
            hidden: 200,
            kernel: 3,
            max_turns: 15,
            max_len: 50,
            self_rep: SelfRepKind::Cnn,
            pooling: Pooling::Max,
            cross_rep_enabled: true,
            self_rep_enabled: true,
            integration: Integration::Pure,
            word_filters: 16,
            vocab_size: 2,
            freeze_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.stacks == 0 {
            return fail("stack count must be at least 1".into());
        }
        if self.kernel.is_multiple_of(2) {
            return fail(format!("kernel height must be odd, got {}", self.kernel));
        }
        if self.embed_dim != self.hidden {
            return fail(format!(
                "embedding dimension ({}) must equal hidden size ({}): block outputs re-enter the next block",
                self.embed_dim, self.hidden
            ));
        }
        if self.hidden == 0 || self.max_len == 0 || self.max_turns == 0 || self.word_filters == 0 {
            return fail("dimensions must be positive".into());
        }
        if !self.self_rep_enabled && !self.cross_rep_enabled {
            return fail("at least one of self- and cross-representation must be enabled".into());
        }
        if self.integration.has_word_channel() && !(self.self_rep_enabled && self.cross_rep_enabled) {
            return fail(format!(
                "integration {} needs both self- and cross-representation",
                self.integration
            ));
        }
        if self.vocab_size < 2 {
            return fail("vocabulary must contain the padding and unknown ids".into());
        }
        Ok(())
    }

    /// `key = value` lines, sorted by key.
    pub fn to_text(&self) -> String {
        self.to_map()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    fn to_map(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("stacks", self.stacks.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("hidden", self.hidden.to_string()),
            ("kernel", self.kernel.to_string()),
            ("max_turns", self.max_turns.to_string()),
            ("max_len", self.max_len.to_string()),
            ("self_rep", self.self_rep.to_string()),
            ("pooling", self.pooling.to_string()),
            ("cross_rep", self.cross_rep_enabled.to_string()),
            ("self_rep_enabled", self.self_rep_enabled.to_string()),
            ("integration", self.integration.to_string()),
            ("word_filters", self.word_filters.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("freeze_embeddings", self.freeze_embeddings.to_string()),
        ])
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = 0;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad config line {line:?}")))?;
            cfg.set(k.trim(), v.trim())?;
            seen += 1;
        }
        if seen != cfg.to_map().len() {
            return Err(Error::Checkpoint(format!(
                "config record has {seen} entries, expected {}",
                cfg.to_map().len()
            )));
        }
        Ok(cfg)
    }

    /// Sets one field from its text form; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num(key: &str, v: &str) -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: expected true or false, got {v:?}")))
        }
        match key {
            "stacks" => self.stacks = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "kernel" => self.kernel = num(key, value)?,
            "max_turns" => self.max_turns = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "self_rep" => self.self_rep = value.parse()?,
            "pooling" => self.pooling = value.parse()?,
            "cross_rep" => self.cross_rep_enabled = flag(key, value)?,
            "self_rep_enabled" => self.self_rep_enabled = flag(key, value)?,
            "integration" => self.integration = value.parse()?,
            "word_filters" => self.word_filters = num(key, value)?,
            "vocab_size" => self.vocab_size = num(key, value)?,
            "freeze_embeddings" => self.freeze_embeddings = flag(key, value)?,
            other => return Err(Error::Config(format!("unknown model key {other:?}"))),
        }
        Ok(())
    }
}
