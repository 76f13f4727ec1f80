//! Corpus parsing, vocabulary, pretrained embeddings and padded batches.
//!
//! Corpus lines are tab-separated: `label \t utterance_1 \t ... \t utterance_t \t response`,
//! with whitespace-separated tokens inside each field.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueSample {
    pub label: u8,
    pub context: Vec<Vec<String>>,
    pub response: Vec<String>,
}

impl DialogueSample {
    /// Inverse of [`parse_sample_line`] for single-space-separated tokens.
    pub fn to_line(&self) -> String {
        let mut fields = Vec::with_capacity(self.context.len() + 2);
        fields.push(self.label.to_string());
        fields.extend(self.context.iter().map(|u| u.join(" ")));
        fields.push(self.response.join(" "));
        fields.join("\t")
    }
}

fn tokens(field: &str) -> Vec<String> {
    field.split_whitespace().map(str::to_owned).collect()
}

/// Parses one corpus line; `line_no` is 1-based and only used in errors.
pub fn parse_sample_line(line: &str, line_no: usize) -> Result<DialogueSample> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 3 {
        return Err(Error::MalformedLine {
            line: line_no,
            msg: format!("expected at least 3 tab-separated fields, found {}", fields.len()),
        });
    }
    let label = match fields[0].trim() {
        "0" => 0,
        "1" => 1,
        other => {
            return Err(Error::Label {
                line: line_no,
                found: other.to_owned(),
            })
        }
    };
    let (response, context) = fields[1..].split_last().expect("at least two fields");
    let context: Vec<Vec<String>> = context.iter().map(|f| tokens(f)).collect();
    let response = tokens(response);
    if let Some(i) = context.iter().position(Vec::is_empty) {
        return Err(Error::MalformedLine {
            line: line_no,
            msg: format!("utterance {} is empty", i + 1),
        });
    }
    if response.is_empty() {
        return Err(Error::MalformedLine {
            line: line_no,
            msg: "response is empty".into(),
        });
    }
    Ok(DialogueSample {
        label,
        context,
        response,
    })
}

pub fn parse_corpus<R: Read>(reader: R) -> Result<Vec<DialogueSample>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_sample_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn read_corpus(path: &Path) -> Result<Vec<DialogueSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(file)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Ids from 2 upward in descending frequency, ties broken lexicographically.
    /// Tokens seen fewer than `min_count` times map to the unknown id.
    pub fn build<'a, I>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a DialogueSample>,
    {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut any = false;
        for sample in corpus {
            any = true;
            for tok in sample.context.iter().flatten().chain(&sample.response) {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        if !any || counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_owned())))
    }

    /// Builds from tokens listed in id order starting at id 2.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all = vec!["<pad>".to_owned(), "<unk>".to_owned()];
        all.extend(tokens);
        let index = all
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { index, tokens: all }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// One token per line in id order; padding and unknown are implied.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[2..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut seen = std::collections::HashSet::new();
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let tok = line.trim();
            if tok.is_empty() {
                continue;
            }
            if !seen.insert(tok.to_owned()) {
                return Err(Error::Format(format!("{}: line {}: duplicate token {tok:?}", path.display(), i + 1)));
            }
            tokens.push(tok.to_owned());
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn encode_sample(&self, sample: &DialogueSample) -> EncodedSample {
        EncodedSample {
            label: sample.label,
            context: sample.context.iter().map(|u| self.encode(u)).collect(),
            response: self.encode(&sample.response),
        }
    }
}

/// Word embedding matrix, one row per vocabulary id (`[|V| × d]`).
/// Row 0 is padding and is always zero.
#[derive(Debug, Clone)]
pub struct EmbeddingTable<F> {
    pub matrix: Tensor<F>,
    pub frozen: bool,
}

impl<F: Scalar> EmbeddingTable<F> {
    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.shape()[0]
    }

    /// Every non-padding row uniform in [−0.1, 0.1].
    pub fn random<R: Rng>(vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        let mut matrix = Tensor::zeros(vec![vocab_size, dim]);
        for v in &mut matrix.data_mut()[dim..] {
            *v = F::of(rng.gen_range(-0.1..=0.1));
        }
        Self { matrix, frozen: true }
    }

    pub fn load<R: Rng>(path: &Path, vocab: &Vocabulary, dim: usize, rng: &mut R) -> Result<(Self, usize)> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file, vocab, dim, rng)
    }

    /// Reads `token v1 ... vd` lines with an optional `count dim` header.
    /// Returns the table and the number of rows that had to be drawn randomly.
    pub fn from_reader<Rd: Read, R: Rng>(
        reader: Rd,
        vocab: &Vocabulary,
        dim: usize,
        rng: &mut R,
    ) -> Result<(Self, usize)> {
        let mut matrix = Tensor::<F>::zeros(vec![vocab.len(), dim]);
        let mut filled = vec![false; vocab.len()];
        filled[PAD_ID as usize] = true;
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::Embedding {
                line: line_no,
                msg: e.to_string(),
            })?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.is_empty() {
                continue;
            }
            if i == 0 && parts.len() == 2 && parts.iter().all(|p| p.parse::<usize>().is_ok()) {
                let header_dim: usize = parts[1].parse().expect("checked");
                if header_dim != dim {
                    return Err(Error::Embedding {
                        line: line_no,
                        msg: format!("header dimension {header_dim} does not match configured {dim}"),
                    });
                }
                continue;
            }
            let found = parts.len() - 1;
            if found != dim {
                return Err(Error::Embedding {
                    line: line_no,
                    msg: format!("expected {dim} values, found {found}"),
                });
            }
            let id = vocab.id(parts[0]);
            let values = parts[1..]
                .iter()
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Embedding {
                    line: line_no,
                    msg: format!("unparseable value: {e}"),
                })?;
            if id == UNK_ID && parts[0] != "<unk>" {
                continue;
            }
            let row = &mut matrix.data_mut()[id as usize * dim..(id as usize + 1) * dim];
            for (r, v) in row.iter_mut().zip(values) {
                *r = F::of(v);
            }
            filled[id as usize] = true;
        }
        let mut random_rows = 0;
        for (id, done) in filled.iter().enumerate() {
            if !done {
                random_rows += 1;
                for v in &mut matrix.data_mut()[id * dim..(id + 1) * dim] {
                    *v = F::of(rng.gen_range(-0.1..=0.1));
                }
            }
        }
        Ok((Self { matrix, frozen: true }, random_rows))
    }
}

/// A sample mapped to vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub label: u8,
    pub context: Vec<Vec<u32>>,
    pub response: Vec<u32>,
}

/// Padded id arrays with masks. Real turns occupy the leading turn slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub max_turns: usize,
    pub max_len: usize,
    /// `[size × max_turns × max_len]`
    pub utterance_ids: Vec<u32>,
    pub utterance_mask: Vec<bool>,
    /// `[size × max_len]`
    pub response_ids: Vec<u32>,
    pub response_mask: Vec<bool>,
    /// `[size × max_turns]`
    pub turn_mask: Vec<bool>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn utterance(&self, b: usize, t: usize) -> (&[u32], &[bool]) {
        let off = (b * self.max_turns + t) * self.max_len;
        (
            &self.utterance_ids[off..off + self.max_len],
            &self.utterance_mask[off..off + self.max_len],
        )
    }

    pub fn response(&self, b: usize) -> (&[u32], &[bool]) {
        let off = b * self.max_len;
        (
            &self.response_ids[off..off + self.max_len],
            &self.response_mask[off..off + self.max_len],
        )
    }

    pub fn turn_mask(&self, b: usize) -> &[bool] {
        &self.turn_mask[b * self.max_turns..(b + 1) * self.max_turns]
    }

    pub fn turns(&self, b: usize) -> usize {
        self.turn_mask(b).iter().filter(|&&m| m).count()
    }

    /// Longest real sequence in the batch; the model only looks at this many
    /// leading positions, since everything beyond is padding everywhere.
    pub fn content_width(&self) -> usize {
        let longest = |mask: &[bool]| {
            mask.chunks(self.max_len)
                .map(|row| row.iter().rposition(|&m| m).map_or(0, |p| p + 1))
                .max()
                .unwrap_or(0)
        };
        longest(&self.utterance_mask).max(longest(&self.response_mask)).max(1)
    }
}

/// Pads and truncates: each sentence keeps its first `max_len` tokens and each
/// context keeps its most recent `max_turns` utterances.
pub fn make_batch(samples: &[EncodedSample], max_turns: usize, max_len: usize) -> Batch {
    let size = samples.len();
    let mut batch = Batch {
        size,
        max_turns,
        max_len,
        utterance_ids: vec![PAD_ID; size * max_turns * max_len],
        utterance_mask: vec![false; size * max_turns * max_len],
        response_ids: vec![PAD_ID; size * max_len],
        response_mask: vec![false; size * max_len],
        turn_mask: vec![false; size * max_turns],
        labels: samples.iter().map(|s| s.label).collect(),
    };
    for (b, s) in samples.iter().enumerate() {
        let skip = s.context.len().saturating_sub(max_turns);
        for (t, utt) in s.context[skip..].iter().enumerate() {
            batch.turn_mask[b * max_turns + t] = true;
            let off = (b * max_turns + t) * max_len;
            for (p, &id) in utt.iter().take(max_len).enumerate() {
                batch.utterance_ids[off + p] = id;
                batch.utterance_mask[off + p] = true;
            }
        }
        let off = b * max_len;
        for (p, &id) in s.response.iter().take(max_len).enumerate() {
            batch.response_ids[off + p] = id;
            batch.response_mask[off + p] = true;
        }
    }
    batch
}

/// Shuffled mini-batch index lists, deterministic in `seed`.
pub fn batch_order(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// One context with its candidate responses, for ranking evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionSamples {
    pub id: String,
    pub samples: Vec<DialogueSample>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GroupMode {
    /// Consecutive runs of this many lines share a context.
    Fixed(usize),
    /// The first tab field of each line is a session id; consecutive lines
    /// with the same id form one session.
    SessionColumn,
}

pub fn read_sessions(path: &Path, mode: &GroupMode) -> Result<Vec<SessionSamples>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sessions(&text, mode)
}

pub fn parse_sessions(text: &str, mode: &GroupMode) -> Result<Vec<SessionSamples>> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l))
        .collect();
    if lines.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    match mode {
        GroupMode::Fixed(n) => {
            if *n == 0 || !lines.len().is_multiple_of(*n) {
                return Err(Error::Format(format!(
                    "{} lines cannot be split into sessions of {n}",
                    lines.len()
                )));
            }
            lines
                .chunks(*n)
                .enumerate()
                .map(|(k, chunk)| {
                    let samples = chunk
                        .iter()
                        .map(|&(no, l)| parse_sample_line(l, no))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(SessionSamples {
                        id: k.to_string(),
                        samples,
                    })
                })
                .collect()
        }
        GroupMode::SessionColumn => {
            let mut sessions: Vec<SessionSamples> = Vec::new();
            for (no, line) in lines {
                let (sid, rest) = line.split_once('\t').ok_or_else(|| Error::MalformedLine {
                    line: no,
                    msg: "missing session id column".into(),
                })?;
                let sample = parse_sample_line(rest, no)?;
                match sessions.last_mut() {
                    Some(s) if s.id == sid => s.samples.push(sample),
                    _ => sessions.push(SessionSamples {
                        id: sid.to_owned(),
                        samples: vec![sample],
                    }),
                }
            }
            Ok(sessions)
        }
    }
}
