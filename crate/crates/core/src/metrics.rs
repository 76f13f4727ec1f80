//! Ranking metrics over per-session candidate lists.
//!
//! Candidates are ranked by descending score; ties keep their input order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSession {
    pub id: String,
    /// `(score, label)` in input order.
    pub candidates: Vec<(f64, u8)>,
    /// Real context turns, used for the bucketed breakdown.
    pub turns: usize,
}

impl EvalSession {
    pub fn new(id: impl Into<String>, candidates: Vec<(f64, u8)>, turns: usize) -> Self {
        Self {
            id: id.into(),
            candidates,
            turns,
        }
    }

    pub fn n(&self) -> usize {
        self.candidates.len()
    }

    pub fn positives(&self) -> usize {
        self.candidates.iter().filter(|c| c.1 > 0).count()
    }

    /// Labels in ranked order.
    pub fn ranked_labels(&self) -> Vec<u8> {
        let mut order: Vec<usize> = (0..self.candidates.len()).collect();
        order.sort_by(|&a, &b| self.candidates[b].0.total_cmp(&self.candidates[a].0));
        order.into_iter().map(|i| self.candidates[i].1).collect()
    }
}

fn require_positive(s: &EvalSession) -> Result<()> {
    if s.positives() == 0 {
        return Err(Error::Contract(format!("session {:?} has no positive candidate", s.id)));
    }
    Ok(())
}

pub fn recall_at_k(s: &EvalSession, k: usize) -> Result<f64> {
    if k == 0 || k > s.n() {
        return Err(Error::Contract(format!(
            "recall@{k} undefined for session {:?} with {} candidates",
            s.id,
            s.n()
        )));
    }
    require_positive(s)?;
    let hits = s.ranked_labels()[..k].iter().filter(|&&l| l > 0).count();
    Ok(hits as f64 / s.positives() as f64)
}

pub fn average_precision(s: &EvalSession) -> Result<f64> {
    require_positive(s)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &l) in s.ranked_labels().iter().enumerate() {
        if l > 0 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / hits as f64)
}

pub fn reciprocal_rank(s: &EvalSession) -> Result<f64> {
    require_positive(s)?;
    let rank = s.ranked_labels().iter().position(|&l| l > 0).unwrap_or(0) + 1;
    Ok(1.0 / rank as f64)
}

pub fn precision_at_1(s: &EvalSession) -> Result<f64> {
    require_positive(s)?;
    Ok(if s.ranked_labels()[0] > 0 { 1.0 } else { 0.0 })
}

/// Recall cut-offs reported for `R_n@k`.
pub const RECALL_KS: [usize; 3] = [1, 2, 5];

/// Means over a group of sessions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricValues {
    pub sessions: usize,
    pub recall: Vec<(usize, f64)>,
    pub map: f64,
    pub mrr: f64,
    pub p_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    /// Smallest candidate count over the scored sessions.
    pub n: usize,
    pub overall: MetricValues,
    /// Keyed by exact number of context turns.
    pub buckets: BTreeMap<usize, MetricValues>,
    /// Sessions dropped for having no positive candidate.
    pub skipped: usize,
}

fn means(sessions: &[&EvalSession], ks: &[usize]) -> Result<MetricValues> {
    let count = sessions.len();
    let mut v = MetricValues {
        sessions: count,
        recall: ks.iter().map(|&k| (k, 0.0)).collect(),
        ..MetricValues::default()
    };
    if count == 0 {
        return Ok(v);
    }
    for s in sessions {
        for (k, acc) in v.recall.iter_mut() {
            *acc += recall_at_k(s, *k)?;
        }
        v.map += average_precision(s)?;
        v.mrr += reciprocal_rank(s)?;
        v.p_at_1 += precision_at_1(s)?;
    }
    let c = count as f64;
    for (_, acc) in v.recall.iter_mut() {
        *acc /= c;
    }
    v.map /= c;
    v.mrr /= c;
    v.p_at_1 /= c;
    Ok(v)
}

/// Means over all sessions with at least one positive, plus the same means
/// per exact turn count.
pub fn aggregate(sessions: &[EvalSession]) -> Result<MetricReport> {
    if let Some(s) = sessions.iter().find(|s| s.n() == 0) {
        return Err(Error::Contract(format!("session {:?} has no candidates", s.id)));
    }
    let kept: Vec<&EvalSession> = sessions.iter().filter(|s| s.positives() > 0).collect();
    let skipped = sessions.len() - kept.len();
    let n = kept.iter().map(|s| s.n()).min().unwrap_or(0);
    let ks: Vec<usize> = RECALL_KS.iter().copied().filter(|&k| k <= n).collect();
    let overall = means(&kept, &ks)?;
    let mut grouped: BTreeMap<usize, Vec<&EvalSession>> = BTreeMap::new();
    for &s in &kept {
        grouped.entry(s.turns).or_default().push(s);
    }
    let buckets = grouped
        .into_iter()
        .map(|(t, group)| Ok((t, means(&group, &ks)?)))
        .collect::<Result<_>>()?;
    Ok(MetricReport {
        n,
        overall,
        buckets,
        skipped,
    })
}

impl MetricReport {
    fn columns(&self, v: &MetricValues) -> Vec<(String, f64)> {
        let mut cols: Vec<(String, f64)> = v
            .recall
            .iter()
            .map(|(k, x)| (format!("r{}@{}", self.n, k), *x))
            .collect();
        cols.push(("map".into(), v.map));
        cols.push(("mrr".into(), v.mrr));
        cols.push(("p@1".into(), v.p_at_1));
        cols
    }

    fn rows(&self) -> Vec<(String, &MetricValues)> {
        std::iter::once(("all".to_string(), &self.overall))
            .chain(self.buckets.iter().map(|(t, v)| (format!("turns{t}"), v)))
            .collect()
    }

    /// Fixed-width table, one row per bucket.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let header = self.columns(&self.overall);
        let _ = write!(out, "{:<8} {:>8}", "bucket", "sessions");
        for (name, _) in &header {
            let _ = write!(out, " {:>8}", name.to_uppercase());
        }
        out.push('\n');
        for (name, v) in self.rows() {
            let _ = write!(out, "{:<8} {:>8}", name, v.sessions);
            for (_, x) in self.columns(v) {
                let _ = write!(out, " {:>8.4}", x);
            }
            out.push('\n');
        }
        let _ = writeln!(out, "skipped sessions without a positive: {}", self.skipped);
        out
    }

    /// `metric.bucket = value` lines.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (bucket, v) in self.rows() {
            let _ = writeln!(out, "sessions.{bucket} = {}", v.sessions);
            for (name, x) in self.columns(v) {
                let _ = writeln!(out, "{name}.{bucket} = {x}");
            }
        }
        let _ = writeln!(out, "skipped.all = {}", self.skipped);
        out
    }
}
