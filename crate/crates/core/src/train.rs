//! Mini-batch training with Adam and ranking evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{debug, info};

use crate::checkpoint;
use crate::data::{batch_order, make_batch, EncodedSample};
use crate::error::{Error, Result};
use crate::metrics::{recall_at_k, EvalSession};
use crate::model::S2mModel;
use crate::optim::{Adam, AdamConfig, StepDecay};
use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub decay_every: u64,
    pub seed: u64,
    /// Threads for per-sample forward/backward; 1 keeps everything on the caller.
    pub workers: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    /// Candidates per validation session.
    pub valid_group: usize,
    /// Stop once validation `R_n@1` reaches this value.
    pub stop_at: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 20,
            learning_rate: 5e-4,
            decay_rate: 0.9,
            decay_every: 5000,
            seed: 0,
            workers: 1,
            max_steps: None,
            valid_group: 2,
            stop_at: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// `R_n@1` on the validation sessions, when given.
    pub valid_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOutcome {
    pub steps: u64,
    pub history: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
}

pub fn thread_pool(workers: usize) -> Result<Option<rayon::ThreadPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Splits samples into consecutive sessions of `group` candidates.
pub fn group_sessions(samples: &[EncodedSample], group: usize) -> Result<Vec<Vec<EncodedSample>>> {
    if group == 0 || !samples.len().is_multiple_of(group) {
        return Err(Error::Format(format!(
            "{} samples cannot be split into sessions of {group}",
            samples.len()
        )));
    }
    Ok(samples.chunks(group).map(<[EncodedSample]>::to_vec).collect())
}

/// Scores every candidate of every session.
pub fn score_sessions<F: Scalar>(
    model: &S2mModel,
    store: &ParamStore<F>,
    sessions: &[Vec<EncodedSample>],
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<EvalSession>> {
    let cfg = &model.config;
    sessions
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let batch = make_batch(s, cfg.max_turns, cfg.max_len);
            let scores = model.score_batch(store, &batch, pool)?;
            let turns = batch.turns(0);
            Ok(EvalSession::new(
                i.to_string(),
                scores.iter().zip(s).map(|(g, c)| (g.total, c.label)).collect(),
                turns,
            ))
        })
        .collect()
}

/// Mean `R_n@1` over sessions that contain a positive.
pub fn mean_recall_at_1(sessions: &[EvalSession]) -> Result<f64> {
    let kept: Vec<&EvalSession> = sessions.iter().filter(|s| s.positives() > 0).collect();
    if kept.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for s in &kept {
        sum += recall_at_k(s, 1)?;
    }
    Ok(sum / kept.len() as f64)
}

fn log_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".log");
    PathBuf::from(p)
}

/// Trains `store` in place. With validation data the best epoch (by `R_n@1`)
/// is kept: it is written to `checkpoint` and restored into `store` at the
/// end. Without validation data every epoch overwrites the checkpoint.
pub fn train<F: Scalar>(
    model: &S2mModel,
    store: &mut ParamStore<F>,
    train: &[EncodedSample],
    valid: Option<&[EncodedSample]>,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let valid_sessions = valid.map(|v| group_sessions(v, cfg.valid_group)).transpose()?;
    let pool = thread_pool(cfg.workers)?;
    let schedule = StepDecay {
        initial: cfg.learning_rate,
        decay: cfg.decay_rate,
        every: cfg.decay_every,
    };
    let mut adam = Adam::new(store, AdamConfig::default());
    let mut log = match checkpoint {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let lp = log_path(p);
            Some(BufWriter::new(File::create(&lp).map_err(|e| Error::io(&lp, e))?))
        }
        None => None,
    };
    let mut write_log = |line: String| -> Result<()> {
        if let (Some(w), Some(p)) = (log.as_mut(), checkpoint) {
            writeln!(w, "{line}").map_err(|e| Error::io(log_path(p), e))?;
        }
        Ok(())
    };

    let mut outcome = TrainOutcome::default();
    let mut best: Option<(f64, ParamStore<F>)> = None;
    if cfg.epochs == 0 {
        if let Some(p) = checkpoint {
            checkpoint::save(p, model, store)?;
        }
    }
    let mcfg = &model.config;
    'epochs: for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in batch_order(train.len(), cfg.batch_size, cfg.seed.wrapping_add(epoch as u64)) {
            if cfg.max_steps.is_some_and(|m| outcome.steps >= m) {
                break;
            }
            let samples: Vec<EncodedSample> = idx.iter().map(|&i| train[i].clone()).collect();
            let batch = make_batch(&samples, mcfg.max_turns, mcfg.max_len);
            let (loss, grads) = model.loss_and_grads(store, &batch, pool.as_ref())?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: outcome.steps,
                    loss,
                });
            }
            let lr = schedule.rate(outcome.steps);
            adam.update(store, &grads, lr);
            write_log(format!("step={} lr={lr:.6e} loss={loss:.6}", outcome.steps))?;
            debug!("step {} loss {loss:.5}", outcome.steps);
            outcome.steps += 1;
            loss_sum += loss;
            batches += 1;
        }
        let mean_loss = if batches > 0 { loss_sum / batches as f64 } else { f64::NAN };
        let valid_recall = match &valid_sessions {
            Some(v) => Some(mean_recall_at_1(&score_sessions(model, store, v, pool.as_ref())?)?),
            None => None,
        };
        info!(
            "epoch {epoch}: mean loss {mean_loss:.5}{}",
            valid_recall.map(|r| format!(", valid R@1 {r:.4}")).unwrap_or_default()
        );
        write_log(format!(
            "epoch={epoch} loss={mean_loss:.6} valid_r1={}",
            valid_recall.map(|r| format!("{r:.6}")).unwrap_or_else(|| "-".into())
        ))?;
        outcome.history.push(EpochStats {
            epoch,
            mean_loss,
            valid_recall,
        });
        match valid_recall {
            Some(r) => {
                if best.as_ref().is_none_or(|(b, _)| r > *b) {
                    best = Some((r, store.clone()));
                    outcome.best_epoch = Some(epoch);
                    if let Some(p) = checkpoint {
                        checkpoint::save(p, model, store)?;
                    }
                }
            }
            None => {
                outcome.best_epoch = Some(epoch);
                if let Some(p) = checkpoint {
                    checkpoint::save(p, model, store)?;
                }
            }
        }
        if cfg.max_steps.is_some_and(|m| outcome.steps >= m) {
            break 'epochs;
        }
        if let (Some(target), Some(r)) = (cfg.stop_at, valid_recall) {
            if r >= target {
                info!("validation R@1 {r:.4} reached target {target}");
                break 'epochs;
            }
        }
    }
    if let Some((_, kept)) = best {
        *store = kept;
    }
    if let Some(w) = log.as_mut() {
        w.flush().map_err(|e| Error::io(log_path(checkpoint.unwrap_or(Path::new(""))), e))?;
    }
    Ok(outcome)
}
