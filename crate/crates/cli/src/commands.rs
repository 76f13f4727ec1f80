//! The five subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use s2m::checkpoint;
use s2m::data::{make_batch, read_corpus, read_sessions, EmbeddingTable, EncodedSample, SessionSamples, Vocabulary};
use s2m::gradcheck::{all_combinations, check, GradCheckConfig};
use s2m::metrics::{aggregate, EvalSession, MetricReport};
use s2m::model::{Integration, Scores};
use s2m::params::ParamStore;
use s2m::train::thread_pool;
use s2m::{S2mModel, Scalar};

use crate::config::{Precision, RunConfig};
use crate::CliError;

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing --{what} (or `{what} = ...` in the config file)")))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Data(format!("cannot write output: {e}")))
}

pub fn build_vocab(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let train = required(&cfg.train, "train")?;
    let target = required(&cfg.vocab, "vocab")?;
    let corpus = read_corpus(train)?;
    let vocab = Vocabulary::build(&corpus, cfg.min_count)?;
    vocab.save(target)?;
    emit(
        out,
        &format!("wrote {} tokens to {}\n", vocab.len() - 2, target.display()),
    )
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocabulary, CliError> {
    Ok(Vocabulary::load(required(&cfg.vocab, "vocab")?)?)
}

pub fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, out),
        Precision::F64 => train_as::<f64>(cfg, out),
    }
}

fn train_as<F: Scalar>(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let ckpt = required(&cfg.checkpoint, "checkpoint")?;
    let vocab = load_vocab(cfg)?;
    let encode = |p: &Path| -> Result<Vec<EncodedSample>, CliError> {
        Ok(read_corpus(p)?.iter().map(|s| vocab.encode_sample(s)).collect())
    };
    let train = encode(required(&cfg.train, "train")?)?;
    let valid = cfg.valid.as_deref().map(encode).transpose()?;

    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let table = match &cfg.embeddings {
        Some(p) => {
            let (table, missing) = EmbeddingTable::<F>::load(p, &vocab, model_cfg.embed_dim, &mut rng)?;
            info!("{missing} of {} vocabulary rows had no pretrained vector", vocab.len());
            table
        }
        None => {
            if !cfg.is_explicit("freeze_embeddings") {
                warn!("no pretrained embeddings given; random embeddings will be trained");
                model_cfg.freeze_embeddings = false;
            }
            EmbeddingTable::random(vocab.len(), model_cfg.embed_dim, &mut rng)
        }
    };
    let (model, mut store) = S2mModel::new(model_cfg, table.matrix, cfg.seed)?;
    info!("{} parameters", store.iter().map(|(_, e)| e.value.numel()).sum::<usize>());
    let outcome = s2m::train::train(&model, &mut store, &train, valid.as_deref(), &cfg.train_config(), Some(ckpt))?;

    let mut report = String::new();
    for e in &outcome.history {
        report.push_str(&format!("epoch {} loss {:.6}", e.epoch, e.mean_loss));
        if let Some(r) = e.valid_recall {
            report.push_str(&format!(" valid R{}@1 {r:.4}", cfg.valid_group));
        }
        report.push('\n');
    }
    report.push_str(&format!(
        "{} steps; checkpoint {}{}\n",
        outcome.steps,
        ckpt.display(),
        outcome.best_epoch.map(|e| format!(" (epoch {e})")).unwrap_or_default()
    ));
    emit(out, &report)
}

fn expected_integration(cfg: &RunConfig) -> Option<Integration> {
    cfg.is_explicit("integration").then_some(cfg.model.integration)
}

fn load_model<F: Scalar>(cfg: &RunConfig, vocab: &Vocabulary) -> Result<(S2mModel, ParamStore<F>), CliError> {
    let (model, store) = checkpoint::load::<F>(required(&cfg.checkpoint, "checkpoint")?, expected_integration(cfg))?;
    if model.config.vocab_size != vocab.len() {
        return Err(CliError::Usage(format!(
            "vocabulary has {} entries but the checkpoint was trained with {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    Ok((model, store))
}

/// Scores candidates together; the scores of one candidate do not depend on
/// which others share its batch.
pub fn score_candidates<F: Scalar>(
    model: &S2mModel,
    store: &ParamStore<F>,
    samples: &[EncodedSample],
    pool: Option<&rayon::ThreadPool>,
) -> Result<Vec<Scores>, CliError> {
    let batch = make_batch(samples, model.config.max_turns, model.config.max_len);
    Ok(model.score_batch(store, &batch, pool)?)
}

/// Scores every session with `scorer` and aggregates the metrics.
pub fn evaluate_sessions<S>(sessions: &[SessionSamples], mut scorer: S) -> Result<(Vec<Vec<Scores>>, MetricReport), CliError>
where
    S: FnMut(&SessionSamples) -> Result<Vec<Scores>, CliError>,
{
    let mut all = Vec::with_capacity(sessions.len());
    let mut evals = Vec::with_capacity(sessions.len());
    for s in sessions {
        let scores = scorer(s)?;
        if scores.len() != s.samples.len() {
            return Err(CliError::Data(format!("session {}: scorer returned {} scores", s.id, scores.len())));
        }
        let turns = s.samples.first().map_or(0, |c| c.context.len());
        let candidates = scores.iter().zip(&s.samples).map(|(g, c)| (g.total, c.label)).collect();
        evals.push(EvalSession::new(s.id.clone(), candidates, turns));
        all.push(scores);
    }
    let report = aggregate(&evals)?;
    Ok((all, report))
}

fn join_stacks(s: &Scores) -> String {
    s.per_stack.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(",")
}

/// Optional files written by `evaluate` next to its printed table.
#[derive(Debug, Clone, Copy, Default)]
pub struct Exports<'a> {
    pub scores: Option<&'a Path>,
    pub report: Option<&'a Path>,
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn evaluate(cfg: &RunConfig, exports: &Exports<'_>, out: &mut dyn Write) -> Result<(), CliError> {
    match cfg.precision {
        Precision::F32 => evaluate_as::<f32>(cfg, exports, out),
        Precision::F64 => evaluate_as::<f64>(cfg, exports, out),
    }
}

fn evaluate_as<F: Scalar>(cfg: &RunConfig, exports: &Exports<'_>, out: &mut dyn Write) -> Result<(), CliError> {
    let vocab = load_vocab(cfg)?;
    let (model, store) = load_model::<F>(cfg, &vocab)?;
    let sessions = read_sessions(required(&cfg.test, "test")?, &cfg.group_mode())?;
    let pool = thread_pool(cfg.workers)?;
    let started = Instant::now();
    let (scores, report) = evaluate_sessions(&sessions, |s| {
        let enc: Vec<EncodedSample> = s.samples.iter().map(|c| vocab.encode_sample(c)).collect();
        score_candidates(&model, &store, &enc, pool.as_ref())
    })?;
    info!("scored {} sessions in {:.1?}", sessions.len(), started.elapsed());
    if let Some(path) = exports.scores {
        let mut text = String::from("session\tcandidate\tlabel\tscore\tstacks\n");
        for (s, sc) in sessions.iter().zip(&scores) {
            for (i, (c, g)) in s.samples.iter().zip(sc).enumerate() {
                text.push_str(&format!("{}\t{i}\t{}\t{}\t{}\n", s.id, c.label, g.total, join_stacks(g)));
            }
        }
        write_file(path, &text)?;
    }
    if let Some(path) = exports.report {
        write_file(path, &report.to_key_values())?;
    }
    emit(out, &report.to_table())
}

/// Splits `|||`-separated utterances into tokens, dropping empty turns.
pub fn parse_context(text: &str) -> Vec<Vec<String>> {
    text.split("|||")
        .map(|u| u.split_whitespace().map(str::to_owned).collect::<Vec<_>>())
        .filter(|u| !u.is_empty())
        .collect()
}

pub fn rank(cfg: &RunConfig, context: &str, candidates: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    match cfg.precision {
        Precision::F32 => rank_as::<f32>(cfg, context, candidates, out),
        Precision::F64 => rank_as::<f64>(cfg, context, candidates, out),
    }
}

fn rank_as<F: Scalar>(cfg: &RunConfig, context: &str, candidates: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let turns = parse_context(context);
    if turns.is_empty() {
        return Err(CliError::Usage("context has no tokens".into()));
    }
    let text = std::fs::read_to_string(candidates)
        .map_err(|e| CliError::Data(format!("{}: {e}", candidates.display())))?;
    let responses: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if responses.is_empty() {
        return Err(CliError::Data(format!("{}: no candidates", candidates.display())));
    }
    let vocab = load_vocab(cfg)?;
    let (model, store) = load_model::<F>(cfg, &vocab)?;
    let context: Vec<Vec<u32>> = turns.iter().map(|u| vocab.encode(u)).collect();
    let samples: Vec<EncodedSample> = responses
        .iter()
        .map(|r| EncodedSample {
            label: 0,
            context: context.clone(),
            response: vocab.encode(&r.split_whitespace().map(str::to_owned).collect::<Vec<_>>()),
        })
        .collect();
    let pool = thread_pool(cfg.workers)?;
    let scores = score_candidates(&model, &store, &samples, pool.as_ref())?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total.total_cmp(&scores[a].total));
    let mut report = String::new();
    for (rank, &i) in order.iter().enumerate() {
        report.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            rank + 1,
            scores[i].total,
            join_stacks(&scores[i]),
            responses[i]
        ));
    }
    emit(out, &report)
}

/// Toy model sizes used by the gradient check.
pub const GRAD_CHECK_DIM: usize = 8;
pub const GRAD_CHECK_STACKS: usize = 2;

pub fn grad_check_configs(cfg: &RunConfig, fault: Option<f64>) -> Vec<GradCheckConfig> {
    let defaults = GradCheckConfig::default();
    let base = GradCheckConfig {
        dim: GRAD_CHECK_DIM,
        stacks: GRAD_CHECK_STACKS,
        seed: if cfg.is_explicit("seed") { cfg.seed } else { defaults.seed },
        fault,
        ..defaults
    };
    all_combinations(&base)
        .into_iter()
        .filter(|c| !cfg.is_explicit("integration") || c.integration == cfg.model.integration)
        .filter(|c| !cfg.is_explicit("self_rep") || c.self_rep == cfg.model.self_rep)
        .filter(|c| !cfg.is_explicit("pooling") || c.pooling == cfg.model.pooling)
        .collect()
}

pub fn grad_check(cfg: &RunConfig, fault: Option<f64>, out: &mut dyn Write) -> Result<(), CliError> {
    if cfg.precision == Precision::F32 && cfg.is_explicit("precision") {
        warn!("the gradient check always runs in 64-bit precision");
    }
    let started = Instant::now();
    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    for c in grad_check_configs(cfg, fault) {
        let report = check(&c)?;
        worst = worst.max(report.max_error());
        if report.passed() {
            emit(out, &format!("{}: ok, max relative error {:.3e}\n", report.label(), report.max_error()))?;
        } else {
            emit(out, &report.to_string())?;
            failed.push(report.label());
        }
    }
    emit(
        out,
        &format!("worst relative error {worst:.3e} in {:.1?}\n", started.elapsed()),
    )?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use s2m::data::DialogueSample;

    #[test]
    fn context_splitting() {
        assert_eq!(
            parse_context("hi there ||| how are you|||  ||| ok"),
            vec![vec!["hi", "there"], vec!["how", "are", "you"], vec!["ok"]]
        );
        assert!(parse_context(" ||| ").is_empty());
    }

    fn session(id: &str, labels: &[u8]) -> SessionSamples {
        SessionSamples {
            id: id.into(),
            samples: labels
                .iter()
                .map(|&label| DialogueSample {
                    label,
                    context: vec![vec!["a".into()]],
                    response: vec!["b".into()],
                })
                .collect(),
        }
    }

    #[test]
    fn oracle_scorer_gets_perfect_recall() {
        let sessions: Vec<_> = (0..5).map(|i| session(&i.to_string(), &[1, 0, 0, 0, 0, 0, 0, 0, 0, 0])).collect();
        let oracle = |s: &SessionSamples| {
            Ok(s.samples
                .iter()
                .enumerate()
                .map(|(i, _)| Scores {
                    total: if i == 0 { 1.0 } else { 0.0 },
                    per_stack: vec![if i == 0 { 1.0 } else { 0.0 }],
                })
                .collect())
        };
        let (_, report) = evaluate_sessions(&sessions, oracle).unwrap();
        assert_eq!(report.overall.recall[0], (1, 1.0));
        assert_eq!(report.overall.map, 1.0);
    }

    #[test]
    fn grad_check_sweep_narrows_to_explicit_choices() {
        let all = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(grad_check_configs(&all, None).len(), 36);
        let some = RunConfig::resolve(None, &[("integration".into(), "i3".into())]).unwrap();
        let picked = grad_check_configs(&some, None);
        assert_eq!(picked.len(), 9);
        assert!(picked.iter().all(|c| c.integration == Integration::I3 && c.dim == 8));
    }
}
