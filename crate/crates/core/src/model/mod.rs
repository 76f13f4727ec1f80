//! The sequential sentence matching network.
//!
//! Every (utterance, response) pair runs through `L` representation blocks.
//! After each block the fused representations are pooled into sentence
//! vectors and interacted into a matching feature; the features of one block
//! depth across turns are aggregated by that depth's GRU head into a score in
//! (0, 1). The final matching score is the sum over depths.

pub mod block;
pub mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::integration::{similarity_matrices, word_channel_feature, WordMatcher};
use crate::layers::{pool, Activation, Gru, Linear, Pooling};
use crate::params::{GradBuffers, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

use self::block::{apply_row_mask, block_transition, interaction, BlockOutput, RepBlock};
pub use self::config::{Integration, ModelConfig, SelfRepKind};

/// Probabilities are clamped to `[LOG_CLAMP, 1 − LOG_CLAMP]` inside the loss.
pub const LOG_CLAMP: f64 = 1e-7;

/// Pooling plus the interaction network `H`.
#[derive(Debug, Clone)]
pub struct MatchHead {
    pub pool_gru: Option<Gru>,
    pub interact: Linear,
}

/// Aggregation GRU over turns and the sigmoid scorer of one stack.
#[derive(Debug, Clone)]
pub struct StackHead {
    pub gru: Gru,
    pub score: Linear,
}

impl StackHead {
    fn new<F: Scalar, R: Rng>(store: &mut ParamStore<F>, rng: &mut R, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            gru: Gru::new(store, rng, &format!("{name}.gru"), input, hidden),
            score: Linear::new(store, rng, &format!("{name}.score"), hidden, 1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WordChannel {
    pub blocks: Vec<RepBlock>,
    pub matchers: Vec<WordMatcher>,
    /// Separate aggregation heads (I1, I2); empty when heads are shared (I3).
    pub heads: Vec<StackHead>,
    /// Per-block input mixers `[2d → d]` (I1 only).
    pub mixers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct S2mModel {
    pub config: ModelConfig,
    pub embedding: ParamId,
    pub blocks: Vec<RepBlock>,
    pub matchers: Vec<MatchHead>,
    pub heads: Vec<StackHead>,
    pub word: Option<WordChannel>,
}

/// Token ids and mask of one sequence.
#[derive(Debug, Clone, Copy)]
pub struct SeqView<'a> {
    pub ids: &'a [u32],
    pub mask: &'a [bool],
}

/// One sample's real turns and response, cropped to the batch content width.
#[derive(Debug, Clone)]
pub struct SampleView<'a> {
    pub turns: Vec<SeqView<'a>>,
    pub response: SeqView<'a>,
    pub label: u8,
}

impl<'a> SampleView<'a> {
    pub fn from_batch(batch: &'a Batch, b: usize) -> Self {
        let width = batch.content_width();
        let crop = |(ids, mask): (&'a [u32], &'a [bool])| SeqView {
            ids: &ids[..width],
            mask: &mask[..width],
        };
        let turns = batch
            .turn_mask(b)
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(t, _)| crop(batch.utterance(b, t)))
            .collect();
        Self {
            turns,
            response: crop(batch.response(b)),
            label: batch.labels[b],
        }
    }
}

/// Handles into one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `g^l` of the sentence channel (or of the shared heads under I3).
    pub sentence_scores: Vec<Var>,
    /// `g^l` of the word channel under I1/I2.
    pub word_scores: Vec<Var>,
    /// Sentence matching features, `[stack][turn]`.
    pub features: Vec<Vec<Var>>,
    /// Word matching features, `[stack][turn]`.
    pub word_features: Vec<Vec<Var>>,
    /// Fused utterance representations `Ũ`, `[turn][stack]`.
    pub utterance_reps: Vec<Vec<Var>>,
}

impl Forward {
    pub fn all_scores(&self) -> Vec<Var> {
        self.sentence_scores.iter().chain(&self.word_scores).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    /// `g = Σ per_stack`
    pub total: f64,
    /// Sentence-channel stacks first, then word-channel stacks under I1/I2.
    pub per_stack: Vec<f64>,
}

/// Gathers embedding rows; padded positions are zeroed.
pub fn embed<F: Scalar>(tape: &mut Tape<'_, F>, table: Var, seq: SeqView<'_>) -> Result<Var> {
    let e = tape.gather(table, seq.ids)?;
    apply_row_mask(tape, e, seq.mask)
}

/// `m = H([v_u, v_r, v_u − v_r, v_u ⊙ v_r])` on already pooled sentence vectors.
pub fn match_vectors<F: Scalar>(tape: &mut Tape<'_, F>, v_u: Var, v_r: Var, h: &Linear) -> Result<Var> {
    let inter = interaction(tape, v_u, v_r)?;
    h.forward(tape, inter, Activation::Relu)
}

/// Pools both fused representations and interacts them.
pub fn match_feature<F: Scalar>(
    tape: &mut Tape<'_, F>,
    u_fused: Var,
    r_fused: Var,
    u_mask: &[bool],
    r_mask: &[bool],
    head: &MatchHead,
    pooling: Pooling,
) -> Result<Var> {
    let v_u = pool(tape, u_fused, u_mask, pooling, head.pool_gru.as_ref())?;
    let v_r = pool(tape, r_fused, r_mask, pooling, head.pool_gru.as_ref())?;
    match_vectors(tape, v_u, v_r, &head.interact)
}

/// Runs the stack's GRU over the per-turn features (real turns only) and
/// scores the final state: `g^l = σ(W·h_final + b)`.
pub fn aggregate_stack<F: Scalar>(tape: &mut Tape<'_, F>, features: &[Var], head: &StackHead) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::InvalidMask("context has no real turns".into()));
    }
    let width = tape.value(features[0]).numel();
    let rows: Vec<Option<Var>> = features.iter().map(|&f| Some(f)).collect();
    let seq = tape.stack_rows(&rows, width)?;
    let h = head.gru.last_state(tape, seq, &vec![true; features.len()])?;
    let logit = head.score.forward(tape, h, Activation::Identity)?;
    Ok(tape.sigmoid(logit))
}

impl S2mModel {
    /// Registers all parameters in `store`. The embedding matrix must be
    /// `[vocab_size × embed_dim]`; everything else is initialized from `seed`.
    pub fn new<F: Scalar>(config: ModelConfig, embedding: Tensor<F>, seed: u64) -> Result<(Self, ParamStore<F>)> {
        config.validate()?;
        let d = config.embed_dim;
        let h = config.hidden;
        if embedding.shape() != [config.vocab_size, d] {
            return Err(Error::Shape {
                op: "embedding",
                lhs: embedding.shape().to_vec(),
                rhs: vec![config.vocab_size, d],
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = store.add("embedding", embedding, !config.freeze_embeddings);
        let integ = config.integration;

        let mut blocks = Vec::new();
        let mut matchers = Vec::new();
        for l in 0..config.stacks {
            let name = format!("sent.block{l}");
            blocks.push(RepBlock::new(
                &mut store,
                &mut rng,
                &name,
                d,
                config.kernel,
                config.self_rep,
                config.self_rep_enabled,
                config.cross_rep_enabled,
            )?);
            let pool_gru =
                (config.pooling == Pooling::Gru).then(|| Gru::new(&mut store, &mut rng, &format!("{name}.pool"), d, d));
            let sentence_width = if integ == Integration::I2 { 2 * d } else { d };
            let interact = Linear::new(&mut store, &mut rng, &format!("{name}.match"), 4 * sentence_width, h);
            matchers.push(MatchHead { pool_gru, interact });
        }

        let word = if integ.has_word_channel() {
            let channels = if integ == Integration::I2 { 4 } else { 2 };
            let mut w = WordChannel {
                blocks: Vec::new(),
                matchers: Vec::new(),
                heads: Vec::new(),
                mixers: Vec::new(),
            };
            for l in 0..config.stacks {
                let name = format!("word.block{l}");
                w.blocks.push(RepBlock::new(
                    &mut store,
                    &mut rng,
                    &name,
                    d,
                    config.kernel,
                    config.self_rep,
                    true,
                    true,
                )?);
                w.matchers.push(WordMatcher::new(
                    &mut store,
                    &mut rng,
                    &format!("{name}.match"),
                    channels,
                    config.word_filters,
                    h,
                ));
                if integ == Integration::I1 {
                    w.mixers
                        .push(Linear::new(&mut store, &mut rng, &format!("mix.block{l}"), 2 * d, d));
                }
            }
            Some(w)
        } else {
            None
        };

        let head_input = if integ == Integration::I3 { 2 * h } else { h };
        let heads = (0..config.stacks)
            .map(|l| StackHead::new(&mut store, &mut rng, &format!("sent.head{l}"), head_input, h))
            .collect();
        let mut word = word;
        if let Some(w) = word.as_mut() {
            if integ.separate_heads() {
                w.heads = (0..config.stacks)
                    .map(|l| StackHead::new(&mut store, &mut rng, &format!("word.head{l}"), h, h))
                    .collect();
            }
        }

        Ok((
            Self {
                config,
                embedding,
                blocks,
                matchers,
                heads,
                word,
            },
            store,
        ))
    }

    /// Number of per-stack scores: `2L` under I1/I2, `L` otherwise.
    pub fn score_count(&self) -> usize {
        if self.config.integration.separate_heads() {
            2 * self.config.stacks
        } else {
            self.config.stacks
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, sample: &SampleView<'_>) -> Result<Forward> {
        if sample.turns.is_empty() {
            return Err(Error::InvalidMask("context has no real turns".into()));
        }
        let cfg = &self.config;
        let integ = cfg.integration;
        let stacks = cfg.stacks;
        let table = tape.param(self.embedding);
        let rm = sample.response.mask;
        let e_r = embed(tape, table, sample.response)?;

        let mut features = vec![Vec::with_capacity(sample.turns.len()); stacks];
        let mut word_features = vec![Vec::with_capacity(sample.turns.len()); stacks];
        let mut utterance_reps = Vec::with_capacity(sample.turns.len());

        for turn in &sample.turns {
            let um = turn.mask;
            let e_u = embed(tape, table, *turn)?;
            let (mut u, mut r) = (e_u, e_r);
            let (mut uw, mut rw) = (e_u, e_r);
            let mut reps = Vec::with_capacity(stacks);
            for l in 0..stacks {
                if let Some(mixer) = self.word.as_ref().and_then(|w| w.mixers.get(l)) {
                    let cu = tape.concat_cols(&[u, uw])?;
                    let zu = mixer.forward(tape, cu, Activation::Identity)?;
                    u = apply_row_mask(tape, zu, um)?;
                    uw = u;
                    let cr = tape.concat_cols(&[r, rw])?;
                    let zr = mixer.forward(tape, cr, Activation::Identity)?;
                    r = apply_row_mask(tape, zr, rm)?;
                    rw = r;
                }
                let out = self.blocks[l].forward(tape, u, r, um, rm)?;
                reps.push(out.u_fused);
                let word_out = match &self.word {
                    Some(w) => Some(w.blocks[l].forward(tape, uw, rw, um, rm)?),
                    None => None,
                };

                let head = &self.matchers[l];
                let mut v_u = pool(tape, out.u_fused, um, cfg.pooling, head.pool_gru.as_ref())?;
                let mut v_r = pool(tape, out.r_fused, rm, cfg.pooling, head.pool_gru.as_ref())?;
                if let (Integration::I2, Some(wo)) = (integ, &word_out) {
                    let wu = pool(tape, wo.u_fused, um, cfg.pooling, head.pool_gru.as_ref())?;
                    let wr = pool(tape, wo.r_fused, rm, cfg.pooling, head.pool_gru.as_ref())?;
                    v_u = tape.concat_cols(&[v_u, wu])?;
                    v_r = tape.concat_cols(&[v_r, wr])?;
                }
                features[l].push(match_vectors(tape, v_u, v_r, &head.interact)?);

                if let (Some(w), Some(wo)) = (&self.word, &word_out) {
                    let mut pairs = similarity_pairs(wo)?;
                    if integ == Integration::I2 {
                        pairs.extend(similarity_pairs(&out)?);
                    }
                    let sims = similarity_matrices(tape, &pairs, um, rm)?;
                    word_features[l].push(word_channel_feature(tape, sims, um, rm, &w.matchers[l])?);
                }

                if l + 1 < stacks {
                    let norm = &self.blocks[l].norm;
                    let (nu, nr) = (
                        block_transition(tape, out.u_fused, u, e_u, norm, um)?,
                        block_transition(tape, out.r_fused, r, e_r, norm, rm)?,
                    );
                    if let (Some(w), Some(wo)) = (&self.word, &word_out) {
                        let wnorm = &w.blocks[l].norm;
                        uw = block_transition(tape, wo.u_fused, uw, e_u, wnorm, um)?;
                        rw = block_transition(tape, wo.r_fused, rw, e_r, wnorm, rm)?;
                    }
                    u = nu;
                    r = nr;
                }
            }
            utterance_reps.push(reps);
        }

        let mut sentence_scores = Vec::with_capacity(stacks);
        let mut word_scores = Vec::new();
        for l in 0..stacks {
            if integ == Integration::I3 {
                let joined = features[l]
                    .iter()
                    .zip(&word_features[l])
                    .map(|(&m, &w)| tape.concat_cols(&[m, w]))
                    .collect::<Result<Vec<_>>>()?;
                sentence_scores.push(aggregate_stack(tape, &joined, &self.heads[l])?);
            } else {
                sentence_scores.push(aggregate_stack(tape, &features[l], &self.heads[l])?);
            }
            if let Some(w) = &self.word {
                if let Some(head) = w.heads.get(l) {
                    word_scores.push(aggregate_stack(tape, &word_features[l], head)?);
                }
            }
        }

        Ok(Forward {
            sentence_scores,
            word_scores,
            features,
            word_features,
            utterance_reps,
        })
    }

    /// `Σ_l BCE(g^l, y)` over every stack score of one sample.
    pub fn sample_loss<F: Scalar>(&self, tape: &mut Tape<'_, F>, fwd: &Forward, label: u8) -> Result<Var> {
        let terms = fwd
            .all_scores()
            .into_iter()
            .map(|g| tape.bce(g, label as f64, LOG_CLAMP))
            .collect::<Result<Vec<_>>>()?;
        tape.add_all(&terms)
    }

    /// Batch loss on a single tape: per-sample stack sums, averaged over samples.
    pub fn batch_loss<F: Scalar>(&self, tape: &mut Tape<'_, F>, batch: &Batch) -> Result<Var> {
        let mut per_sample = Vec::with_capacity(batch.size);
        for b in 0..batch.size {
            let view = SampleView::from_batch(batch, b);
            let fwd = self.forward(tape, &view)?;
            per_sample.push(self.sample_loss(tape, &fwd, view.label)?);
        }
        let total = tape.add_all(&per_sample)?;
        Ok(tape.scale(total, 1.0 / batch.size as f64))
    }

    pub fn score_view<F: Scalar>(&self, store: &ParamStore<F>, view: &SampleView<'_>) -> Result<Scores> {
        let mut tape = Tape::with_params(store);
        let fwd = self.forward(&mut tape, view)?;
        let per_stack: Vec<f64> = fwd
            .all_scores()
            .into_iter()
            .map(|g| tape.value(g).data()[0].as_f64())
            .collect();
        let total = per_stack.iter().sum();
        Ok(Scores { total, per_stack })
    }

    /// Scores every sample of a batch; with a pool, samples are spread over
    /// its threads and results are returned in batch order.
    pub fn score_batch<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        batch: &Batch,
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<Vec<Scores>> {
        let one = |b: usize| self.score_view(store, &SampleView::from_batch(batch, b));
        match pool {
            Some(pool) => pool.install(|| (0..batch.size).into_par_iter().map(one).collect()),
            None => (0..batch.size).map(one).collect(),
        }
    }

    fn sample_grads<F: Scalar>(&self, store: &ParamStore<F>, batch: &Batch, b: usize) -> Result<(f64, GradBuffers<F>)> {
        let mut grads = GradBuffers::new(store.len());
        let loss = self.accumulate_sample(store, batch, b, &mut grads)?;
        Ok((loss, grads))
    }

    fn accumulate_sample<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        batch: &Batch,
        b: usize,
        into: &mut GradBuffers<F>,
    ) -> Result<f64> {
        let view = SampleView::from_batch(batch, b);
        let mut tape = Tape::with_params(store);
        let fwd = self.forward(&mut tape, &view)?;
        let loss = self.sample_loss(&mut tape, &fwd, view.label)?;
        let grads = tape.backward(loss)?;
        tape.param_grads(&grads, F::of(1.0 / batch.size as f64), into);
        Ok(tape.value(loss).data()[0].as_f64())
    }

    /// Mean batch loss and its gradients. Per-sample graphs are independent;
    /// gradients are always reduced in sample order, so results do not depend
    /// on the number of threads.
    pub fn loss_and_grads<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        batch: &Batch,
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<(f64, GradBuffers<F>)> {
        if batch.size == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut grads = GradBuffers::new(store.len());
        let mut loss = 0.0;
        match pool {
            Some(pool) => {
                let parts: Vec<(f64, GradBuffers<F>)> = pool.install(|| {
                    (0..batch.size)
                        .into_par_iter()
                        .map(|b| self.sample_grads(store, batch, b))
                        .collect::<Result<_>>()
                })?;
                for (l, g) in &parts {
                    loss += l;
                    grads.merge(g);
                }
            }
            None => {
                for b in 0..batch.size {
                    loss += self.accumulate_sample(store, batch, b, &mut grads)?;
                }
            }
        }
        Ok((loss / batch.size as f64, grads))
    }
}

fn similarity_pairs(out: &BlockOutput) -> Result<Vec<(Var, Var)>> {
    match (out.u_bar, out.r_bar, out.u_hat, out.r_hat) {
        (Some(ub), Some(rb), Some(uh), Some(rh)) => Ok(vec![(ub, rb), (uh, rh)]),
        _ => Err(Error::Config(
            "word similarity needs both self- and cross-representations".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_batch, EncodedSample};

    fn tiny(integration: Integration) -> ModelConfig {
        ModelConfig {
            stacks: 2,
            embed_dim: 4,
            hidden: 4,
            vocab_size: 12,
            word_filters: 3,
            integration,
            ..ModelConfig::default()
        }
    }

    fn table(cfg: &ModelConfig) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        crate::data::EmbeddingTable::<f64>::random(cfg.vocab_size, cfg.embed_dim, &mut rng).matrix
    }

    fn sample() -> EncodedSample {
        EncodedSample {
            label: 1,
            context: vec![vec![2, 3, 4], vec![5, 6]],
            response: vec![7, 8, 9, 10],
        }
    }

    #[test]
    fn score_counts_per_strategy() {
        for (integ, count) in [
            (Integration::Pure, 2),
            (Integration::I1, 4),
            (Integration::I2, 4),
            (Integration::I3, 2),
        ] {
            let cfg = tiny(integ);
            let (model, store) = S2mModel::new(cfg.clone(), table(&cfg), 1).unwrap();
            let batch = make_batch(&[sample()], 15, 50);
            let s = model.score_view(&store, &SampleView::from_batch(&batch, 0)).unwrap();
            assert_eq!(s.per_stack.len(), count);
            assert_eq!(model.score_count(), count);
            assert!(s.per_stack.iter().all(|&g| g > 0.0 && g < 1.0));
            assert_eq!(s.total, s.per_stack.iter().sum::<f64>());
        }
    }

    #[test]
    fn zero_scorer_gives_half() {
        let cfg = tiny(Integration::Pure);
        let (model, mut store) = S2mModel::new(cfg.clone(), table(&cfg), 1).unwrap();
        for head in &model.heads {
            store.assign(head.score.weight, Tensor::zeros(vec![4, 1])).unwrap();
        }
        let batch = make_batch(&[sample()], 15, 50);
        let s = model.score_view(&store, &SampleView::from_batch(&batch, 0)).unwrap();
        assert_eq!(s.per_stack, vec![0.5, 0.5]);
        assert_eq!(s.total, 1.0);
    }

    #[test]
    fn embedding_shape_is_checked() {
        let cfg = tiny(Integration::Pure);
        let bad = Tensor::<f64>::zeros(vec![cfg.vocab_size, 5]);
        assert!(matches!(S2mModel::new(cfg, bad, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let cfg = tiny(Integration::Pure);
        let (model, store) = S2mModel::new(cfg.clone(), table(&cfg), 1).unwrap();
        let mut s = sample();
        s.response[0] = 99;
        let batch = make_batch(&[s], 15, 50);
        let err = model.score_view(&store, &SampleView::from_batch(&batch, 0)).unwrap_err();
        assert!(matches!(err, Error::IdOutOfRange { id: 99, .. }));
    }
}
