use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2m::autograd::Tape;
use s2m::data::{make_batch, EmbeddingTable, EncodedSample};
use s2m::layers::Pooling;
use s2m::model::{aggregate_stack, SampleView, StackHead};
use s2m::params::ParamStore;
use s2m::{ModelConfig, S2mModel, Tensor};

const VOCAB: usize = 30;

fn config(stacks: usize, pooling: Pooling) -> ModelConfig {
    ModelConfig {
        stacks,
        embed_dim: 8,
        hidden: 8,
        vocab_size: VOCAB,
        max_turns: 4,
        max_len: 7,
        pooling,
        word_filters: 4,
        ..ModelConfig::default()
    }
}

fn build(cfg: ModelConfig, seed: u64) -> (S2mModel, ParamStore<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = EmbeddingTable::<f32>::random(cfg.vocab_size, cfg.embed_dim, &mut rng);
    S2mModel::new(cfg, table.matrix, seed).unwrap()
}

fn random_sample(rng: &mut ChaCha8Rng, max_turns: usize, max_len: usize) -> EncodedSample {
    let seq = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        (0..rng.gen_range(1..=max_len)).map(|_| rng.gen_range(1..VOCAB as u32)).collect()
    };
    EncodedSample {
        label: rng.gen_range(0..2),
        context: (0..rng.gen_range(1..=max_turns)).map(|_| seq(rng)).collect(),
        response: seq(rng),
    }
}

fn score(model: &S2mModel, store: &ParamStore<f32>, s: &EncodedSample) -> s2m::model::Scores {
    let batch = make_batch(std::slice::from_ref(s), model.config.max_turns, model.config.max_len);
    model.score_view(store, &SampleView::from_batch(&batch, 0)).unwrap()
}

#[test]
fn stack_scores_are_in_range_and_sum_exactly() {
    let (model, store) = build(config(3, Pooling::Max), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let s = score(&model, &store, &random_sample(&mut rng, 4, 7));
        assert_eq!(s.per_stack.len(), 3);
        assert!(s.per_stack.iter().all(|&g| g > 0.0 && g < 1.0));
        assert_eq!(s.total, s.per_stack.iter().sum::<f64>());
        assert!(s.total > 0.0 && s.total < 3.0);
    }
}

#[test]
fn single_stack_score_is_its_stack() {
    let (model, store) = build(config(1, Pooling::Mean), 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = score(&model, &store, &random_sample(&mut rng, 4, 7));
    assert_eq!(s.per_stack.len(), 1);
    assert_eq!(s.total, s.per_stack[0]);
}

fn zero_scorers(model: &S2mModel, store: &mut ParamStore<f32>) {
    for head in &model.heads {
        store.assign(head.score.weight, Tensor::zeros(vec![model.config.hidden, 1])).unwrap();
        store.assign(head.score.bias, Tensor::zeros(vec![1])).unwrap();
    }
}

#[test]
fn half_scores_sum_to_half_the_stack_count() {
    let (model, mut store) = build(config(7, Pooling::Max), 5);
    zero_scorers(&model, &mut store);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = score(&model, &store, &random_sample(&mut rng, 4, 7));
    assert_eq!(s.total, 3.5);
}

#[test]
fn loss_closed_form_at_half() {
    let (model, mut store) = build(config(7, Pooling::Max), 7);
    zero_scorers(&model, &mut store);
    let sample = EncodedSample {
        label: 1,
        context: vec![vec![2, 3], vec![4]],
        response: vec![5, 6, 7],
    };
    let batch = make_batch(&[sample], 4, 7);
    let mut tape = Tape::with_params(&store);
    let loss = model.batch_loss(&mut tape, &batch).unwrap();
    let v = tape.value(loss).data()[0] as f64;
    assert!((v - 7.0 * std::f64::consts::LN_2).abs() < 1e-6, "{v}");
}

#[test]
fn saturated_positive_has_near_zero_loss() {
    let (model, mut store) = build(config(2, Pooling::Max), 8);
    zero_scorers(&model, &mut store);
    for head in &model.heads {
        store.assign(head.score.bias, Tensor::from_f64(vec![1], &[40.0]).unwrap()).unwrap();
    }
    let batch = make_batch(
        &[EncodedSample {
            label: 1,
            context: vec![vec![2]],
            response: vec![3],
        }],
        4,
        7,
    );
    let mut tape = Tape::with_params(&store);
    let loss = model.batch_loss(&mut tape, &batch).unwrap();
    assert!(tape.value(loss).data()[0] < 1e-5);
}

#[test]
fn zero_scorer_head_gives_half_for_any_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = config(1, Pooling::Max);
    let (model, mut full) = S2mModel::new::<f64>(
        cfg,
        EmbeddingTable::<f64>::random(VOCAB, 8, &mut rng).matrix,
        1,
    )
    .unwrap();
    let head: &StackHead = &model.heads[0];
    full.assign(head.score.weight, Tensor::zeros(vec![8, 1])).unwrap();
    let mut tape = Tape::with_params(&full);
    let feats: Vec<_> = (0..3)
        .map(|i| tape.constant(Tensor::filled(vec![1, 8], i as f64 - 1.0)))
        .collect();
    let g = aggregate_stack(&mut tape, &feats, head).unwrap();
    assert_eq!(tape.value(g).data(), &[0.5]);
    assert!(aggregate_stack(&mut tape, &[], head).is_err());
}

#[test]
fn single_turn_state_is_one_gru_step() {
    let cfg = config(1, Pooling::Max);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (model, store) =
        S2mModel::new::<f64>(cfg, EmbeddingTable::<f64>::random(VOCAB, 8, &mut rng).matrix, 2).unwrap();
    let head = &model.heads[0];
    let mut tape = Tape::with_params(&store);
    let m = tape.constant(Tensor::from_f64(vec![1, 8], &[0.3, -0.2, 0.5, 0.0, 1.0, -1.0, 0.25, 0.7]).unwrap());
    let g = aggregate_stack(&mut tape, &[m], head).unwrap();
    let h0 = head.gru.zero_state(&mut tape);
    let h1 = head.gru.step(&mut tape, h0, m).unwrap();
    let logit = head.score.forward(&mut tape, h1, s2m::layers::Activation::Identity).unwrap();
    let expect = tape.sigmoid(logit);
    assert_eq!(tape.value(g), tape.value(expect));
}

#[test]
fn cross_disabled_utterances_ignore_the_response() {
    let cfg = ModelConfig {
        cross_rep_enabled: false,
        ..config(3, Pooling::Max)
    };
    let (model, store) = build(cfg, 11);
    let context = vec![vec![2, 3, 4, 5], vec![6, 7]];
    let reps = |response: Vec<u32>| {
        let batch = make_batch(
            &[EncodedSample {
                label: 1,
                context: context.clone(),
                response,
            }],
            4,
            7,
        );
        let view = SampleView::from_batch(&batch, 0);
        let mut tape = Tape::with_params(&store);
        let fwd = model.forward(&mut tape, &view).unwrap();
        // rows past the utterance length are padding and depend on the batch width
        fwd.utterance_reps
            .iter()
            .zip(&context)
            .flat_map(|(reps, u)| reps.iter().map(move |&v| (v, u.len() * 8)))
            .map(|(v, real)| tape.value(v).data()[..real].iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    assert_eq!(reps(vec![8, 9, 10]), reps(vec![20, 21, 22, 23, 24, 25, 26]));
}

#[test]
fn cross_enabled_utterances_do_depend_on_the_response() {
    let (model, store) = build(config(2, Pooling::Max), 11);
    let mk = |response: Vec<u32>| {
        make_batch(
            &[EncodedSample {
                label: 1,
                context: vec![vec![2, 3, 4]],
                response,
            }],
            4,
            7,
        )
    };
    let (a, b) = (mk(vec![8, 9]), mk(vec![20, 21]));
    let rep = |batch: &s2m::data::Batch| {
        let mut tape = Tape::with_params(&store);
        let fwd = model.forward(&mut tape, &SampleView::from_batch(batch, 0)).unwrap();
        tape.value(fwd.utterance_reps[0][0]).clone()
    };
    assert_ne!(rep(&a), rep(&b));
}

#[test]
fn extra_padding_and_batch_neighbours_change_nothing() {
    let (model, store) = build(config(2, Pooling::Gru), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let s = random_sample(&mut rng, 2, 4);
    let long = EncodedSample {
        label: 0,
        context: vec![vec![3; 7]; 4],
        response: vec![4; 7],
    };
    let alone = make_batch(std::slice::from_ref(&s), 4, 7);
    let mixed = make_batch(&[long, s.clone()], 4, 7);
    let a = model.score_view(&store, &SampleView::from_batch(&alone, 0)).unwrap();
    let b = model.score_view(&store, &SampleView::from_batch(&mixed, 1)).unwrap();
    assert_eq!(a, b);
}

fn perturb_padding(batch: &mut s2m::data::Batch, rng: &mut ChaCha8Rng) {
    for (id, &m) in batch.utterance_ids.iter_mut().zip(&batch.utterance_mask) {
        if !m {
            *id = rng.gen_range(1..VOCAB as u32);
        }
    }
    for (id, &m) in batch.response_ids.iter_mut().zip(&batch.response_mask) {
        if !m {
            *id = rng.gen_range(1..VOCAB as u32);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn padding_is_invisible(seed in 0u64..10_000, pool_idx in 0usize..3) {
        let pooling = [Pooling::Max, Pooling::Mean, Pooling::Gru][pool_idx];
        let (model, mut store) = build(config(2, pooling), 21);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = random_sample(&mut rng, 4, 7);
        let mut batch = make_batch(std::slice::from_ref(&sample), 4, 7);
        let before = model.score_view(&store, &SampleView::from_batch(&batch, 0)).unwrap();

        perturb_padding(&mut batch, &mut rng);
        let row: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let emb = store.value_mut(model.embedding);
        for (x, v) in emb.data_mut()[..8].iter_mut().zip(&row) {
            *x = *v as f32;
        }
        let after = model.score_view(&store, &SampleView::from_batch(&batch, 0)).unwrap();
        prop_assert_eq!(before, after);
    }
}
