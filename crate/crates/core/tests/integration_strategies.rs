use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s2m::autograd::Tape;
use s2m::data::{make_batch, Batch, EmbeddingTable, EncodedSample};
use s2m::model::{Forward, Integration, SampleView, LOG_CLAMP};
use s2m::params::ParamStore;
use s2m::{ModelConfig, S2mModel, Tensor};

const D: usize = 6;
const FILTERS: usize = 3;

fn build(integration: Integration, seed: u64) -> (S2mModel, ParamStore<f64>) {
    let cfg = ModelConfig {
        stacks: 2,
        embed_dim: D,
        hidden: D,
        vocab_size: 20,
        max_turns: 3,
        max_len: 6,
        word_filters: FILTERS,
        integration,
        ..ModelConfig::default()
    };
    let table = EmbeddingTable::<f64>::random(20, D, &mut ChaCha8Rng::seed_from_u64(99)).matrix;
    S2mModel::new(cfg, table, seed).unwrap()
}

/// Copies every parameter whose name and shape match.
fn copy_shared(from: &ParamStore<f64>, to: &mut ParamStore<f64>) {
    for (_, e) in from.iter() {
        if let Some(id) = to.find(&e.name) {
            if to.value(id).shape() == e.value.shape() {
                to.assign(id, e.value.clone()).unwrap();
            }
        }
    }
}

/// Writes `src` into the top-left corner of an otherwise zero tensor of `shape`.
fn embed_top_left(src: &Tensor<f64>, shape: Vec<usize>) -> Tensor<f64> {
    let (r, c) = (src.shape()[0], src.shape()[1]);
    let cols = shape[1];
    let mut out = Tensor::zeros(shape);
    for i in 0..r {
        out.data_mut()[i * cols..i * cols + c].copy_from_slice(&src.data()[i * c..(i + 1) * c]);
    }
    out
}

fn batch() -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<EncodedSample> = (0..3)
        .map(|i| EncodedSample {
            label: (i % 2) as u8,
            context: (0..1 + i).map(|_| (0..rng.gen_range(2..=6)).map(|_| rng.gen_range(1..20)).collect()).collect(),
            response: (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(1..20)).collect(),
        })
        .collect();
    make_batch(&samples, 3, 6)
}

fn values(tape: &Tape<'_, f64>, vars: &[s2m::autograd::Var]) -> Vec<Vec<f64>> {
    vars.iter().map(|&v| tape.value(v).data().to_vec()).collect()
}

fn run<T>(model: &S2mModel, store: &ParamStore<f64>, b: usize, f: impl FnOnce(&Tape<'_, f64>, &Forward) -> T) -> T {
    let batch = batch();
    let mut tape = Tape::with_params(store);
    let fwd = model.forward(&mut tape, &SampleView::from_batch(&batch, b)).unwrap();
    f(&tape, &fwd)
}

#[test]
fn i1_with_sentence_selecting_mixers_matches_pure() {
    let (pure, pure_store) = build(Integration::Pure, 1);
    let (i1, mut store) = build(Integration::I1, 2);
    copy_shared(&pure_store, &mut store);
    let mut eye = Tensor::zeros(vec![2 * D, D]);
    for i in 0..D {
        eye.data_mut()[i * D + i] = 1.0;
    }
    for mixer in &i1.word.as_ref().unwrap().mixers {
        store.assign(mixer.weight, eye.clone()).unwrap();
        store.assign(mixer.bias, Tensor::zeros(vec![D])).unwrap();
    }
    for b in 0..3 {
        let want = run(&pure, &pure_store, b, |t, f| values(t, &f.sentence_scores));
        let got = run(&i1, &store, b, |t, f| values(t, &f.sentence_scores));
        assert_eq!(got, want);
        let words = run(&i1, &store, b, |t, f| values(t, &f.word_scores));
        assert_eq!(words.len(), 2);
        assert!(words.iter().flatten().all(|&g| g > 0.0 && g < 1.0));
    }
}

#[test]
fn i2_without_cross_channel_terms_matches_standalone_channels() {
    let (pure, pure_store) = build(Integration::Pure, 1);
    let (i3, i3_store) = build(Integration::I3, 3);
    let (i2, mut store) = build(Integration::I2, 4);
    copy_shared(&i3_store, &mut store);
    copy_shared(&pure_store, &mut store);
    for l in 0..2 {
        // H sees [v_u, w_u] and [v_r, w_r]; keep only the sentence parts
        let h = &i2.matchers[l].interact;
        let pure_h = pure_store.value(pure.matchers[l].interact.weight);
        let mut w = Tensor::zeros(vec![8 * D, D]);
        for block in 0..4 {
            for i in 0..D {
                let src = &pure_h.data()[(block * D + i) * D..(block * D + i + 1) * D];
                // interaction blocks are [u, r, u − r, u ⊙ r], each 2D wide
                let row = block * 2 * D + i;
                w.data_mut()[row * D..(row + 1) * D].copy_from_slice(src);
            }
        }
        store.assign(h.weight, w).unwrap();
        store.assign(h.bias, pure_store.value(pure.matchers[l].interact.bias).clone()).unwrap();

        let conv = i2.word.as_ref().unwrap().matchers[l].conv;
        let i3_conv = i3_store.value(i3.word.as_ref().unwrap().matchers[l].conv);
        store.assign(conv, embed_top_left(i3_conv, vec![FILTERS, 36])).unwrap();
    }
    for b in 0..3 {
        let want = run(&pure, &pure_store, b, |t, f| values(t, &f.features.concat()));
        let got = run(&i2, &store, b, |t, f| values(t, &f.features.concat()));
        assert_eq!(got, want);
        let want = run(&i3, &i3_store, b, |t, f| values(t, &f.word_features.concat()));
        let got = run(&i2, &store, b, |t, f| values(t, &f.word_features.concat()));
        assert_eq!(got, want);
    }
}

#[test]
fn i2_similarity_stack_has_four_channels() {
    let (i2, _) = build(Integration::I2, 1);
    let (i3, _) = build(Integration::I3, 1);
    assert_eq!(i2.word.as_ref().unwrap().matchers[0].channels, 4);
    assert_eq!(i3.word.as_ref().unwrap().matchers[0].channels, 2);
}

#[test]
fn i3_with_silenced_word_half_matches_pure() {
    let (pure, pure_store) = build(Integration::Pure, 1);
    let (i3, mut store) = build(Integration::I3, 6);
    copy_shared(&pure_store, &mut store);
    for l in 0..2 {
        let m = &i3.word.as_ref().unwrap().matchers[l];
        store.assign(m.proj.weight, Tensor::zeros(vec![FILTERS, D])).unwrap();
        store.assign(m.proj.bias, Tensor::zeros(vec![D])).unwrap();
        for gate in 0..3 {
            let id = i3.heads[l].gru.input[gate];
            assert_eq!(store.value(id).shape(), &[2 * D, D]);
            let src = pure_store.value(pure.heads[l].gru.input[gate]);
            store.assign(id, embed_top_left(src, vec![2 * D, D])).unwrap();
        }
    }
    for b in 0..3 {
        let want = run(&pure, &pure_store, b, |t, f| values(t, &f.sentence_scores));
        let (got, words) = run(&i3, &store, b, |t, f| (values(t, &f.sentence_scores), f.word_scores.len()));
        assert_eq!(got, want);
        assert_eq!(words, 0);
    }
}

#[test]
fn separate_head_losses_add_up() {
    for integ in [Integration::I1, Integration::I2] {
        let (model, store) = build(integ, 8);
        let batch = batch();
        for b in 0..batch.size {
            let view = SampleView::from_batch(&batch, b);
            let mut tape = Tape::with_params(&store);
            let fwd = model.forward(&mut tape, &view).unwrap();
            let loss = model.sample_loss(&mut tape, &fwd, view.label).unwrap();
            let y = view.label as f64;
            let bce = |g: f64| {
                let g = g.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                -(y * g.ln() + (1.0 - y) * (1.0 - g).ln())
            };
            let part = |vars: &[s2m::autograd::Var]| vars.iter().map(|&v| bce(tape.value(v).data()[0])).sum::<f64>();
            let expect = part(&fwd.sentence_scores) + part(&fwd.word_scores);
            assert!((tape.value(loss).data()[0] - expect).abs() < 1e-12, "{integ}");
        }
    }
}

#[test]
fn every_strategy_ignores_padding() {
    for integ in Integration::ALL {
        let (model, mut store) = build(integ, 10);
        let mut batch = batch();
        let before: Vec<_> = (0..batch.size)
            .map(|b| model.score_view(&store, &SampleView::from_batch(&batch, b)).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (id, &m) in batch.utterance_ids.iter_mut().zip(&batch.utterance_mask) {
            if !m {
                *id = rng.gen_range(1..20);
            }
        }
        for x in &mut store.value_mut(model.embedding).data_mut()[..D] {
            *x = rng.gen_range(-1.0..1.0);
        }
        let after: Vec<_> = (0..batch.size)
            .map(|b| model.score_view(&store, &SampleView::from_batch(&batch, b)).unwrap())
            .collect();
        assert_eq!(before, after, "{integ}");
    }
}

#[test]
fn checkpoints_refuse_other_strategies() {
    let (model, store) = build(Integration::I3, 1);
    let bytes = s2m::checkpoint::to_bytes(&model, &store);
    assert!(s2m::checkpoint::from_bytes::<f64>(&bytes, Some(Integration::I1)).is_err());
    let (back, _) = s2m::checkpoint::from_bytes::<f64>(&bytes, Some(Integration::I3)).unwrap();
    assert_eq!(back.score_count(), 2);
}
