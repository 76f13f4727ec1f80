//! Generated dialogue corpora for smoke tests and learning checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::DialogueSample;

fn words(prefix: &str, idx: &[usize]) -> Vec<String> {
    idx.iter().map(|i| format!("{prefix}{i}")).collect()
}

/// `contexts` dialogues, each yielding one positive and one negative sample.
///
/// The positive reply repeats the last utterance backwards followed by the
/// first token of the opening turn; the negative is the positive reply of
/// another dialogue.
pub fn overfit_corpus(contexts: usize, vocab: usize, seed: u64) -> Vec<DialogueSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dialogues = Vec::with_capacity(contexts);
    for _ in 0..contexts {
        let turns = rng.gen_range(2..=4);
        let context: Vec<Vec<String>> = (0..turns)
            .map(|_| {
                let len = rng.gen_range(3..=6);
                words("w", &(0..len).map(|_| rng.gen_range(0..vocab)).collect::<Vec<_>>())
            })
            .collect();
        let mut reply: Vec<String> = context[turns - 1].iter().rev().cloned().collect();
        reply.push(context[0][0].clone());
        dialogues.push((context, reply));
    }
    let mut partner: Vec<usize> = (0..contexts).collect();
    if contexts > 1 {
        // a derangement, so no negative equals its own positive
        let shift = rng.gen_range(1..contexts);
        partner.iter_mut().for_each(|p| *p = (*p + shift) % contexts);
    }
    let mut out = Vec::with_capacity(2 * contexts);
    for (i, (context, reply)) in dialogues.iter().enumerate() {
        out.push(DialogueSample {
            label: 1,
            context: context.clone(),
            response: reply.clone(),
        });
        out.push(DialogueSample {
            label: 0,
            context: context.clone(),
            response: dialogues[partner[i]].1.clone(),
        });
    }
    out
}

/// Topic-structured response selection with confusable negatives.
///
/// Each topic owns a few keywords and answer words. The last utterance asks
/// about one topic through its keywords; the true reply uses that topic's
/// answer words. Earlier turns mention other topics, and negatives either
/// answer those topics, repeat context keywords around a wrong answer, or
/// echo an earlier utterance.
#[derive(Debug, Clone)]
pub struct TopicTask {
    pub topics: usize,
    pub keywords: usize,
    pub answers: usize,
    pub fillers: usize,
    pub candidates: usize,
}

impl Default for TopicTask {
    fn default() -> Self {
        Self {
            topics: 24,
            keywords: 3,
            answers: 6,
            fillers: 40,
            candidates: 10,
        }
    }
}

impl TopicTask {
    fn keyword(&self, topic: usize, rng: &mut ChaCha8Rng) -> String {
        format!("k{topic}_{}", rng.gen_range(0..self.keywords))
    }

    fn filler(&self, rng: &mut ChaCha8Rng) -> String {
        format!("f{}", rng.gen_range(0..self.fillers))
    }

    fn answer(&self, topic: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        let len = rng.gen_range(3..=5);
        let mut out: Vec<String> = (0..len)
            .map(|_| format!("a{topic}_{}", rng.gen_range(0..self.answers)))
            .collect();
        let at = rng.gen_range(0..=out.len());
        out.insert(at, self.filler(rng));
        out
    }

    fn utterance(&self, topic: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        let mut out: Vec<String> = (0..rng.gen_range(2..=4)).map(|_| self.filler(rng)).collect();
        for _ in 0..rng.gen_range(1..=2) {
            let at = rng.gen_range(0..=out.len());
            out.insert(at, self.keyword(topic, rng));
        }
        out
    }

    /// One session: `candidates` samples, exactly one positive, at a random position.
    pub fn session(&self, rng: &mut ChaCha8Rng) -> Vec<DialogueSample> {
        let turns = rng.gen_range(2..=4);
        let mut topics: Vec<usize> = (0..self.topics).collect();
        topics.shuffle(rng);
        let (query, others) = (topics[0], &topics[1..]);
        let mut context: Vec<Vec<String>> = (0..turns - 1).map(|t| self.utterance(others[t], rng)).collect();
        context.push(self.utterance(query, rng));

        let mut negatives = Vec::with_capacity(self.candidates - 1);
        while negatives.len() < self.candidates - 1 {
            let neg = match rng.gen_range(0..4) {
                // answers a topic that was discussed earlier
                0 => self.answer(others[rng.gen_range(0..turns - 1)], rng),
                // keywords of the query around a wrong answer
                1 => {
                    let mut a = self.answer(others[rng.gen_range(0..others.len())], rng);
                    let at = rng.gen_range(0..=a.len());
                    a.insert(at, self.keyword(query, rng));
                    a
                }
                // echoes a context utterance
                2 => context[rng.gen_range(0..turns)].clone(),
                _ => self.answer(others[rng.gen_range(turns - 1..others.len())], rng),
            };
            negatives.push(neg);
        }
        let positive = self.answer(query, rng);
        let at = rng.gen_range(0..self.candidates);
        let mut out: Vec<DialogueSample> = negatives
            .into_iter()
            .map(|r| DialogueSample {
                label: 0,
                context: context.clone(),
                response: r,
            })
            .collect();
        out.insert(
            at,
            DialogueSample {
                label: 1,
                context,
                response: positive,
            },
        );
        out
    }

    pub fn sessions(&self, count: usize, seed: u64) -> Vec<Vec<DialogueSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.session(&mut rng)).collect()
    }
}

/// Training samples from ranked sessions: every positive and up to
/// `negatives` of its session's negatives.
pub fn training_pairs(sessions: &[Vec<DialogueSample>], negatives: usize, seed: u64) -> Vec<DialogueSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in sessions {
        out.extend(s.iter().filter(|c| c.label == 1).cloned());
        let mut neg: Vec<&DialogueSample> = s.iter().filter(|c| c.label == 0).collect();
        neg.shuffle(&mut rng);
        out.extend(neg.into_iter().take(negatives).cloned());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overfit_corpus_shape() {
        let c = overfit_corpus(100, 50, 1);
        assert_eq!(c.len(), 200);
        assert_eq!(c.iter().filter(|s| s.label == 1).count(), 100);
        for pair in c.chunks(2) {
            assert_eq!(pair[0].context, pair[1].context);
            assert_ne!(pair[0].response, pair[1].response);
        }
        assert_eq!(overfit_corpus(100, 50, 1), c);
    }

    #[test]
    fn sessions_have_one_positive() {
        let task = TopicTask::default();
        for s in task.sessions(50, 3) {
            assert_eq!(s.len(), 10);
            assert_eq!(s.iter().filter(|c| c.label == 1).count(), 1);
            assert!(s.iter().all(|c| c.context == s[0].context));
        }
    }

    #[test]
    fn pairs_keep_every_positive() {
        let sessions = TopicTask::default().sessions(20, 4);
        let pairs = training_pairs(&sessions, 2, 0);
        assert_eq!(pairs.len(), 60);
        assert_eq!(pairs.iter().filter(|c| c.label == 1).count(), 20);
    }

    #[test]
    fn samples_serialize_to_corpus_lines() {
        let s = &TopicTask::default().sessions(1, 5)[0][0];
        let parsed = crate::data::parse_sample_line(&s.to_line(), 1).unwrap();
        assert_eq!(&parsed, s);
    }
}
