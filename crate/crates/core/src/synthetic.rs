//! Small generated corpora for smoke runs, overfitting checks and
//! finite-difference tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::ModelConfig;
use crate::text::{ArticleText, McqSample, RawRecord, EOS};

/// `r = 32`, `|V| = 50`, embedding width 16, co-attention on.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 50,
        embed_dim: 16,
        hidden: 32,
        coattention: true,
    }
}

/// Three sentences of unequal length, a four-token question and a
/// three-token distractor, all ids drawn below `vocab_size`.
pub fn toy_sample(vocab_size: usize, seed: u64) -> McqSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = |n: usize| -> Vec<u32> {
        (0..n).map(|_| rng.gen_range(3..vocab_size as u32)).collect()
    };
    let article = vec![ids(5), ids(3), ids(4)];
    let question = ids(4);
    let answer = ids(2);
    let mut distractor = ids(3);
    distractor.push(EOS);
    McqSample {
        id: format!("toy-{seed}"),
        article,
        question,
        answer,
        distractors: vec![distractor],
    }
}

/// Records whose text uses `vocab_words` distinct words `w0, w1, ...`.
/// Each has 3 to 4 sentences, a unique question ending in a blank and one
/// distractor drawn from its own article.
pub fn memorization_corpus(samples: usize, vocab_words: usize, seed: u64) -> Vec<RawRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..vocab_words).map(|i| format!("w{i}")).collect();
    let pick = |rng: &mut ChaCha8Rng, n: usize| -> Vec<String> {
        (0..n).map(|_| words[rng.gen_range(0..words.len())].clone()).collect()
    };
    (0..samples)
        .map(|i| {
            let sentences: Vec<String> = (0..rng.gen_range(3..=4))
                .map(|_| {
                    let n = rng.gen_range(4..=7);
                    pick(&mut rng, n).join(" ") + " ."
                })
                .collect();
            let mut pool: Vec<String> = sentences
                .iter()
                .flat_map(|s| s.split(' ').filter(|t| *t != ".").map(str::to_string))
                .collect();
            pool.shuffle(&mut rng);
            let n = rng.gen_range(3..=5);
            let distractor = pool[..n].join(" ");
            let question = format!("{} _", pick(&mut rng, 4).join(" "));
            RawRecord {
                id: format!("mem-{i:03}"),
                article: ArticleText::Sentences(sentences),
                question,
                answer: pick(&mut rng, 2).join(" "),
                distractors: vec![distractor],
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{tokenize_record, Vocabulary};

    #[test]
    fn toy_sample_is_valid() {
        let s = toy_sample(50, 3);
        s.validate().unwrap();
        assert_eq!(s.article.iter().map(Vec::len).collect::<Vec<_>>(), [5, 3, 4]);
        assert_eq!(toy_sample(50, 3), s);
    }

    #[test]
    fn corpus_is_deterministic_and_small() {
        let a = memorization_corpus(32, 197, 7);
        assert_eq!(a, memorization_corpus(32, 197, 7));
        let tokenized: Vec<_> = a.iter().map(tokenize_record).collect();
        let vocab = Vocabulary::build(
            tokenized.iter().flat_map(|s| {
                s.article
                    .iter()
                    .chain(std::iter::once(&s.question))
                    .chain(&s.distractors)
                    .cloned()
            }),
            1000,
        )
        .unwrap();
        assert!(vocab.len() <= 3 + 197 + 2);
    }
}
