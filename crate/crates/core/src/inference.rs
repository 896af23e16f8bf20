//! Beam search and Jaccard-diverse selection of three distractors.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::hash::Hash;

use chn_tensor::{Graph, Scalar};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ChnError, Result};
use crate::model::decoder::{self, FrozenContext, StateValues};
use crate::model::Chn;
use crate::text::{McqSample, Vocabulary, EOS};

/// Anything that can score the next token given a decoding state.
pub trait StepModel {
    type State: Clone;

    /// Initial state and first input token.
    fn initial(&self) -> Result<(Self::State, u32)>;

    /// Log-probabilities over the vocabulary after feeding `token`, and the
    /// resulting state.
    fn step(&self, state: &Self::State, token: u32) -> Result<(Vec<f64>, Self::State)>;
}

/// A trained model primed with one encoded sample.
pub struct ChnStepper<'a, T> {
    model: &'a Chn<T>,
    context: FrozenContext<T>,
    init: StateValues<T>,
    first: u32,
}

impl<'a, T: Scalar> ChnStepper<'a, T> {
    pub fn new(model: &'a Chn<T>, sample: &McqSample) -> Result<Self> {
        let mut g = Graph::new();
        let enc = model.encode(&mut g, sample)?;
        Ok(ChnStepper {
            model,
            context: enc.context.freeze(&g),
            init: StateValues::read(&g, &enc.question.init_state),
            first: enc.question.last_token,
        })
    }
}

impl<T: Scalar> StepModel for ChnStepper<'_, T> {
    type State = StateValues<T>;

    fn initial(&self) -> Result<(Self::State, u32)> {
        Ok((self.init.clone(), self.first))
    }

    fn step(&self, state: &Self::State, token: u32) -> Result<(Vec<f64>, Self::State)> {
        let mut g = Graph::new();
        let ctx = self.context.bind(&mut g)?;
        let st = state.bind(&mut g);
        let out = decoder::decode_step(
            &mut g,
            self.model.params(),
            self.model.config(),
            &ctx,
            &st,
            token,
        )?;
        let log_probs = g.value(out.log_probs).data().iter().map(|v| v.as_f64()).collect();
        Ok((log_probs, StateValues::read(&g, &out.state)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// Rank finished hypotheses by log-probability per token instead of
    /// total log-probability.
    pub length_norm: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: 10,
            max_len: 30,
            length_norm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Generated ids without EOS.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// Ranking score (`log_prob / length` under length normalisation).
    pub score: f64,
    /// False when the hypothesis never produced EOS.
    pub finished: bool,
}

impl Candidate {
    fn new(tokens: Vec<u32>, log_prob: f64, finished: bool, length_norm: bool) -> Self {
        let length = tokens.len() + usize::from(finished);
        let score = if length_norm && length > 0 {
            log_prob / length as f64
        } else {
            log_prob
        };
        Candidate {
            tokens,
            log_prob,
            score,
            finished,
        }
    }
}

/// Higher value first; equal values by ascending token sequence.
fn rank(a_value: f64, a_tokens: &[u32], b_value: f64, b_tokens: &[u32]) -> Ordering {
    b_value
        .partial_cmp(&a_value)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_tokens.cmp(b_tokens))
}

struct Alive<S> {
    tokens: Vec<u32>,
    log_prob: f64,
    state: S,
    next_input: u32,
}

/// Standard beam search. Every step keeps the `beam_size` best expansions
/// by cumulative log-probability; expansions ending in EOS leave the beam.
/// Stops when no live hypothesis remains or after `max_len` tokens.
///
/// Returns up to `beam_size` finished candidates in ranking order, or the
/// single best unfinished hypothesis when none finished.
pub fn beam_search<M: StepModel>(model: &M, cfg: &BeamConfig) -> Result<Vec<Candidate>> {
    if cfg.beam_size == 0 || cfg.max_len == 0 {
        return Err(ChnError::Config("beam_size and max_len must be at least 1".into()));
    }
    let (state, first) = model.initial()?;
    let mut alive = vec![Alive {
        tokens: Vec::new(),
        log_prob: 0.0,
        state,
        next_input: first,
    }];
    let mut finished: Vec<Candidate> = Vec::new();

    for _ in 0..cfg.max_len {
        // (parent, token, cumulative log-prob, sequence incl. token)
        let mut expansions: Vec<(usize, u32, f64, Vec<u32>)> = Vec::new();
        let mut states = Vec::with_capacity(alive.len());
        for (p, hyp) in alive.iter().enumerate() {
            let (log_probs, next) = model.step(&hyp.state, hyp.next_input)?;
            states.push(next);
            for (v, &lp) in log_probs.iter().enumerate() {
                let mut seq = hyp.tokens.clone();
                seq.push(v as u32);
                expansions.push((p, v as u32, hyp.log_prob + lp, seq));
            }
        }
        let cmp = |a: &(usize, u32, f64, Vec<u32>), b: &(usize, u32, f64, Vec<u32>)| {
            rank(a.2, &a.3, b.2, &b.3)
        };
        if expansions.len() > cfg.beam_size {
            expansions.select_nth_unstable_by(cfg.beam_size - 1, cmp);
            expansions.truncate(cfg.beam_size);
        }
        expansions.sort_by(cmp);

        let mut next_alive = Vec::with_capacity(expansions.len());
        for (p, v, lp, mut seq) in expansions {
            if v == EOS {
                seq.pop();
                finished.push(Candidate::new(seq, lp, true, cfg.length_norm));
            } else {
                next_alive.push(Alive {
                    tokens: seq,
                    log_prob: lp,
                    state: states[p].clone(),
                    next_input: v,
                });
            }
        }
        alive = next_alive;
        if alive.is_empty() {
            break;
        }
    }

    let sort = |c: &mut Vec<Candidate>| {
        c.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
    };
    if finished.is_empty() {
        let mut rest: Vec<Candidate> = alive
            .into_iter()
            .map(|h| Candidate::new(h.tokens, h.log_prob, false, cfg.length_norm))
            .collect();
        sort(&mut rest);
        rest.truncate(1);
        return Ok(rest);
    }
    sort(&mut finished);
    finished.truncate(cfg.beam_size);
    Ok(finished)
}

/// Arg-max decoding; ties go to the lowest token id.
pub fn greedy<M: StepModel>(model: &M, max_len: usize, length_norm: bool) -> Result<Candidate> {
    let (mut state, mut input) = model.initial()?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let (log_probs, next) = model.step(&state, input)?;
        let (best, lp) = log_probs
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (v, &lp)| {
                if lp > acc.1 {
                    (v, lp)
                } else {
                    acc
                }
            });
        log_prob += lp;
        if best as u32 == EOS {
            return Ok(Candidate::new(tokens, log_prob, true, length_norm));
        }
        tokens.push(best as u32);
        state = next;
        input = best as u32;
    }
    Ok(Candidate::new(tokens, log_prob, false, length_norm))
}

/// `1 − |A ∩ B| / |A ∪ B|` over the distinct elements; 0 when both are empty.
pub fn jaccard_distance<T: Eq + Hash>(a: &[T], b: &[T]) -> f64 {
    let a: HashSet<&T> = a.iter().collect();
    let b: HashSet<&T> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    1.0 - a.intersection(&b).count() as f64 / union as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Indices into the candidate list of D1, D2, D3.
    pub picks: [usize; 3],
    /// Threshold actually used, when it had to be lowered.
    pub relaxed_threshold: Option<f64>,
    /// Fewer than three candidates existed, so some were repeated.
    pub degenerate: bool,
}

impl Selection {
    pub fn effective_threshold(&self, requested: f64) -> f64 {
        self.relaxed_threshold.unwrap_or(requested)
    }
}

pub const RELAX_STEP: f64 = 0.1;

/// Picks D1 as the top candidate, D2 as the best one farther than
/// `threshold` from D1, and D3 as the best one farther than `threshold`
/// from both. When no such pair exists the threshold is lowered in steps of
/// 0.1 (down to −0.1, where any distinct candidates qualify) and the scan
/// repeated.
pub fn select_diverse<T: Eq + Hash>(candidates: &[Vec<T>], threshold: f64) -> Result<Selection> {
    let n = candidates.len();
    if n == 0 {
        return Err(ChnError::Empty("candidate list"));
    }
    if n < 3 {
        return Ok(Selection {
            picks: [0, 1.min(n - 1), n - 1],
            relaxed_threshold: None,
            degenerate: true,
        });
    }
    let dist = |i: usize, j: usize| jaccard_distance(&candidates[i], &candidates[j]);
    let mut k = 0u32;
    loop {
        let t = threshold - RELAX_STEP * f64::from(k);
        let d2 = (1..n).find(|&i| dist(i, 0) > t);
        let d3 = d2.and_then(|d2| (1..n).find(|&j| j != d2 && dist(j, 0) > t && dist(j, d2) > t));
        if let (Some(d2), Some(d3)) = (d2, d3) {
            return Ok(Selection {
                picks: [0, d2, d3],
                relaxed_threshold: (k > 0).then_some(t),
                degenerate: false,
            });
        }
        k += 1;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub question: String,
    pub distractors: [String; 3],
    pub scores: [f64; 3],
    pub relaxed_threshold: Option<f64>,
    #[serde(default)]
    pub degenerate: bool,
    #[serde(default)]
    pub unfinished: bool,
}

/// Beam-decodes every sample and selects three diverse distractors. Output
/// is sorted by sample id.
pub fn generate<T: Scalar>(
    model: &Chn<T>,
    samples: &[McqSample],
    vocab: &Vocabulary,
    beam: &BeamConfig,
    threshold: f64,
) -> Result<Vec<GenerationRecord>> {
    let mut records: Vec<GenerationRecord> = samples
        .par_iter()
        .map(|sample| {
            let stepper = ChnStepper::new(model, sample)?;
            let candidates = beam_search(&stepper, beam)?;
            let unfinished = candidates.iter().any(|c| !c.finished);
            let texts: Vec<Vec<String>> = candidates
                .iter()
                .map(|c| {
                    c.tokens
                        .iter()
                        .map(|&t| vocab.decode(t).unwrap_or("<unk>").to_string())
                        .collect()
                })
                .collect();
            let sel = select_diverse(&texts, threshold)?;
            let pick = |i: usize| texts[sel.picks[i]].join(" ");
            let score = |i: usize| candidates[sel.picks[i]].score;
            Ok(GenerationRecord {
                id: sample.id.clone(),
                question: vocab.decode_text(&sample.question),
                distractors: [pick(0), pick(1), pick(2)],
                scores: [score(0), score(1), score(2)],
                relaxed_threshold: sel.relaxed_threshold,
                degenerate: sel.degenerate,
                unfinished,
            })
        })
        .collect::<Result<_>>()?;
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Next-token distribution depends only on the previous token.
    struct Bigram {
        table: Vec<Vec<f64>>,
    }

    impl StepModel for Bigram {
        type State = ();

        fn initial(&self) -> Result<((), u32)> {
            Ok(((), 0))
        }

        fn step(&self, _: &(), token: u32) -> Result<(Vec<f64>, ())> {
            Ok((self.table[token as usize].clone(), ()))
        }
    }

    fn bigram() -> Bigram {
        let ln = |p: &[f64]| p.iter().map(|x| x.ln()).collect::<Vec<_>>();
        // tokens: 0 start, 1 pad-like, 2 EOS, 3, 4
        Bigram {
            table: vec![
                ln(&[0.01, 0.01, 0.18, 0.5, 0.3]),
                ln(&[0.2; 5]),
                ln(&[0.2; 5]),
                ln(&[0.01, 0.01, 0.6, 0.08, 0.3]),
                ln(&[0.01, 0.01, 0.1, 0.8, 0.08]),
            ],
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        let m = bigram();
        let cfg = BeamConfig {
            beam_size: 1,
            max_len: 5,
            length_norm: false,
        };
        let b = beam_search(&m, &cfg).unwrap();
        let g = greedy(&m, 5, false).unwrap();
        assert_eq!(b[0].tokens, g.tokens);
        assert_eq!(b[0].tokens, vec![3]);
        assert!((b[0].log_prob - (0.5f64.ln() + 0.6f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn unfinished_is_flagged() {
        let m = bigram();
        let cfg = BeamConfig {
            beam_size: 1,
            max_len: 1,
            length_norm: true,
        };
        let b = beam_search(&m, &cfg).unwrap();
        assert_eq!(b.len(), 1);
        assert!(!b[0].finished);
        assert_eq!(b[0].tokens, vec![3]);
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard_distance(&["a", "b"], &["b", "a", "a"]), 0.0);
        assert_eq!(jaccard_distance(&["a"], &["b"]), 1.0);
        assert_eq!(jaccard_distance(&["a", "b", "c"], &["b", "c", "d"]), 0.5);
        assert_eq!(jaccard_distance::<&str>(&[], &[]), 0.0);
    }

    #[test]
    fn selection_cases() {
        let c = |s: &str| s.chars().collect::<Vec<_>>();
        let s = select_diverse(&[c("abc"), c("def"), c("xyz")], 0.5).unwrap();
        assert_eq!(s.picks, [0, 1, 2]);
        assert_eq!(s.relaxed_threshold, None);

        let s = select_diverse(&[c("abc"), c("abd"), c("xyz"), c("pqr")], 0.5).unwrap();
        assert_eq!(s.picks, [0, 2, 3]);

        let s = select_diverse(&[c("abc"), c("abd"), c("abe")], 0.5).unwrap();
        assert_eq!(s.picks, [0, 1, 2]);
        let t = s.relaxed_threshold.unwrap();
        assert!(t < 0.5 && jaccard_distance(&c("abd"), &c("abe")) > t);

        let s = select_diverse(&[c("abc")], 0.5).unwrap();
        assert_eq!(s.picks, [0, 0, 0]);
        assert!(s.degenerate);
        assert!(select_diverse::<char>(&[], 0.5).is_err());

        // identical candidates only qualify once the threshold drops below 0
        let s = select_diverse(&[c("ab"), c("ab"), c("ab")], 0.5).unwrap();
        assert!(s.relaxed_threshold.unwrap() < 0.0);
    }
}
