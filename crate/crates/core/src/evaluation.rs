//! Corpus BLEU-1..4 and ROUGE-1/2/L, reported per distractor slot.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ChnError, Result};
use crate::inference::GenerationRecord;
use crate::text::TokenizedSample;

pub const MAX_ORDER: usize = 4;

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Length of the reference closest to `c`; ties go to the shorter one.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

fn check_pairs<A, B>(cands: &[A], refs: &[Vec<B>]) -> Result<()> {
    if cands.is_empty() {
        return Err(ChnError::Empty("candidate set"));
    }
    if cands.len() != refs.len() {
        return Err(ChnError::Data(format!(
            "{} candidates for {} reference sets",
            cands.len(),
            refs.len()
        )));
    }
    if refs.iter().any(Vec::is_empty) {
        return Err(ChnError::Empty("reference set"));
    }
    Ok(())
}

/// Corpus BLEU-1..`max_n` in [0, 1]. Unsmoothed; any zero precision up to
/// order n makes BLEU-n zero.
pub fn bleu(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], max_n: usize) -> Result<Vec<f64>> {
    check_pairs(cands, refs)?;
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, rs) in cands.iter().zip(refs) {
        c_len += cand.len();
        r_len += closest_ref_len(cand.len(), rs);
        for n in 1..=max_n {
            let mut max_ref: Counts = HashMap::new();
            for r in rs {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in ngrams(cand, n) {
                matched[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len >= r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 0..max_n {
        if matched[n] == 0 {
            zero = true;
        } else {
            log_sum += (matched[n] as f64 / total[n] as f64).ln();
        }
        out.push(if zero {
            0.0
        } else {
            bp * (log_sum / (n + 1) as f64).exp()
        });
    }
    Ok(out)
}

fn f1(overlap: usize, cand: usize, reference: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / cand as f64;
    let r = overlap as f64 / reference as f64;
    2.0 * p * r / (p + r)
}

/// ROUGE-n F1 of one pair.
pub fn rouge_n_pair(cand: &[String], reference: &[String], n: usize) -> f64 {
    let c = ngrams(cand, n);
    let r = ngrams(reference, n);
    let overlap = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    f1(overlap, c.values().sum(), r.values().sum())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 of one pair.
pub fn rouge_l_pair(cand: &[String], reference: &[String]) -> f64 {
    f1(lcs_len(cand, reference), cand.len(), reference.len())
}

/// ROUGE-1, ROUGE-2, ROUGE-L in [0, 1]: best reference per sample, averaged.
pub fn rouge(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<[f64; 3]> {
    check_pairs(cands, refs)?;
    let mut sums = [0.0; 3];
    for (cand, rs) in cands.iter().zip(refs) {
        let best = |f: &dyn Fn(&Vec<String>) -> f64| rs.iter().map(f).fold(0.0, f64::max);
        sums[0] += best(&|r| rouge_n_pair(cand, r, 1));
        sums[1] += best(&|r| rouge_n_pair(cand, r, 2));
        sums[2] += best(&|r| rouge_l_pair(cand, r));
    }
    let n = cands.len() as f64;
    Ok(sums.map(|s| s / n))
}

/// Scores of one distractor slot, scaled to [0, 100].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotScores {
    pub bleu: [f64; MAX_ORDER],
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub samples: usize,
}

impl SlotScores {
    pub fn compute(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<Self> {
        let b = bleu(cands, refs, MAX_ORDER)?;
        let r = rouge(cands, refs)?;
        Ok(SlotScores {
            bleu: [b[0], b[1], b[2], b[3]].map(|x| 100.0 * x),
            rouge_1: 100.0 * r[0],
            rouge_2: 100.0 * r[1],
            rouge_l: 100.0 * r[2],
            samples: cands.len(),
        })
    }

    pub fn values(&self) -> [f64; 7] {
        let b = self.bleu;
        [b[0], b[1], b[2], b[3], self.rouge_1, self.rouge_2, self.rouge_l]
    }
}

/// How a generated slot is paired with gold distractors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceMode {
    /// Every slot against all gold distractors of its question.
    #[default]
    MultiReference,
    /// Slot i against gold distractor i only; samples lacking it are skipped.
    Strict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: ReferenceMode,
    pub slots: Vec<SlotScores>,
}

const HEADERS: [&str; 7] = [
    "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-1", "ROUGE-2", "ROUGE-L",
];
const SLOT_NAMES: [&str; 3] = ["1st", "2nd", "3rd"];

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12}", "Distractor")?;
        for h in HEADERS {
            write!(f, "{h:>9}")?;
        }
        writeln!(f)?;
        for (name, slot) in SLOT_NAMES.iter().zip(&self.slots) {
            write!(f, "{name:<12}")?;
            for v in slot.values() {
                write!(f, "{v:>9.2}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn split(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Scores generated distractors against the gold split.
pub fn evaluate_corpus(
    generated: &[GenerationRecord],
    gold: &[TokenizedSample],
    mode: ReferenceMode,
) -> Result<EvalReport> {
    let by_id: HashMap<&str, &TokenizedSample> = gold.iter().map(|s| (s.id.as_str(), s)).collect();
    let pairs = generated
        .iter()
        .map(|g| {
            by_id
                .get(g.id.as_str())
                .map(|s| (g, *s))
                .ok_or_else(|| ChnError::MissingSample(g.id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut slots = Vec::with_capacity(3);
    for slot in 0..3 {
        let mut cands = Vec::new();
        let mut refs = Vec::new();
        for (g, s) in &pairs {
            let r = match mode {
                ReferenceMode::MultiReference => s.distractors.clone(),
                ReferenceMode::Strict => match s.distractors.get(slot) {
                    Some(d) => vec![d.clone()],
                    None => continue,
                },
            };
            if r.is_empty() {
                continue;
            }
            cands.push(split(&g.distractors[slot]));
            refs.push(r);
        }
        slots.push(SlotScores::compute(&cands, &refs)?);
    }
    Ok(EvalReport { mode, slots })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        split(s)
    }

    #[test]
    fn identity_is_perfect() {
        let c = vec![t("the cat sat on the mat"), t("a dog barks loudly now")];
        let r: Vec<_> = c.iter().map(|x| vec![x.clone()]).collect();
        assert_eq!(bleu(&c, &r, 4).unwrap(), vec![1.0; 4]);
        assert_eq!(rouge(&c, &r).unwrap(), [1.0; 3]);
    }

    #[test]
    fn disjoint_is_zero() {
        let c = vec![t("a b c d")];
        let r = vec![vec![t("e f g h")]];
        assert_eq!(bleu(&c, &r, 4).unwrap(), vec![0.0; 4]);
        assert_eq!(rouge(&c, &r).unwrap(), [0.0; 3]);
    }

    #[test]
    fn lcs_example() {
        let f = rouge_l_pair(&t("a b c d"), &t("a c d"));
        assert!((100.0 * f - 85.714_285).abs() < 1e-4);
        assert_eq!(f, rouge_l_pair(&t("a c d"), &t("a b c d")));
    }

    #[test]
    fn hand_computed_bleu() {
        // c = 5 + 3 tokens, closest refs 5 and 4 -> r = 9.
        // p1 = (4 + 3) / 8, p2 = (3 + 2) / 6.
        let c = vec![t("a b c d x"), t("p q r")];
        let r = vec![vec![t("a b c d e"), t("b c")], vec![t("p q r s")]];
        let b = bleu(&c, &r, 2).unwrap();
        let bp = (1.0f64 - 9.0 / 8.0).exp();
        assert!((b[0] - bp * 7.0 / 8.0).abs() < 1e-12);
        assert!((b[1] - bp * (7.0f64 / 8.0 * 5.0 / 6.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn clipping_counts_reference_maximum() {
        let c = vec![t("the the the the")];
        let r = vec![vec![t("the cat"), t("the the dog")]];
        assert!((bleu(&c, &r, 1).unwrap()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn missing_sample_is_reported() {
        let g = GenerationRecord {
            id: "nope".into(),
            question: String::new(),
            distractors: Default::default(),
            scores: [0.0; 3],
            relaxed_threshold: None,
            degenerate: false,
            unfinished: false,
        };
        let err = evaluate_corpus(&[g], &[], ReferenceMode::MultiReference).unwrap_err();
        assert!(matches!(err, ChnError::MissingSample(id) if id == "nope"));
    }
}
