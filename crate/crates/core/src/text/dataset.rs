//! JSON-lines ingestion, filtering, statistics and id encoding.
//!
//! One object per line:
//! `{"id", "article", "question", "answer", "distractors"}` where `article`
//! is either raw text (split into sentences here) or a list of sentences,
//! and `distractors` holds one to three strings.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use super::tokenize::{is_punctuation, split_sentences, tokenize, BLANK};
use super::vocab::{Vocabulary, EOS, PAD};
use crate::error::{ChnError, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ArticleText {
    Raw(String),
    Sentences(Vec<String>),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RawRecord {
    pub id: String,
    pub article: ArticleText,
    pub question: String,
    #[serde(default)]
    pub answer: String,
    pub distractors: Vec<String>,
}

/// A record after sentence splitting and tokenization, before id encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedSample {
    pub id: String,
    pub article: Vec<Vec<String>>,
    pub question: Vec<String>,
    pub answer: Vec<String>,
    pub distractors: Vec<Vec<String>>,
}

/// Encoded sample. Every distractor ends with EOS.
#[derive(Clone, Debug, PartialEq)]
pub struct McqSample {
    pub id: String,
    pub article: Vec<Vec<u32>>,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
    pub distractors: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Limits {
    pub max_sentences: usize,
    pub max_sentence_tokens: usize,
    pub max_question_tokens: usize,
    pub max_distractor_tokens: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_sentences: 40,
            max_sentence_tokens: 50,
            max_question_tokens: 30,
            max_distractor_tokens: 30,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TruncationReport {
    pub sentences_dropped: usize,
    pub sentences_truncated: usize,
    pub questions_truncated: usize,
    pub distractors_truncated: usize,
    /// Records or distractors discarded for being empty after tokenization.
    pub discarded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    /// One per (question, distractor) pair.
    pub samples: usize,
    pub questions: usize,
    pub pct_incomplete_questions: f64,
    pub avg_article_len: f64,
    pub avg_question_len: f64,
    pub avg_distractor_len: f64,
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RawRecord>> {
    let file = File::open(path).map_err(|e| ChnError::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ChnError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line).map_err(|source| ChnError::Json {
            path: path.to_path_buf(),
            line: lineno + 1,
            source,
        })?;
        if record.distractors.is_empty() || record.distractors.len() > 3 {
            return Err(ChnError::Data(format!(
                "{}:{}: `{}` has {} distractors, expected 1 to 3",
                path.display(),
                lineno + 1,
                record.id,
                record.distractors.len()
            )));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn tokenize_record(record: &RawRecord) -> TokenizedSample {
    let sentences = match &record.article {
        ArticleText::Raw(text) => split_sentences(text),
        ArticleText::Sentences(list) => list.clone(),
    };
    TokenizedSample {
        id: record.id.clone(),
        article: sentences
            .iter()
            .map(|s| tokenize(s))
            .filter(|t| !t.is_empty())
            .collect(),
        question: tokenize(&record.question),
        answer: tokenize(&record.answer),
        distractors: record.distractors.iter().map(|d| tokenize(d)).collect(),
    }
}

/// True when every blank in `question` sits at its last non-punctuation token.
pub fn blank_is_trailing(question: &[String]) -> bool {
    let last_word = question.iter().rposition(|t| !is_punctuation(t));
    question
        .iter()
        .enumerate()
        .all(|(i, t)| t != BLANK || Some(i) == last_word)
}

/// Drops samples whose question has a blank anywhere but the end.
pub fn filter_dataset(samples: Vec<TokenizedSample>) -> Vec<TokenizedSample> {
    samples
        .into_iter()
        .filter(|s| blank_is_trailing(&s.question))
        .collect()
}

/// A question counts as incomplete when it ends with the blank or lacks
/// terminal punctuation.
pub fn is_incomplete_question(question: &[String]) -> bool {
    match question.last().map(String::as_str) {
        None => true,
        Some(BLANK) => true,
        Some(last) => !matches!(last, "." | "?" | "!"),
    }
}

/// Corpus statistics, counting each (question, distractor) pair once.
pub fn compute_stats(samples: &[TokenizedSample]) -> Result<DatasetStats> {
    let mut pairs = 0usize;
    let (mut article, mut question, mut distractor, mut incomplete) = (0usize, 0usize, 0usize, 0usize);
    for s in samples {
        let n = s.distractors.len();
        let article_len: usize = s.article.iter().map(Vec::len).sum();
        pairs += n;
        article += n * article_len;
        question += n * s.question.len();
        distractor += s.distractors.iter().map(Vec::len).sum::<usize>();
        if is_incomplete_question(&s.question) {
            incomplete += n;
        }
    }
    if pairs == 0 {
        return Err(ChnError::Empty("dataset"));
    }
    let p = pairs as f64;
    Ok(DatasetStats {
        samples: pairs,
        questions: samples.len(),
        pct_incomplete_questions: 100.0 * incomplete as f64 / p,
        avg_article_len: article as f64 / p,
        avg_question_len: question as f64 / p,
        avg_distractor_len: distractor as f64 / p,
    })
}

fn truncate(tokens: &[String], max: usize, counter: &mut usize) -> Vec<String> {
    if tokens.len() > max {
        *counter += 1;
    }
    tokens[..tokens.len().min(max)].to_vec()
}

/// Truncates to `limits`, maps tokens to ids and appends EOS to distractors.
/// Samples left without sentences, question or distractors are dropped.
pub fn encode_samples(
    samples: &[TokenizedSample],
    vocab: &Vocabulary,
    limits: &Limits,
) -> (Vec<McqSample>, TruncationReport) {
    let mut report = TruncationReport::default();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        if s.article.len() > limits.max_sentences {
            report.sentences_dropped += s.article.len() - limits.max_sentences;
        }
        let article: Vec<Vec<u32>> = s
            .article
            .iter()
            .take(limits.max_sentences)
            .map(|sent| {
                vocab.encode_all(&truncate(sent, limits.max_sentence_tokens, &mut report.sentences_truncated))
            })
            .filter(|sent| !sent.is_empty())
            .collect();
        let question =
            vocab.encode_all(&truncate(&s.question, limits.max_question_tokens, &mut report.questions_truncated));
        let mut distractors = Vec::new();
        for d in &s.distractors {
            if d.is_empty() {
                report.discarded += 1;
                continue;
            }
            let mut ids =
                vocab.encode_all(&truncate(d, limits.max_distractor_tokens, &mut report.distractors_truncated));
            ids.push(EOS);
            distractors.push(ids);
        }
        if article.is_empty() || question.is_empty() || distractors.is_empty() {
            warn!("sample `{}` is empty after tokenization; skipped", s.id);
            report.discarded += 1;
            continue;
        }
        out.push(McqSample {
            id: s.id.clone(),
            article,
            question,
            answer: vocab.encode_all(&s.answer),
            distractors,
        });
    }
    (out, report)
}

impl McqSample {
    /// Checks the structural invariants: at least one sentence and question
    /// token, no PAD inside content, every distractor non-empty and ending
    /// in EOS.
    pub fn validate(&self) -> Result<()> {
        let fail = |what: &str| Err(ChnError::Data(format!("sample `{}`: {what}", self.id)));
        if self.article.is_empty() || self.article.iter().any(Vec::is_empty) {
            return fail("empty article or sentence");
        }
        if self.question.is_empty() {
            return fail("empty question");
        }
        let has_pad = |ids: &[u32]| ids.contains(&PAD);
        if self.article.iter().any(|s| has_pad(s)) || has_pad(&self.question) {
            return fail("PAD inside content");
        }
        for d in &self.distractors {
            if d.len() < 2 || d.last() != Some(&EOS) || has_pad(d) {
                return fail("distractor must be non-empty and end with EOS");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, article: &[&str], question: &str, distractors: &[&str]) -> TokenizedSample {
        tokenize_record(&RawRecord {
            id: id.into(),
            article: ArticleText::Sentences(article.iter().map(|s| s.to_string()).collect()),
            question: question.into(),
            answer: String::new(),
            distractors: distractors.iter().map(|s| s.to_string()).collect(),
        })
    }

    #[test]
    fn filter_rules() {
        let q = |s: &str| sample("x", &["a b."], s, &["d"]);
        let kept = filter_dataset(vec![
            q("what does _ mean ?"),
            q("the author thinks _"),
            q("the author thinks _ ."),
            q("Why did he leave?"),
            q("_ and _"),
        ]);
        let questions: Vec<String> = kept.iter().map(|s| s.question.join(" ")).collect();
        assert_eq!(questions, vec!["the author thinks _", "the author thinks _ .", "why did he leave ?"]);
        assert_eq!(filter_dataset(kept.clone()), kept);
    }

    #[test]
    fn stats_hand_counted() {
        let one = sample("1", &["a b c d e f g h i j"], "one two three four five six seven eight nine ten", &["x y"]);
        let stats = compute_stats(std::slice::from_ref(&one)).unwrap();
        assert_eq!(stats.avg_question_len, 10.0);
        assert_eq!(stats.pct_incomplete_questions, 100.0);

        // article 3 tokens, question 4 tokens ("is", "it", "?"... ) two distractors of 1 and 3 tokens
        let two = sample("2", &["Hi there.", ""], "Is it?", &["no", "yes it is"]);
        let stats = compute_stats(&[one, two]).unwrap();
        assert_eq!(stats.samples, 3);
        assert_eq!(stats.questions, 2);
        // articles: 10 + 3 + 3 over 3 pairs
        assert!((stats.avg_article_len - 16.0 / 3.0).abs() < 1e-12);
        // questions: 10 + 3 + 3
        assert!((stats.avg_question_len - 16.0 / 3.0).abs() < 1e-12);
        // distractors: 2 + 1 + 3
        assert!((stats.avg_distractor_len - 2.0).abs() < 1e-12);
        assert!((stats.pct_incomplete_questions - 100.0 / 3.0).abs() < 1e-12);
        assert!(compute_stats(&[]).is_err());
    }

    #[test]
    fn encode_truncates_and_appends_eos() {
        let s = sample(
            "t",
            &["one two three four five", "six", "seven"],
            "a b c d",
            &["p q r", "s"],
        );
        let vocab = Vocabulary::build(
            s.article.iter().chain([&s.question]).chain(&s.distractors).cloned(),
            100,
        )
        .unwrap();
        let limits = Limits {
            max_sentences: 2,
            max_sentence_tokens: 3,
            max_question_tokens: 2,
            max_distractor_tokens: 2,
        };
        let (enc, report) = encode_samples(&[s], &vocab, &limits);
        let e = &enc[0];
        assert_eq!(e.article.len(), 2);
        assert_eq!(e.article[0].len(), 3);
        assert_eq!(e.question.len(), 2);
        assert_eq!(e.distractors[0].len(), 3);
        assert_eq!(*e.distractors[0].last().unwrap(), EOS);
        assert_eq!(report.sentences_dropped, 1);
        assert_eq!(report.sentences_truncated, 1);
        assert_eq!(report.questions_truncated, 1);
        assert_eq!(report.distractors_truncated, 1);
        e.validate().unwrap();
    }

    #[test]
    fn jsonl_accepts_raw_or_split_articles() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        use std::io::Write;
        writeln!(f, r#"{{"id":"a","article":"One here. Two here.","question":"Q _","answer":"x","distractors":["d1","d2"]}}"#).unwrap();
        writeln!(f, r#"{{"id":"b","article":["S one.","S two."],"question":"Q?","distractors":["d"]}}"#).unwrap();
        let recs = read_jsonl(f.path()).unwrap();
        assert_eq!(tokenize_record(&recs[0]).article.len(), 2);
        assert_eq!(tokenize_record(&recs[1]).article.len(), 2);

        let mut bad = tempfile::NamedTempFile::new().unwrap();
        writeln!(bad, r#"{{"id":"c","article":"x","question":"q","distractors":[]}}"#).unwrap();
        assert!(read_jsonl(bad.path()).is_err());
    }
}
