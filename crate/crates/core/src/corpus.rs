//! Loading splits from a data directory and turning them into model input.
//!
//! A data directory holds `train.jsonl`, `dev.jsonl` and `test.jsonl`; the
//! vocabulary is built from the training split only.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{ChnError, Result};
use crate::text::{
    encode_samples, filter_dataset, read_jsonl, tokenize_record, Limits, McqSample, RawRecord,
    TokenizedSample, TruncationReport, Vocabulary,
};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

pub fn split_path(data_dir: &Path, split: &str) -> PathBuf {
    data_dir.join(format!("{split}.jsonl"))
}

/// Tokenizes and drops samples with a non-trailing blank.
pub fn tokenize_records(records: &[RawRecord]) -> Vec<TokenizedSample> {
    filter_dataset(records.iter().map(tokenize_record).collect())
}

pub fn load_tokenized(path: &Path) -> Result<Vec<TokenizedSample>> {
    Ok(tokenize_records(&read_jsonl(path)?))
}

/// Vocabulary over article, question and distractor tokens.
pub fn build_vocab(samples: &[TokenizedSample], max_size: usize) -> Result<Vocabulary> {
    Vocabulary::build(
        samples.iter().flat_map(|s| {
            s.article
                .iter()
                .chain(std::iter::once(&s.question))
                .chain(&s.distractors)
        }),
        max_size,
    )
}

/// Encoded samples after truncation; samples that end up empty are dropped.
pub fn encode(
    samples: &[TokenizedSample],
    vocab: &Vocabulary,
    limits: &Limits,
) -> (Vec<McqSample>, TruncationReport) {
    encode_samples(samples, vocab, limits)
}

/// Hex SHA-256 of a file's bytes, for run manifests.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| ChnError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes records as JSON lines.
pub fn write_jsonl<S: serde::Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).map_err(|e| ChnError::Data(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| ChnError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::ArticleText;

    #[test]
    fn pipeline_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = |id: &str, q: &str| RawRecord {
            id: id.into(),
            article: ArticleText::Raw("Cats sleep a lot. Dogs bark!".into()),
            question: q.into(),
            answer: "sleep".into(),
            distractors: vec!["bark loudly".into()],
        };
        let path = split_path(dir.path(), "train");
        write_jsonl(&path, &[rec("a", "cats like to _"), rec("b", "what _ means ?")]).unwrap();
        let samples = load_tokenized(&path).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].article.len(), 2);
        let vocab = build_vocab(&samples, 100).unwrap();
        let (encoded, _) = encode(&samples, &vocab, &Limits::default());
        encoded[0].validate().unwrap();
        assert_eq!(file_hash(&path).unwrap().len(), 64);
    }
}
