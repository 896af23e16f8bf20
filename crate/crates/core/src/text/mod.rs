//! Tokenization, vocabulary, embedding loading and dataset ingestion.

mod dataset;
mod embeddings;
mod tokenize;
mod vocab;

pub use dataset::{
    blank_is_trailing, compute_stats, encode_samples, filter_dataset, is_incomplete_question,
    read_jsonl, tokenize_record, ArticleText, DatasetStats, Limits, McqSample, RawRecord,
    TokenizedSample, TruncationReport,
};
pub use embeddings::{load_embeddings, EmbeddingReport};
pub use tokenize::{is_punctuation, split_sentences, tokenize, BLANK, PUNCTUATION};
pub use vocab::{Vocabulary, EOS, EOS_TOKEN, PAD, PAD_TOKEN, UNK, UNK_TOKEN};
