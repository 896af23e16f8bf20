//! Hierarchical article encoder and the two question encoders.
//!
//! Word level: 2-layer bidirectional LSTM over each sentence; its weights are
//! shared with the question encoder. Sentence level: 1-layer bidirectional
//! LSTM over sentence embeddings. A sequence summary is the forward state at
//! the last token concatenated with the backward state at the first, so both
//! halves have read the whole sequence.
//!
//! PAD ids are masked out: PAD tokens are skipped and PAD-only sentences are
//! dropped, so every returned matrix covers valid positions only.

use chn_tensor::{Graph, ParamStore, Scalar, Var};

use super::decoder::DecoderState;
use super::lstm::{bidirectional_layer, LstmWeights};
use super::{ModelConfig, EMBEDDING};
use crate::error::{ChnError, Result};
use crate::text::PAD;

pub struct ArticleEncoding {
    /// Per valid sentence, `r x len_i` word states.
    pub word_states: Vec<Var>,
    /// `e_i` per valid sentence (`r x 1`).
    pub sentence_embeddings: Vec<Var>,
    /// `H*`, `r x k` over valid sentences.
    pub sentence_states: Var,
    /// `e_T` (`r x 1`).
    pub article_vector: Var,
    /// Validity of every input position, per input sentence.
    pub word_mask: Vec<Vec<bool>>,
    pub sentence_mask: Vec<bool>,
}

impl ArticleEncoding {
    pub fn num_sentences(&self) -> usize {
        self.word_states.len()
    }
}

pub struct QuestionEncoding {
    /// `U*`, `r x m`.
    pub word_states: Var,
    pub init_state: DecoderState,
    /// `q_m`, the first decoder input.
    pub last_token: u32,
}

pub(crate) fn embed<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    ids: &[u32],
) -> Result<Vec<Var>> {
    let table = g.param(store, EMBEDDING)?;
    ids.iter()
        .map(|&id| {
            if id as usize >= cfg.vocab_size {
                return Err(ChnError::TokenOutOfRange {
                    id,
                    size: cfg.vocab_size,
                });
            }
            Ok(g.embed_row(table, id as usize)?)
        })
        .collect()
}

fn valid_tokens(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().filter(|&id| id != PAD).collect()
}

/// Shared word-level encoder. Returns `r x len` states over non-PAD tokens.
pub fn encode_words<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    sentence: &[u32],
) -> Result<Var> {
    let ids = valid_tokens(sentence);
    if ids.is_empty() {
        return Err(ChnError::Empty("sentence"));
    }
    let x = embed(g, store, cfg, &ids)?;
    let l0 = bidirectional_layer(g, store, "encoder.word.l0", &x)?;
    let l1 = bidirectional_layer(g, store, "encoder.word.l1", &l0)?;
    Ok(g.concat(&l1, 1)?)
}

/// `[forward at last column ; backward at first column]` of bidirectional
/// states laid out as `r x len`.
pub fn sequence_summary<T: Scalar>(g: &mut Graph<T>, states: Var) -> Result<Var> {
    let [r, len] = g.shape(states);
    if len == 0 {
        return Err(ChnError::Empty("sequence"));
    }
    let half = r / 2;
    let last = g.column(states, len - 1)?;
    let first = g.column(states, 0)?;
    let fwd = g.slice_rows(last, 0, half)?;
    let bwd = g.slice_rows(first, half, r - half)?;
    Ok(g.concat(&[fwd, bwd], 0)?)
}

/// `e_i` for one sentence's word states.
pub fn sentence_embedding<T: Scalar>(g: &mut Graph<T>, word_states: Var) -> Result<Var> {
    sequence_summary(g, word_states)
}

/// Sentence-level encoder. Returns `(H*, e_T)`.
pub fn encode_sentences<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    embeddings: &[Var],
) -> Result<(Var, Var)> {
    if embeddings.is_empty() {
        return Err(ChnError::Empty("article"));
    }
    let states = bidirectional_layer(g, store, "encoder.sent.l0", embeddings)?;
    let h_star = g.concat(&states, 1)?;
    let e_t = sequence_summary(g, h_star)?;
    Ok((h_star, e_t))
}

pub fn encode_article<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    article: &[Vec<u32>],
) -> Result<ArticleEncoding> {
    let word_mask: Vec<Vec<bool>> = article
        .iter()
        .map(|s| s.iter().map(|&id| id != PAD).collect())
        .collect();
    let sentence_mask: Vec<bool> = word_mask.iter().map(|m| m.iter().any(|&v| v)).collect();
    let mut word_states = Vec::new();
    let mut sentence_embeddings = Vec::new();
    for (sentence, _) in article.iter().zip(&sentence_mask).filter(|(_, &valid)| valid) {
        let states = encode_words(g, store, cfg, sentence)?;
        sentence_embeddings.push(sentence_embedding(g, states)?);
        word_states.push(states);
    }
    let (sentence_states, article_vector) = encode_sentences(g, store, &sentence_embeddings)?;
    Ok(ArticleEncoding {
        word_states,
        sentence_embeddings,
        sentence_states,
        article_vector,
        word_mask,
        sentence_mask,
    })
}

/// `U*` from the shared word-level encoder.
pub fn encode_question<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    question: &[u32],
) -> Result<Var> {
    if valid_tokens(question).is_empty() {
        return Err(ChnError::Empty("question"));
    }
    encode_words(g, store, cfg, question)
}

/// Separate 2-layer unidirectional encoder whose final per-layer `(h, c)`
/// initialises the decoder. Also returns the last question token.
pub fn encode_question_init<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    question: &[u32],
) -> Result<(DecoderState, u32)> {
    let ids = valid_tokens(question);
    let Some(&last) = ids.last() else {
        return Err(ChnError::Empty("question"));
    };
    let mut inputs = embed(g, store, cfg, &ids)?;
    let mut layers = Vec::with_capacity(2);
    for layer in 0..2 {
        let w = LstmWeights::bind(g, store, &format!("encoder.qinit.l{layer}"))?;
        let init = w.zero_state(g);
        let (outputs, last_state) = w.run(g, &inputs, init, false)?;
        layers.push(last_state);
        inputs = outputs;
    }
    Ok((DecoderState { layers, step: 0 }, last))
}

pub fn encode_question_full<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    question: &[u32],
) -> Result<QuestionEncoding> {
    let word_states = encode_question(g, store, cfg, question)?;
    let (init_state, last_token) = encode_question_init(g, store, cfg, question)?;
    Ok(QuestionEncoding {
        word_states,
        init_state,
        last_token,
    })
}
