//! Two-layer LSTM decoder with sentence/word hierarchical attention.
//!
//! Sentence scores `β = Zᵀ W_d1 h` and word scores `α_ij = h_ijᵀ W_d2 h` are
//! each normalised (β over sentences, α within its sentence) and multiplied,
//! so the joint weights `γ` sum to one. Word states of all sentences are
//! zero-padded to the longest sentence `L` and laid side by side in one
//! `r x kL` matrix, which turns both the scores and the context vector into
//! single matrix products.

use std::sync::Arc;

use chn_tensor::{Graph, ParamStore, Scalar, Tensor, Var};

use super::encoder::{embed, ArticleEncoding};
use super::lstm::LstmWeights;
use super::ModelConfig;
use crate::error::{ChnError, Result};
use crate::text::PAD;

pub const W_D1: &str = "attn.W_d1";
pub const W_D2: &str = "attn.W_d2";
pub const W_HTILDE: &str = "decoder.W_htilde";
pub const W_V: &str = "out.W_V";
pub const B_V: &str = "out.b_V";
pub const LAYERS: usize = 2;

/// Per-layer `(h, c)` plus the number of steps taken.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub layers: Vec<(Var, Var)>,
    pub step: usize,
}

impl DecoderState {
    /// Hidden state of the top layer.
    pub fn top(&self) -> Var {
        self.layers.last().expect("decoder has layers").0
    }
}

/// Encoder outputs arranged for attention.
pub struct AttentionContext {
    /// `Z`, `r x k`.
    pub z: Var,
    z_t: Var,
    /// `r x kL`, sentence `i` occupying columns `iL .. iL + len_i`.
    pub words: Var,
    words_t: Var,
    pub sentences: usize,
    pub max_len: usize,
    /// Row-major `k x L` validity of the padded word grid.
    pub mask: Vec<bool>,
}

impl AttentionContext {
    pub fn new<T: Scalar>(g: &mut Graph<T>, article: &ArticleEncoding, z: Var) -> Result<Self> {
        let k = article.word_states.len();
        if k == 0 || g.shape(z)[1] != k {
            return Err(ChnError::Empty("attention context"));
        }
        let r = g.shape(z)[0];
        let lens: Vec<usize> = article.word_states.iter().map(|&w| g.shape(w)[1]).collect();
        let max_len = *lens.iter().max().unwrap_or(&0);
        let mut blocks = Vec::with_capacity(2 * k);
        let mut mask = Vec::with_capacity(k * max_len);
        for (&w, &len) in article.word_states.iter().zip(&lens) {
            blocks.push(w);
            if len < max_len {
                blocks.push(g.zeros(r, max_len - len));
            }
            mask.extend((0..max_len).map(|j| j < len));
        }
        let words = g.concat(&blocks, 1)?;
        let words_t = g.transpose(words);
        let z_t = g.transpose(z);
        Ok(AttentionContext {
            z,
            z_t,
            words,
            words_t,
            sentences: k,
            max_len,
            mask,
        })
    }
}

/// Values of an [`AttentionContext`], detached from the graph that built
/// them so they can be re-bound cheaply into short-lived graphs.
#[derive(Clone, Debug)]
pub struct FrozenContext<T> {
    z: Arc<Tensor<T>>,
    z_t: Arc<Tensor<T>>,
    words: Arc<Tensor<T>>,
    words_t: Arc<Tensor<T>>,
    sentences: usize,
    max_len: usize,
    mask: Vec<bool>,
}

impl<T: Scalar> FrozenContext<T> {
    pub fn bind(&self, g: &mut Graph<T>) -> Result<AttentionContext> {
        Ok(AttentionContext {
            z: g.shared(self.z.clone())?,
            z_t: g.shared(self.z_t.clone())?,
            words: g.shared(self.words.clone())?,
            words_t: g.shared(self.words_t.clone())?,
            sentences: self.sentences,
            max_len: self.max_len,
            mask: self.mask.clone(),
        })
    }
}

impl AttentionContext {
    pub fn freeze<T: Scalar>(&self, g: &Graph<T>) -> FrozenContext<T> {
        let take = |v: Var| Arc::new(g.value(v).clone());
        FrozenContext {
            z: take(self.z),
            z_t: take(self.z_t),
            words: take(self.words),
            words_t: take(self.words_t),
            sentences: self.sentences,
            max_len: self.max_len,
            mask: self.mask.clone(),
        }
    }
}

/// Per-layer `(h, c)` values outside any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct StateValues<T> {
    pub layers: Vec<(Tensor<T>, Tensor<T>)>,
    pub step: usize,
}

impl<T: Scalar> StateValues<T> {
    pub fn read(g: &Graph<T>, state: &DecoderState) -> Self {
        StateValues {
            layers: state
                .layers
                .iter()
                .map(|&(h, c)| (g.value(h).clone(), g.value(c).clone()))
                .collect(),
            step: state.step,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> DecoderState {
        DecoderState {
            layers: self
                .layers
                .iter()
                .map(|(h, c)| (g.constant(h.clone()), g.constant(c.clone())))
                .collect(),
            step: self.step,
        }
    }
}

/// Returns `(γ, c_t)`: `γ` is `k x L` with zeros on padding, `c_t` is `r x 1`.
pub fn hierarchical_attention<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    ctx: &AttentionContext,
    h: Var,
) -> Result<(Var, Var)> {
    let w_d1 = g.param(store, W_D1)?;
    let w_d2 = g.param(store, W_D2)?;
    let (k, l) = (ctx.sentences, ctx.max_len);

    let q1 = g.matmul(w_d1, h)?;
    let beta_scores = g.matmul(ctx.z_t, q1)?;
    let beta = g.softmax(beta_scores, 0, None)?;

    let q2 = g.matmul(w_d2, h)?;
    let alpha_scores = g.matmul(ctx.words_t, q2)?;
    let alpha_scores = g.reshape(alpha_scores, k, l)?;
    let alpha = g.softmax(alpha_scores, 1, Some(&ctx.mask))?;

    let ones = g.ones(1, l);
    let beta_rep = g.matmul(beta, ones)?;
    let gamma = g.mul(alpha, beta_rep)?;
    let flat = g.reshape(gamma, k * l, 1)?;
    let context = g.matmul(ctx.words, flat)?;
    Ok((gamma, context))
}

pub struct StepOutput {
    /// `|V| x 1` log-probabilities.
    pub log_probs: Var,
    pub gamma: Var,
    /// `h̃ = tanh(W_h̃ [h; c])`.
    pub attentional: Var,
    pub state: DecoderState,
}

pub fn decode_step<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    ctx: &AttentionContext,
    state: &DecoderState,
    prev_token: u32,
) -> Result<StepOutput> {
    if state.layers.len() != LAYERS {
        return Err(ChnError::Config(format!(
            "decoder state has {} layers, expected {LAYERS}",
            state.layers.len()
        )));
    }
    let mut input = embed(g, store, cfg, &[prev_token])?[0];
    let mut layers = Vec::with_capacity(LAYERS);
    for (l, &prev) in state.layers.iter().enumerate() {
        let w = LstmWeights::bind(g, store, &format!("decoder.l{l}"))?;
        let next = w.step(g, input, prev)?;
        layers.push(next);
        input = next.0;
    }
    let h = input;
    let (gamma, context) = hierarchical_attention(g, store, ctx, h)?;
    let w_ht = g.param(store, W_HTILDE)?;
    let joined = g.concat(&[h, context], 0)?;
    let pre = g.matmul(w_ht, joined)?;
    let attentional = g.tanh(pre);
    let w_v = g.param(store, W_V)?;
    let b_v = g.param(store, B_V)?;
    let logits = g.matmul(w_v, attentional)?;
    let logits = g.add(logits, b_v)?;
    let log_probs = g.log_softmax(logits, 0)?;
    Ok(StepOutput {
        log_probs,
        gamma,
        attentional,
        state: DecoderState {
            layers,
            step: state.step + 1,
        },
    })
}

pub struct Unroll {
    /// One `|V| x 1` log-probability column per target.
    pub log_probs: Vec<Var>,
    pub targets: Vec<u32>,
    /// Top-layer hidden state after the last target step.
    pub s_m: Var,
}

/// Teacher forcing: inputs are `q_m, d_1 .. d_{z-1}`, targets `d_1 .. d_z`.
/// PAD entries of `distractor` are ignored.
pub fn teacher_forced_unroll<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    ctx: &AttentionContext,
    init: &DecoderState,
    first_input: u32,
    distractor: &[u32],
) -> Result<Unroll> {
    let targets: Vec<u32> = distractor.iter().copied().filter(|&t| t != PAD).collect();
    if targets.is_empty() {
        return Err(ChnError::Empty("distractor"));
    }
    let mut state = init.clone();
    let mut prev = first_input;
    let mut log_probs = Vec::with_capacity(targets.len());
    for &target in &targets {
        if target as usize >= cfg.vocab_size {
            return Err(ChnError::TokenOutOfRange {
                id: target,
                size: cfg.vocab_size,
            });
        }
        let out = decode_step(g, store, cfg, ctx, &state, prev)?;
        log_probs.push(out.log_probs);
        state = out.state;
        prev = target;
    }
    Ok(Unroll {
        log_probs,
        targets,
        s_m: state.top(),
    })
}

/// `k x L` attention weights as nested rows, for inspection.
pub fn gamma_rows<T: Scalar>(gamma: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..gamma.rows())
        .map(|i| (0..gamma.cols()).map(|j| gamma.get(i, j).as_f64()).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(r: usize) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert(W_D1, Tensor::zeros(&[r, r])).unwrap();
        p.insert(W_D2, Tensor::zeros(&[r, r])).unwrap();
        p
    }

    fn article(g: &mut Graph<f64>, words: Vec<Tensor<f64>>) -> ArticleEncoding {
        let k = words.len();
        let r = words[0].rows();
        let word_states: Vec<Var> = words.into_iter().map(|w| g.constant(w)).collect();
        let sentence_states = g.constant(Tensor::zeros(&[r, k]));
        let article_vector = g.zeros(r, 1);
        ArticleEncoding {
            word_states,
            sentence_embeddings: Vec::new(),
            sentence_states,
            article_vector,
            word_mask: Vec::new(),
            sentence_mask: vec![true; k],
        }
    }

    #[test]
    fn single_word_attends_fully() {
        let mut g = Graph::new();
        let a = article(&mut g, vec![Tensor::column(vec![0.3, -0.7])]);
        let ctx = AttentionContext::new(&mut g, &a, a.sentence_states).unwrap();
        let h = g.constant(Tensor::column(vec![1.0, 2.0]));
        let (gamma, c) = hierarchical_attention(&mut g, &store(2), &ctx, h).unwrap();
        assert_eq!(g.value(gamma).data(), &[1.0]);
        assert_eq!(g.value(c).data(), &[0.3, -0.7]);
    }

    #[test]
    fn uniform_scores_and_padding() {
        let mut g = Graph::new();
        let a = article(
            &mut g,
            vec![
                Tensor::from_rows(&[&[1.0, 3.0], &[0.0, 2.0]]),
                Tensor::from_rows(&[&[5.0], &[-1.0]]),
            ],
        );
        let ctx = AttentionContext::new(&mut g, &a, a.sentence_states).unwrap();
        assert_eq!(ctx.mask, vec![true, true, true, false]);
        let h = g.constant(Tensor::column(vec![1.0, 2.0]));
        let (gamma, c) = hierarchical_attention(&mut g, &store(2), &ctx, h).unwrap();
        assert_eq!(g.value(gamma).data(), &[0.25, 0.25, 0.5, 0.0]);
        // 0.25 * [1,0] + 0.25 * [3,2] + 0.5 * [5,-1]
        assert_eq!(g.value(c).data(), &[3.5, 0.0]);
    }
}
