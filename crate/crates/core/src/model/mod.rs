//! The co-attention hierarchical network: hierarchical encoders, article to
//! question co-attention with a gated merge, and a hierarchical-attention
//! decoder trained with NLL plus a cosine relevance term.

pub mod coattention;
pub mod decoder;
pub mod encoder;
mod lstm;
pub mod objective;

use std::path::Path;

use chn_tensor::{checkpoint, Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ChnError, Result};
use crate::text::McqSample;
use coattention::CoAttentionOut;
use decoder::AttentionContext;
use encoder::{ArticleEncoding, QuestionEncoding};
use objective::{LossBreakdown, ObjectiveConfig};

pub const EMBEDDING: &str = "embedding";

/// Architecture hyperparameters. Every LSTM has total output size `hidden`;
/// the bidirectional ones use `hidden / 2` per direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    /// `false` feeds the sentence states straight to the decoder (HRED).
    pub coattention: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || !self.hidden.is_multiple_of(4) {
            return Err(ChnError::Config(format!(
                "hidden size must be a positive multiple of 4, got {}",
                self.hidden
            )));
        }
        if self.embed_dim == 0 || self.vocab_size < 4 {
            return Err(ChnError::Config(format!(
                "embed_dim {} / vocab_size {} too small",
                self.embed_dim, self.vocab_size
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, recorded in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Every parameter name with its shape, in creation order.
    pub fn layout(&self) -> Vec<(String, [usize; 2])> {
        let (v, e, r) = (self.vocab_size, self.embed_dim, self.hidden);
        let half = r / 2;
        let mut out = vec![(EMBEDDING.to_string(), [v, e])];
        let mut lstm = |prefix: String, d_in: usize, d_h: usize| {
            out.push((format!("{prefix}.W_ih"), [4 * d_h, d_in]));
            out.push((format!("{prefix}.W_hh"), [4 * d_h, d_h]));
            out.push((format!("{prefix}.b"), [4 * d_h, 1]));
        };
        for dir in ["fwd", "bwd"] {
            lstm(format!("encoder.word.l0.{dir}"), e, half);
        }
        for dir in ["fwd", "bwd"] {
            lstm(format!("encoder.word.l1.{dir}"), r, half);
        }
        for dir in ["fwd", "bwd"] {
            lstm(format!("encoder.sent.l0.{dir}"), r, half);
        }
        lstm("encoder.qinit.l0".into(), e, r);
        lstm("encoder.qinit.l1".into(), r, r);
        lstm("decoder.l0".into(), e, r);
        lstm("decoder.l1".into(), r, r);
        if self.coattention {
            out.push(("coattn.w_d".into(), [r / 4, r]));
            out.push(("coattn.b_d".into(), [r / 4, 1]));
            out.push(("coattn.w_s".into(), [3 * r / 4, 1]));
        }
        out.push(("attn.W_d1".into(), [r, r]));
        out.push(("attn.W_d2".into(), [r, r]));
        out.push(("decoder.W_htilde".into(), [r, 2 * r]));
        out.push(("out.W_V".into(), [v, r]));
        out.push(("out.b_V".into(), [v, 1]));
        out
    }
}

/// Result of running both encoders and the co-attention block on a sample.
pub struct Encoded {
    pub article: ArticleEncoding,
    pub question: QuestionEncoding,
    /// `None` when co-attention is disabled.
    pub coattention: Option<CoAttentionOut>,
    pub context: AttentionContext,
}

/// Graph nodes of one teacher-forced training instance.
pub struct InstanceLoss {
    pub total: Var,
    pub nll: Var,
    pub cos: Var,
    /// Target tokens scored (distractor length including EOS).
    pub tokens: usize,
}

pub struct Chn<T> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> Chn<T> {
    /// Fresh model: every weight from `uniform(-0.1, 0.1)`, LSTM forget-gate
    /// biases set to 1.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.layout() {
            let mut t = Tensor::<T>::uniform(&shape, -0.1, 0.1, &mut rng);
            if name.ends_with(".b") && !name.starts_with("coattn") {
                let d = shape[0] / 4;
                for row in d..2 * d {
                    t.set(row, 0, T::one());
                }
            }
            params.insert(name, t)?;
        }
        Ok(Chn { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(ChnError::Config(format!(
                "expected {} parameters, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape) in &layout {
            let t = params.get(name)?;
            if t.shape() != shape {
                return Err(ChnError::Config(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Chn { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn set_embeddings(&mut self, table: Tensor<T>) -> Result<()> {
        Ok(self.params.set(EMBEDDING, table)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(checkpoint::save(path, &self.params, &self.config.hash())?)
    }

    /// Loads a checkpoint written for exactly `config`.
    pub fn load(path: &Path, config: ModelConfig) -> Result<Self> {
        let (hash, params) = checkpoint::load(path)?;
        let expected = config.hash();
        if hash != expected {
            return Err(ChnError::ConfigMismatch {
                expected,
                found: hash,
            });
        }
        Self::from_params(config, params)
    }

    pub fn encode(&self, g: &mut Graph<T>, sample: &McqSample) -> Result<Encoded> {
        let store = &self.params;
        let article = encoder::encode_article(g, store, &self.config, &sample.article)?;
        let question = encoder::encode_question_full(g, store, &self.config, &sample.question)?;
        let (z, coattention) = if self.config.coattention {
            let out = coattention::coattend(
                g,
                store,
                article.sentence_states,
                question.word_states,
            )?;
            (out.z, Some(out))
        } else {
            (article.sentence_states, None)
        };
        let context = AttentionContext::new(g, &article, z)?;
        Ok(Encoded {
            article,
            question,
            coattention,
            context,
        })
    }

    /// Teacher-forced loss for one gold distractor of `sample`.
    pub fn instance_loss(
        &self,
        g: &mut Graph<T>,
        sample: &McqSample,
        distractor: &[u32],
        objective: &ObjectiveConfig,
    ) -> Result<InstanceLoss> {
        let enc = self.encode(g, sample)?;
        let unroll = decoder::teacher_forced_unroll(
            g,
            &self.params,
            &self.config,
            &enc.context,
            &enc.question.init_state,
            enc.question.last_token,
            distractor,
        )?;
        let nll = objective::nll_loss(g, &unroll.log_probs, &unroll.targets, None)?;
        let e_d = objective::distractor_representation(g, unroll.s_m, enc.article.article_vector)?;
        let cos = objective::cosine(g, e_d, enc.article.article_vector)?;
        let total = objective::total_loss(g, nll, cos, objective);
        Ok(InstanceLoss {
            total,
            nll,
            cos,
            tokens: unroll.targets.len(),
        })
    }

    /// Loss values for one instance without keeping the graph.
    pub fn evaluate_instance(
        &self,
        sample: &McqSample,
        distractor: &[u32],
        objective: &ObjectiveConfig,
    ) -> Result<(LossBreakdown, usize)> {
        let mut g = Graph::new();
        let out = self.instance_loss(&mut g, sample, distractor, objective)?;
        Ok((
            LossBreakdown::read(&g, &out, objective),
            out.tokens,
        ))
    }
}
