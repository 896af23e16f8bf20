//! Finite-difference checks of every model block on a toy configuration.
//!
//! Each block is reduced to a scalar by a fixed random linear read-out, and
//! only the parameters owned by that block are perturbed. The last check
//! runs the full encoder/decoder/objective stack over every parameter.

use std::time::Instant;

use chn_tensor::{grad_check, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{ChnError, Result};
use crate::model::decoder::{self, AttentionContext};
use crate::model::objective::ObjectiveConfig;
use crate::model::{coattention, encoder, Chn, ModelConfig};
use crate::synthetic::{toy_config, toy_sample};
use crate::text::McqSample;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct BlockCheck {
    pub block: &'static str,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at `worst`.
    pub worst_values: Option<(f64, f64)>,
    pub coordinates: usize,
    pub seconds: f64,
}

impl BlockCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// `Σ x ∘ R` for a fixed random `R`; gives every entry of `x` its own weight.
fn readout(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let [r, c] = g.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::uniform(&[r, c], -1.0, 1.0, &mut rng));
    Ok(g.dot(x, w)?)
}

fn names_with(store: &ParamStore<f64>, prefixes: &[&str]) -> Vec<String> {
    store
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .map(str::to_string)
        .collect()
}

struct Setup<'a> {
    only: Option<&'a [String]>,
    config: ModelConfig,
    model: Chn<f64>,
    sample: McqSample,
}

fn run(
    setup: &Setup,
    block: &'static str,
    params: Option<Vec<String>>,
    eps: f64,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + Sync,
) -> Result<Option<BlockCheck>> {
    if setup.only.is_some_and(|o| !o.iter().any(|b| b == block)) {
        return Ok(None);
    }
    let start = Instant::now();
    let only: Option<Vec<&str>> = params.as_ref().map(|v| v.iter().map(String::as_str).collect());
    let report = grad_check(setup.model.params(), only.as_deref(), eps, |g, store| {
        f(g, store).map_err(|e| chn_tensor::TensorError::invalid("block", e.to_string()))
    })?;
    Ok(Some(BlockCheck {
        block,
        max_rel_error: report.max_rel_error,
        worst: report.worst,
        worst_values: report.worst_values,
        coordinates: report.coordinates,
        seconds: start.elapsed().as_secs_f64(),
    }))
}

pub const BLOCKS: [&str; 7] = [
    "word_encoder",
    "sentence_encoder",
    "question_encoder",
    "coattention",
    "hierarchical_attention",
    "output_projection",
    "full_model",
];

/// Runs all block checks with central differences of step `eps`.
pub fn check_blocks(eps: f64, seed: u64) -> Result<Vec<BlockCheck>> {
    check_selected_blocks(eps, seed, None)
}

/// Runs the named blocks only, or all of them for `None`.
pub fn check_selected_blocks(eps: f64, seed: u64, only: Option<&[String]>) -> Result<Vec<BlockCheck>> {
    if let Some(unknown) = only.and_then(|o| o.iter().find(|b| !BLOCKS.contains(&b.as_str()))) {
        return Err(ChnError::Config(format!(
            "unknown gradient-check block `{unknown}`; expected one of {}",
            BLOCKS.join(", ")
        )));
    }
    let config = toy_config();
    let setup = Setup {
        only,
        model: Chn::new(config.clone(), seed)?,
        sample: toy_sample(config.vocab_size, seed),
        config,
    };
    let cfg = &setup.config;
    let sample = &setup.sample;
    let store = setup.model.params();
    let mut out = Vec::new();

    out.extend(run(
        &setup,
        "word_encoder",
        Some(names_with(store, &["encoder.word", "embedding"])),
        eps,
        |g, p| {
            let states = encoder::encode_words(g, p, cfg, &sample.article[0])?;
            let e = encoder::sentence_embedding(g, states)?;
            let a = readout(g, states, 1)?;
            let b = readout(g, e, 2)?;
            Ok(g.add(a, b)?)
        },
    )?);

    out.extend(run(
        &setup,
        "sentence_encoder",
        Some(names_with(store, &["encoder.sent"])),
        eps,
        |g, p| {
            let art = encoder::encode_article(g, p, cfg, &sample.article)?;
            let a = readout(g, art.sentence_states, 3)?;
            let b = readout(g, art.article_vector, 4)?;
            Ok(g.add(a, b)?)
        },
    )?);

    out.extend(run(
        &setup,
        "question_encoder",
        Some(names_with(store, &["encoder.qinit"])),
        eps,
        |g, p| {
            let (state, _) = encoder::encode_question_init(g, p, cfg, &sample.question)?;
            let (h, c) = state.layers[1];
            let a = readout(g, h, 5)?;
            let b = readout(g, c, 6)?;
            Ok(g.add(a, b)?)
        },
    )?);

    out.extend(run(
        &setup,
        "coattention",
        Some(names_with(store, &["coattn"])),
        eps,
        |g, p| {
            let art = encoder::encode_article(g, p, cfg, &sample.article)?;
            let u = encoder::encode_question(g, p, cfg, &sample.question)?;
            let co = coattention::coattend(g, p, art.sentence_states, u)?;
            readout(g, co.z, 7)
        },
    )?);

    out.extend(run(
        &setup,
        "hierarchical_attention",
        Some(names_with(store, &["attn."])),
        eps,
        |g, p| {
            let art = encoder::encode_article(g, p, cfg, &sample.article)?;
            let ctx = AttentionContext::new(g, &art, art.sentence_states)?;
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            let h = g.constant(Tensor::uniform(&[cfg.hidden, 1], -1.0, 1.0, &mut rng));
            let (gamma, c) = decoder::hierarchical_attention(g, p, &ctx, h)?;
            let a = readout(g, gamma, 9)?;
            let b = readout(g, c, 10)?;
            Ok(g.add(a, b)?)
        },
    )?);

    out.extend(run(
        &setup,
        "output_projection",
        Some(names_with(store, &["decoder.", "out."])),
        eps,
        |g, p| {
            let art = encoder::encode_article(g, p, cfg, &sample.article)?;
            let ctx = AttentionContext::new(g, &art, art.sentence_states)?;
            let (state, q_m) = encoder::encode_question_init(g, p, cfg, &sample.question)?;
            let unroll =
                decoder::teacher_forced_unroll(g, p, cfg, &ctx, &state, q_m, &sample.distractors[0])?;
            crate::model::objective::nll_loss(g, &unroll.log_probs, &unroll.targets, None)
        },
    )?);

    let objective = ObjectiveConfig {
        ssl: true,
        lambda: 0.5,
    };
    out.extend(run(&setup, "full_model", None, eps, |g, p| {
        let model = Chn::from_params(cfg.clone(), p.clone())?;
        Ok(model.instance_loss(g, sample, &sample.distractors[0], &objective)?.total)
    })?);

    Ok(out)
}
