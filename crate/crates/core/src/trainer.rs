//! Minibatch SGD with global-norm clipping, learning-rate decay, validation,
//! early stopping and checkpointing.
//!
//! Each (sample, gold distractor) pair is one training instance. Instances
//! of a batch are differentiated on separate graphs in parallel; their
//! gradients are summed in batch order, so results do not depend on thread
//! scheduling.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chn_tensor::{Gradients, Graph, ParamStore, Scalar, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ChnError, Result};
use crate::model::objective::ObjectiveConfig;
use crate::model::{Chn, ModelConfig};
use crate::text::{Limits, McqSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecaySchedule {
    /// Decay whenever the validation loss does not improve on the previous epoch.
    Plateau,
    /// Decay after every epoch.
    PerEpoch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_decay: f64,
    pub decay: DecaySchedule,
    pub clip_norm: f64,
    pub lambda_ssl: f64,
    pub ssl: bool,
    pub coattention: bool,
    pub epochs: usize,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: Option<usize>,
    /// Stop once validation per-token NLL falls below this value.
    pub target_nll: Option<f64>,
    pub seed: u64,
    pub precision: Precision,
    pub hidden: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub limits: Limits,
    pub save_epoch_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            lr_init: 1.0,
            lr_decay: 0.8,
            decay: DecaySchedule::Plateau,
            clip_norm: 5.0,
            lambda_ssl: 1e-4,
            ssl: true,
            coattention: true,
            epochs: 20,
            patience: Some(5),
            target_nll: None,
            seed: 1,
            precision: Precision::F64,
            hidden: 600,
            embed_dim: 300,
            vocab_size: 50_000,
            limits: Limits::default(),
            save_epoch_checkpoints: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("lr_init", self.lr_init),
            ("lr_decay", self.lr_decay),
            ("clip_norm", self.clip_norm),
            ("epochs", self.epochs as f64),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(ChnError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lambda_ssl < 0.0 || !self.lambda_ssl.is_finite() {
            return Err(ChnError::Config(format!(
                "lambda_ssl must be non-negative, got {}",
                self.lambda_ssl
            )));
        }
        if self.lr_decay > 1.0 {
            return Err(ChnError::Config(format!("lr_decay {} exceeds 1", self.lr_decay)));
        }
        self.model_config(self.vocab_size).validate()
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            ssl: self.ssl,
            lambda: self.lambda_ssl,
        }
    }

    /// Architecture for a vocabulary of `vocab_len` entries.
    pub fn model_config(&self, vocab_len: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab_len,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            coattention: self.coattention,
        }
    }
}

pub fn global_norm<T: Scalar>(grads: &Gradients<T>) -> f64 {
    grads
        .values()
        .map(|g| g.sq_norm().as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients by `max_norm / norm` when their global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> Result<f64> {
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return Err(ChnError::NonFiniteGradient { param: name.clone() });
        }
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let factor = T::lit(max_norm / norm);
        for g in grads.values_mut() {
            g.scale_in_place(factor);
        }
    }
    Ok(norm)
}

/// `p ← p − lr·g` for every parameter with a gradient.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
    let lr = T::lit(lr);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(ChnError::Config(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w = *w - lr * d;
        }
    }
    Ok(())
}

/// Learning rate for the next epoch given the validation losses so far.
pub fn lr_schedule(lr: f64, history: &[f64], decay: f64, schedule: DecaySchedule) -> f64 {
    match schedule {
        DecaySchedule::PerEpoch => lr * decay,
        DecaySchedule::Plateau => match history {
            [.., prev, last] if last >= prev => lr * decay,
            _ => lr,
        },
    }
}

/// `(sample index, distractor index)`.
pub type Instance = (usize, usize);

pub fn instances(samples: &[McqSample]) -> Vec<Instance> {
    samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.distractors.len()).map(move |d| (i, d)))
        .collect()
}

/// Shuffles instances, groups them by article sentence count, cuts batches
/// and shuffles the batch order.
pub fn make_batches(
    samples: &[McqSample],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<Instance>> {
    let mut all = instances(samples);
    all.shuffle(rng);
    all.sort_by_key(|&(i, _)| samples[i].article.len());
    let mut batches: Vec<Vec<Instance>> = all.chunks(batch_size).map(<[_]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    /// Mean over instances of `nll − λ·cos`.
    pub loss: f64,
    pub nll: f64,
    pub cos: f64,
    pub tokens: usize,
}

/// Mean gradient of the batch loss.
pub fn batch_gradients<T: Scalar>(
    model: &Chn<T>,
    samples: &[McqSample],
    batch: &[Instance],
    objective: &ObjectiveConfig,
) -> Result<(Gradients<T>, BatchStats)> {
    if batch.is_empty() {
        return Err(ChnError::Empty("batch"));
    }
    let per_instance: Vec<(Gradients<T>, [f64; 3], usize)> = batch
        .par_iter()
        .map(|&(i, d)| {
            let sample = &samples[i];
            let mut g = Graph::new();
            let out = model.instance_loss(&mut g, sample, &sample.distractors[d], objective)?;
            let total = g.scalar(out.total).as_f64();
            if !total.is_finite() {
                return Err(ChnError::NonFiniteLoss {
                    sample: sample.id.clone(),
                });
            }
            let nll = g.scalar(out.nll).as_f64();
            let cos = g.scalar(out.cos).as_f64();
            let grads = g.backward(out.total)?;
            Ok((grads, [total, nll, cos], out.tokens))
        })
        .collect::<Result<_>>()?;

    let n = batch.len() as f64;
    let mut sum: Gradients<T> = Gradients::new();
    let mut stats = BatchStats::default();
    for (grads, [total, nll, cos], tokens) in per_instance {
        for (name, g) in grads {
            match sum.get_mut(&name) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    sum.insert(name, g);
                }
            }
        }
        stats.loss += total / n;
        stats.nll += nll / n;
        stats.cos += cos / n;
        stats.tokens += tokens;
    }
    let scale = T::lit(1.0 / n);
    for g in sum.values_mut() {
        g.scale_in_place(scale);
    }
    Ok((sum, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub nll_per_token: f64,
    pub mean_cos: f64,
    pub mean_loss: f64,
}

/// Loss metrics over every instance of `samples`.
pub fn evaluate<T: Scalar>(
    model: &Chn<T>,
    samples: &[McqSample],
    objective: &ObjectiveConfig,
) -> Result<Validation> {
    let all = instances(samples);
    if all.is_empty() {
        return Err(ChnError::Empty("validation set"));
    }
    let rows: Vec<_> = all
        .par_iter()
        .map(|&(i, d)| model.evaluate_instance(&samples[i], &samples[i].distractors[d], objective))
        .collect::<Result<_>>()?;
    let (mut nll, mut cos, mut loss, mut tokens) = (0.0, 0.0, 0.0, 0usize);
    for (b, t) in &rows {
        nll += b.nll;
        cos += b.cos_sim;
        loss += b.total;
        tokens += t;
    }
    let n = rows.len() as f64;
    Ok(Validation {
        nll_per_token: nll / tokens as f64,
        mean_cos: cos / n,
        mean_loss: loss / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        loss: f64,
        nll: f64,
        cos: f64,
        grad_norm: f64,
    },
    Epoch {
        epoch: usize,
        lr: f64,
        train_loss: f64,
        valid_nll_per_token: f64,
        valid_cos: f64,
        valid_loss: f64,
        best: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub steps: usize,
    pub best_epoch: usize,
    pub best_valid_nll: f64,
    pub final_validation: Validation,
    pub final_lr: f64,
    pub history: Vec<Validation>,
}

/// Where `train` writes its artifacts.
#[derive(Clone, Debug)]
pub struct OutputDir(PathBuf);

impl OutputDir {
    pub fn new(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        fs::create_dir_all(&path).map_err(|e| ChnError::io(&path, e))?;
        Ok(OutputDir(path))
    }

    pub fn path(&self) -> &Path {
        &self.0
    }

    pub fn best(&self) -> PathBuf {
        self.0.join("best.ckpt")
    }

    pub fn epoch(&self, n: usize) -> PathBuf {
        self.0.join(format!("epoch_{n}.ckpt"))
    }

    pub fn log(&self) -> PathBuf {
        self.0.join("train_log.jsonl")
    }
}

struct Log {
    path: PathBuf,
    out: Option<BufWriter<File>>,
}

impl Log {
    fn open(dir: Option<&OutputDir>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Log {
                path: PathBuf::new(),
                out: None,
            });
        };
        let path = dir.log();
        let file = File::create(&path).map_err(|e| ChnError::io(&path, e))?;
        Ok(Log {
            path,
            out: Some(BufWriter::new(file)),
        })
    }

    fn write(&mut self, record: &LogRecord) -> Result<()> {
        if let Some(out) = &mut self.out {
            let line = serde_json::to_string(record).expect("log record serializes");
            writeln!(out, "{line}").map_err(|e| ChnError::io(&self.path, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush().map_err(|e| ChnError::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Trains `model` in place. With `out = None` nothing is written to disk and
/// the best parameters are kept in memory; either way the model ends with
/// the best-validation parameters.
pub fn train<T: Scalar>(
    model: &mut Chn<T>,
    train_set: &[McqSample],
    valid_set: &[McqSample],
    cfg: &TrainConfig,
    out: Option<&OutputDir>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(ChnError::Empty("training set"));
    }
    if valid_set.is_empty() {
        return Err(ChnError::Empty("validation set"));
    }
    let objective = cfg.objective();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Log::open(out)?;
    let mut lr = cfg.lr_init;
    let mut history: Vec<Validation> = Vec::new();
    let mut valid_losses: Vec<f64> = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<T>)> = None;
    let mut since_best = 0usize;
    let mut steps = 0usize;

    for epoch in 1..=cfg.epochs {
        let batches = make_batches(train_set, cfg.batch_size, &mut rng);
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let (mut grads, stats) = batch_gradients(model, train_set, batch, &objective)?;
            let grad_norm = clip_gradients(&mut grads, cfg.clip_norm)?;
            sgd_step(model.params_mut(), &grads, lr)?;
            steps += 1;
            epoch_loss += stats.loss / batches.len() as f64;
            log.write(&LogRecord::Step {
                epoch,
                step: steps,
                lr,
                loss: stats.loss,
                nll: stats.nll,
                cos: stats.cos,
                grad_norm,
            })?;
        }

        let v = evaluate(model, valid_set, &objective)?;
        let improved = best.as_ref().is_none_or(|(_, b, _)| v.nll_per_token < *b);
        if improved {
            best = Some((epoch, v.nll_per_token, model.params().clone()));
            since_best = 0;
            if let Some(dir) = out {
                model.save(&dir.best())?;
            }
        } else {
            since_best += 1;
        }
        if let Some(dir) = out {
            if cfg.save_epoch_checkpoints {
                model.save(&dir.epoch(epoch))?;
            }
        }
        log.write(&LogRecord::Epoch {
            epoch,
            lr,
            train_loss: epoch_loss,
            valid_nll_per_token: v.nll_per_token,
            valid_cos: v.mean_cos,
            valid_loss: v.mean_loss,
            best: improved,
        })?;
        log.flush()?;
        info!(
            "epoch {epoch}: lr {lr:.4} train {epoch_loss:.4} valid nll/token {:.4} cos {:.4}",
            v.nll_per_token, v.mean_cos
        );
        history.push(v);
        valid_losses.push(v.nll_per_token);
        lr = lr_schedule(lr, &valid_losses, cfg.lr_decay, cfg.decay);

        if cfg.target_nll.is_some_and(|t| v.nll_per_token < t) {
            break;
        }
        if cfg.patience.is_some_and(|p| since_best >= p) {
            info!("no improvement for {since_best} epochs; stopping");
            break;
        }
    }

    let (best_epoch, best_valid_nll, params) = best.expect("at least one epoch ran");
    *model.params_mut() = params;
    Ok(TrainSummary {
        epochs_run: history.len(),
        steps,
        best_epoch,
        best_valid_nll,
        final_validation: *history.last().expect("at least one epoch ran"),
        final_lr: lr,
        history,
    })
}

/// Sum of squares of all entries, for reporting.
pub fn param_norm<T: Scalar>(params: &ParamStore<T>) -> f64 {
    params
        .iter()
        .map(|(_, t): (&str, &Tensor<T>)| t.sq_norm().as_f64())
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads(entries: &[(&str, Vec<f64>)]) -> Gradients<f64> {
        entries
            .iter()
            .map(|(n, v)| (n.to_string(), Tensor::column(v.clone())))
            .collect()
    }

    #[test]
    fn clipping() {
        let mut g = grads(&[("a", vec![6.0, 8.0])]);
        assert_eq!(clip_gradients(&mut g, 5.0).unwrap(), 10.0);
        assert_eq!(g["a"].data(), &[3.0, 4.0]);

        let mut g = grads(&[("a", vec![1.0, 2.0]), ("b", vec![2.0])]);
        clip_gradients(&mut g, 5.0).unwrap();
        assert_eq!(g["a"].data(), &[1.0, 2.0]);

        let mut g = grads(&[("a", vec![0.0])]);
        assert_eq!(clip_gradients(&mut g, 5.0).unwrap(), 0.0);

        let mut g = grads(&[("bad", vec![f64::NAN])]);
        assert!(matches!(
            clip_gradients(&mut g, 5.0),
            Err(ChnError::NonFiniteGradient { .. })
        ));
    }

    #[test]
    fn sgd_and_quadratic_bowl() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::column(vec![1.0])).unwrap();
        sgd_step(&mut p, &grads(&[("w", vec![0.5])]), 1.0).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.5]);
        sgd_step(&mut p, &grads(&[("w", vec![0.5])]), 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.5]);

        // f = |p|^2, gradient 2p, lr 0.1: p shrinks by 0.8 each step
        let mut p = ParamStore::new();
        p.insert("w", Tensor::column(vec![3.0, -4.0])).unwrap();
        let mut prev = 5.0;
        for _ in 0..50 {
            let w = p.get("w").unwrap().clone();
            let g: Gradients<f64> = [("w".to_string(), w.map(|x| 2.0 * x))].into();
            sgd_step(&mut p, &g, 0.1).unwrap();
            let norm = p.get("w").unwrap().sq_norm().sqrt();
            assert!((norm - 0.8 * prev).abs() < 1e-12);
            prev = norm;
        }
    }

    #[test]
    fn schedule() {
        let plateau = DecaySchedule::Plateau;
        assert_eq!(lr_schedule(1.0, &[3.0], 0.8, plateau), 1.0);
        assert_eq!(lr_schedule(1.0, &[3.0, 2.0], 0.8, plateau), 1.0);
        let once = lr_schedule(1.0, &[3.0, 3.0], 0.8, plateau);
        assert_eq!(once, 0.8);
        let twice = lr_schedule(once, &[3.0, 3.0, 3.5], 0.8, plateau);
        assert!((twice - 0.64).abs() < 1e-15);
        assert_eq!(lr_schedule(1.0, &[3.0, 2.0], 0.5, DecaySchedule::PerEpoch), 0.5);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = TrainConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: TrainConfig = toml::from_str("batch_size = 4\nssl = false").unwrap();
        assert_eq!(partial.batch_size, 4);
        assert_eq!(partial.lr_init, 1.0);
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
        let bad = TrainConfig {
            clip_norm: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn batches_cover_every_instance_once() {
        let sample = |id: usize, k: usize, d: usize| McqSample {
            id: id.to_string(),
            article: vec![vec![3]; k],
            question: vec![3],
            answer: vec![],
            distractors: vec![vec![3, 2]; d],
        };
        let samples: Vec<_> = (0..7).map(|i| sample(i, 1 + i % 3, 1 + i % 2)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = make_batches(&samples, 3, &mut rng);
        let mut seen: Vec<Instance> = batches.concat();
        seen.sort();
        assert_eq!(seen, instances(&samples));
        assert!(batches.iter().all(|b| b.len() <= 3));
    }
}
