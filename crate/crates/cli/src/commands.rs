use std::fs;
use std::path::{Path, PathBuf};

use chn::corpus::{self, split_path};
use chn::evaluation::{evaluate_corpus, ReferenceMode};
use chn::gradients::{check_selected_blocks, TOLERANCE};
use chn::inference::{generate as run_generation, BeamConfig, GenerationRecord};
use chn::text::{compute_stats, load_embeddings, Limits, McqSample, Vocabulary};
use chn::trainer::{self, OutputDir, Precision, TrainConfig};
use chn::{Chn, ModelConfig};
use chn_tensor::Scalar;
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{require, CliError, Result};
use crate::manifest::RunManifest;
use crate::{EvaluateArgs, GenerateArgs, GradcheckArgs, Preset, PrecisionArg, StatsArgs, TrainArgs};

const VOCAB_FILE: &str = "vocab.tsv";
const MODEL_FILE: &str = "model.json";
const MANIFEST_FILE: &str = "manifest.json";

/// Architecture and preprocessing of a trained model, stored beside its
/// checkpoints.
#[derive(Debug, Serialize, Deserialize)]
struct ModelInfo {
    model: ModelConfig,
    precision: Precision,
    limits: Limits,
}

fn to_json<S: Serialize>(value: &S) -> serde_json::Value {
    serde_json::to_value(value).expect("plain data serializes")
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Json {
        path: path.into(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(require(path)?).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Json {
        path: path.into(),
        source: e,
    })
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(require(path)?).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::ConfigSchema {
        path: path.into(),
        message: e.message().to_string(),
    })
}

/// Defaults, then the config file, then the preset, then explicit flags.
fn resolve_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => TrainConfig::default(),
    };
    if let Some(preset) = args.preset {
        (cfg.coattention, cfg.ssl) = match preset {
            Preset::Hred => (false, false),
            Preset::Coattn => (true, false),
            Preset::Ssl => (false, true),
            Preset::Full => (true, true),
        };
    }
    if let Some(lambda) = args.lambda {
        cfg.lambda_ssl = lambda;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(p) = args.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args)?;
    let train_path = require(split_path(&args.data_dir, "train"))?;
    let dev_path = require(split_path(&args.data_dir, "dev"))?;
    if let Some(e) = &args.embeddings {
        require(e)?;
    }
    let out = OutputDir::new(&args.out)?;

    let mut manifest = RunManifest::new("train", Some(cfg.seed), to_json(&cfg));
    manifest.input(&train_path)?;
    manifest.input(&dev_path)?;
    if let Some(e) = &args.embeddings {
        manifest.input(e)?;
    }
    manifest.output("best", out.best());
    manifest.output("log", out.log());
    manifest.output("vocab", out.path().join(VOCAB_FILE));
    manifest.output("model", out.path().join(MODEL_FILE));
    manifest.write(&out.path().join(MANIFEST_FILE))?;

    let train_tok = corpus::load_tokenized(&train_path)?;
    let dev_tok = corpus::load_tokenized(&dev_path)?;
    let vocab = corpus::build_vocab(&train_tok, cfg.vocab_size)?;
    vocab.save(&out.path().join(VOCAB_FILE))?;
    let (train_set, report) = corpus::encode(&train_tok, &vocab, &cfg.limits);
    info!("train: {} samples, truncation {report:?}", train_set.len());
    let (dev_set, report) = corpus::encode(&dev_tok, &vocab, &cfg.limits);
    info!("dev: {} samples, truncation {report:?}", dev_set.len());

    let info = ModelInfo {
        model: cfg.model_config(vocab.len()),
        precision: cfg.precision,
        limits: cfg.limits.clone(),
    };
    write_json(&out.path().join(MODEL_FILE), &info)?;

    match cfg.precision {
        Precision::F32 => train_with::<f32>(&cfg, &info, &vocab, &train_set, &dev_set, &out, &args),
        Precision::F64 => train_with::<f64>(&cfg, &info, &vocab, &train_set, &dev_set, &out, &args),
    }
}

fn train_with<T: Scalar>(
    cfg: &TrainConfig,
    info: &ModelInfo,
    vocab: &Vocabulary,
    train_set: &[McqSample],
    dev_set: &[McqSample],
    out: &OutputDir,
    args: &TrainArgs,
) -> Result<()> {
    let mut model = Chn::<T>::new(info.model.clone(), cfg.seed)?;
    if let Some(path) = &args.embeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (table, report) = load_embeddings::<T, _>(path, vocab, cfg.embed_dim, &mut rng)?;
        info!(
            "embeddings: {} of {} tokens found ({:.1}%), {} lines skipped",
            report.found,
            vocab.len(),
            100.0 * report.coverage,
            report.skipped_lines
        );
        model.set_embeddings(table)?;
    }
    let summary = trainer::train(&mut model, train_set, dev_set, cfg, Some(out))?;
    println!(
        "trained {} epochs ({} steps); best epoch {} with validation NLL/token {:.4}; final lr {:.4}",
        summary.epochs_run, summary.steps, summary.best_epoch, summary.best_valid_nll, summary.final_lr
    );
    println!("checkpoint: {}", out.best().display());
    Ok(())
}

fn load_model<T: Scalar>(checkpoint: &Path, info: &ModelInfo) -> Result<Chn<T>> {
    Ok(Chn::<T>::load(checkpoint, info.model.clone())?)
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let checkpoint = require(&args.checkpoint)?;
    let dir = checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
    let info: ModelInfo = read_json(&dir.join(MODEL_FILE))?;
    let vocab = Vocabulary::load(&require(dir.join(VOCAB_FILE))?)?;
    let split = require(split_path(&args.data_dir, &args.split))?;
    if !(0.0..=1.0).contains(&args.jaccard_threshold) {
        return Err(chn::ChnError::Config(format!(
            "jaccard threshold {} outside [0, 1]",
            args.jaccard_threshold
        ))
        .into());
    }
    let beam = BeamConfig {
        beam_size: args.beam_size,
        max_len: args.max_len,
        length_norm: !args.no_length_norm,
    };

    let mut manifest = RunManifest::new(
        "generate",
        None,
        serde_json::json!({
            "beam": to_json(&beam),
            "jaccard_threshold": args.jaccard_threshold,
            "model": to_json(&info),
        }),
    );
    manifest.input(&checkpoint)?;
    manifest.input(&split)?;
    manifest.output("generated", &args.out);
    manifest.write(&manifest_path(&args.out))?;

    let tokenized = corpus::load_tokenized(&split)?;
    let (samples, _) = corpus::encode(&tokenized, &vocab, &info.limits);
    let records = match info.precision {
        Precision::F32 => {
            let model = load_model::<f32>(&checkpoint, &info)?;
            run_generation(&model, &samples, &vocab, &beam, args.jaccard_threshold)?
        }
        Precision::F64 => {
            let model = load_model::<f64>(&checkpoint, &info)?;
            run_generation(&model, &samples, &vocab, &beam, args.jaccard_threshold)?
        }
    };
    corpus::write_jsonl(&args.out, &records)?;
    let relaxed = records.iter().filter(|r| r.relaxed_threshold.is_some()).count();
    println!(
        "generated {} samples ({relaxed} with a relaxed threshold) -> {}",
        records.len(),
        args.out.display()
    );
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn read_generated(path: &Path) -> Result<Vec<GenerationRecord>> {
    let text = fs::read_to_string(require(path)?).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| {
                CliError::Chn(chn::ChnError::Json {
                    path: path.into(),
                    line: i + 1,
                    source: e,
                })
            })
        })
        .collect()
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let generated = read_generated(&args.generated)?;
    let gold = corpus::load_tokenized(&require(split_path(&args.data_dir, &args.split))?)?;
    let mode = if args.strict {
        ReferenceMode::Strict
    } else {
        ReferenceMode::MultiReference
    };
    let report = evaluate_corpus(&generated, &gold, mode)?;
    print!("{report}");
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string(&report).expect("report serializes")),
    }
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let only = (!args.blocks.is_empty()).then_some(args.blocks.as_slice());
    let blocks = check_selected_blocks(args.eps, args.seed, only)?;
    println!("{:<24}{:>14}{:>12}{:>10}", "block", "max rel err", "coords", "seconds");
    let mut failed = Vec::new();
    for b in &blocks {
        let verdict = if b.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<24}{:>14.3e}{:>12}{:>10.1}  {verdict}",
            b.block, b.max_rel_error, b.coordinates, b.seconds
        );
        if !b.passed() {
            failed.push(b.block);
        }
    }
    println!("tolerance {TOLERANCE:e}, eps {:e}", args.eps);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(failed.join(", ")))
    }
}

pub fn stats(args: StatsArgs) -> Result<()> {
    let path = require(split_path(&args.data_dir, &args.split))?;
    let samples = corpus::load_tokenized(&path)?;
    let s = compute_stats(&samples)?;
    println!("split                     {}", args.split);
    println!("samples (pairs)           {}", s.samples);
    println!("questions                 {}", s.questions);
    println!("incomplete questions (%)  {:.2}", s.pct_incomplete_questions);
    println!("avg article length        {:.2}", s.avg_article_len);
    println!("avg question length       {:.2}", s.avg_question_len);
    println!("avg distractor length     {:.2}", s.avg_distractor_len);
    Ok(())
}
