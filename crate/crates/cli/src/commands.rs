//! The five subcommands. Each validates its inputs fully before touching
//! any model, then runs one training/evaluation per configured seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use divatt::corpus::{self, Origin, RawExample, Vocabulary};
use divatt::error::{Error, Result};
use divatt::model::{self, ModelConfig, ModelParams};
use divatt::tritrain::{self, TriHistory};
use divatt::{checks, rng, trainer, HyperParams};

use crate::config::{RunConfig, Variant};

fn require_path<'a>(path: Option<&'a Path>, what: &str) -> Result<&'a Path> {
    let p = path.ok_or_else(|| Error::Config(format!("a {what} path is required")))?;
    if !p.exists() {
        return Err(Error::Config(format!("{what} file {} does not exist", p.display())));
    }
    Ok(p)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

/// A labeled test set, with the error spelled out when someone hands in an
/// unlabeled file.
fn load_test_labeled(path: &Path) -> Result<Vec<RawExample>> {
    corpus::load_labeled(path).map_err(|e| match e {
        Error::Parse { .. } => Error::Config(format!("labels required: evaluation needs label<TAB>text lines ({e})")),
        other => other,
    })
}

fn mean_stddev(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn print_aggregate(what: &str, accs: &[f64]) {
    if accs.len() > 1 {
        let (mean, sd) = mean_stddev(accs);
        println!("# aggregate {what}: mean {mean:.6} stddev {sd:.6} over {} runs", accs.len());
    }
}

/// Per-seed hyperparameters: the run seed replaces the configured one.
fn hp_for_seed(hp: &HyperParams, seed: u64) -> HyperParams {
    let mut hp = hp.clone();
    hp.seed = seed;
    hp
}

fn encode_labeled(examples: &[RawExample], vocab: &Vocabulary, hp: &HyperParams) -> Result<corpus::EncodedCorpus> {
    corpus::encode(examples, vocab, hp.max_len, Origin::SourceLabeled)
}

/// Train one single-attention model per seed and write checkpoints plus
/// epoch reports.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    if !matches!(cfg.variant, Variant::Mha | Variant::Mhad) {
        return Err(Error::Config(format!("train handles variants mha and mhad, not {}", cfg.variant)));
    }
    let train_path = require_path(cfg.train.as_deref(), "train")?;
    let emb_path = require_path(cfg.embeddings.as_deref(), "embeddings")?;
    let mut hp = cfg.hp.clone();
    if cfg.variant == Variant::Mha && hp.gamma != 0.0 {
        eprintln!("warning: variant mha has no diversity penalty; forcing gamma = 0 (was {})", hp.gamma);
        hp.gamma = 0.0;
    }
    let examples = corpus::load_labeled(train_path)?;
    write_file(&cfg.run_root().join("run.conf"), cfg.to_config_string())?;
    for &seed in &cfg.seeds {
        let hp = hp_for_seed(&hp, seed);
        let vocab = corpus::load_embeddings(emb_path, seed)?;
        let encoded = encode_labeled(&examples, &vocab, &hp)?;
        let (train_c, val_c) = corpus::train_val_split(&encoded, hp.val_fraction, rng::derive(seed, "split"))?;
        let config = ModelConfig::from_hyper(&hp, &vocab);
        let mut params = ModelParams::init(config, vocab.embeddings().clone(), seed)?;
        let report = trainer::fit(&mut params, &train_c, &val_c, &hp, seed)?;
        let dir = cfg.run_dir(seed);
        let ckpt = dir.join("model.ckpt");
        if let Some(parent) = ckpt.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        model::save_checkpoint(&ckpt, &params, seed, vocab.seed())?;
        write_file(&dir.join("train_report.csv"), report.to_csv())?;
        println!(
            "{} seed {seed}: {} epochs, best val loss {:.6}, checkpoint {}",
            cfg.variant,
            report.stopped_epoch,
            report.best_val_loss,
            ckpt.display()
        );
    }
    Ok(())
}

/// Train one three-model ensemble per seed; tri2 additionally refines on
/// pseudo-labeled unlabeled source data.
pub fn cmd_tritrain(cfg: &RunConfig) -> Result<()> {
    if !matches!(cfg.variant, Variant::Tri1 | Variant::Tri2) {
        return Err(Error::Config(format!("tritrain handles variants tri1 and tri2, not {}", cfg.variant)));
    }
    let train_path = require_path(cfg.train.as_deref(), "train")?;
    let emb_path = require_path(cfg.embeddings.as_deref(), "embeddings")?;
    let examples = corpus::load_labeled(train_path)?;
    let unl_examples = if cfg.variant == Variant::Tri2 {
        let unl_path = require_path(cfg.unlabeled.as_deref(), "unlabeled")?;
        corpus::load_unlabeled(unl_path)?
    } else {
        Vec::new()
    };
    let test_examples = match cfg.test.as_deref() {
        Some(p) => Some(load_test_labeled(p)?),
        None => None,
    };
    write_file(&cfg.run_root().join("run.conf"), cfg.to_config_string())?;
    let mut accs = Vec::new();
    for &seed in &cfg.seeds {
        let hp = hp_for_seed(&cfg.hp, seed);
        let vocab = corpus::load_embeddings(emb_path, seed)?;
        let encoded = encode_labeled(&examples, &vocab, &hp)?;
        let (ensemble, history) = match cfg.variant {
            Variant::Tri1 => {
                let (ensemble, _) = tritrain::one_step_tritrain(&encoded, &vocab, &hp, seed)?;
                (ensemble, TriHistory::default())
            }
            _ => {
                let unl = corpus::encode(&unl_examples, &vocab, hp.max_len, Origin::SourceUnlabeled)?;
                let (ensemble, history) = tritrain::tritrain_full(&encoded, &unl, &vocab, &hp, seed, hp.max_iterations)?;
                for (i, a) in history.agreement.iter().enumerate() {
                    println!("{} seed {seed} iteration {i}: agreement {a:.4}", cfg.variant);
                }
                (ensemble, history)
            }
        };
        let dir = cfg.run_dir(seed).join("ensemble");
        tritrain::save_ensemble(&dir, &ensemble, &history, seed, vocab.seed())?;
        println!("{} seed {seed}: {} refinement iterations, ensemble {}", cfg.variant, history.iterations, dir.display());
        if let Some(test_ex) = &test_examples {
            let test_c = corpus::encode(test_ex, &vocab, hp.max_len, Origin::TargetTest)?;
            let acc = ensemble.accuracy(&test_c)?;
            println!("{} seed {seed}: test accuracy {acc:.6}", cfg.variant);
            accs.push(acc);
        }
    }
    print_aggregate("test accuracy", &accs);
    Ok(())
}

fn eval_one(cfg: &RunConfig, checkpoint: &Path, emb_path: &Path, examples: &[RawExample]) -> Result<(u64, String, f64)> {
    let ensemble_manifest = checkpoint.join("ensemble.json");
    if ensemble_manifest.is_file() {
        let bytes = fs::read(&ensemble_manifest).map_err(|e| Error::io(ensemble_manifest.display().to_string(), e))?;
        let manifest: tritrain::EnsembleManifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", ensemble_manifest.display())))?;
        let vocab = corpus::load_embeddings(emb_path, manifest.vocab_seed)?;
        let (ensemble, manifest) = tritrain::load_ensemble(checkpoint, &vocab)?;
        let test_c = corpus::encode(examples, &vocab, ensemble.hp.max_len, Origin::TargetTest)?;
        let acc = ensemble.accuracy(&test_c)?;
        let label = match cfg.variant {
            Variant::Tri1 | Variant::Tri2 => cfg.variant.to_string(),
            // ensemble directory under a single-model default: infer
            _ if manifest.history.iterations == 0 => Variant::Tri1.to_string(),
            _ => Variant::Tri2.to_string(),
        };
        Ok((manifest.seed, label, acc))
    } else {
        let manifest = model::read_manifest(checkpoint)?;
        let vocab = corpus::load_embeddings(emb_path, manifest.vocab_seed)?;
        let (params, manifest) = model::load_checkpoint(checkpoint, &vocab)?;
        let test_c = corpus::encode(examples, &vocab, manifest.config.max_len, Origin::TargetTest)?;
        let acc = trainer::evaluate_accuracy(&params, &test_c, cfg.hp.batch_size)?;
        Ok((manifest.seed, cfg.variant.to_string(), acc))
    }
}

/// Evaluate checkpoints on a labeled test set and emit one CSV line each.
/// With no explicit checkpoints, the paths the train/tritrain commands
/// would have written for the configured variant and seeds are used.
pub fn cmd_eval(cfg: &RunConfig, explicit: &[PathBuf]) -> Result<()> {
    let test_path = require_path(cfg.test.as_deref(), "test")?;
    let emb_path = require_path(cfg.embeddings.as_deref(), "embeddings")?;
    let examples = load_test_labeled(test_path)?;
    let checkpoints: Vec<PathBuf> = if explicit.is_empty() {
        cfg.seeds
            .iter()
            .map(|&s| {
                let dir = cfg.run_dir(s);
                match cfg.variant {
                    Variant::Tri1 | Variant::Tri2 => dir.join("ensemble"),
                    _ => dir.join("model.ckpt"),
                }
            })
            .collect()
    } else {
        explicit.to_vec()
    };
    for ck in &checkpoints {
        if !ck.exists() {
            return Err(Error::Config(format!("checkpoint {} does not exist", ck.display())));
        }
    }
    println!("source,target,variant,seed,accuracy");
    let mut accs = Vec::new();
    for ck in &checkpoints {
        let (seed, label, acc) = eval_one(cfg, ck, emb_path, &examples)?;
        println!("{},{},{label},{seed},{acc:.6}", cfg.source, cfg.target);
        accs.push(acc);
    }
    print_aggregate("accuracy", &accs);
    Ok(())
}

/// Write a plain-text report of each head's top tokens per example.
pub fn cmd_attend(cfg: &RunConfig, checkpoint: &Path, input: Option<&Path>, top_k: usize) -> Result<()> {
    let emb_path = require_path(cfg.embeddings.as_deref(), "embeddings")?;
    let input = require_path(input.or(cfg.test.as_deref()), "input")?;
    if !checkpoint.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let manifest = model::read_manifest(checkpoint)?;
    let vocab = corpus::load_embeddings(emb_path, manifest.vocab_seed)?;
    let (params, manifest) = model::load_checkpoint(checkpoint, &vocab)?;
    // accept labeled or bare-text input; attention needs only the text
    let examples = match corpus::load_labeled(input) {
        Ok(ex) => ex,
        Err(Error::Parse { .. }) => corpus::load_unlabeled(input)?,
        Err(e) => return Err(e),
    };
    let encoded = corpus::encode(&examples, &vocab, manifest.config.max_len, Origin::TargetTest)?;
    let report = model::attend_report(&params, &encoded, &vocab, top_k, cfg.hp.batch_size)?;
    let mut out = String::new();
    for (i, ex) in report.iter().enumerate() {
        let _ = writeln!(out, "example {}: p={:.6} label={}", i + 1, ex.prob, ex.label);
        for (h, tokens) in ex.heads.iter().enumerate() {
            let cells: Vec<String> = tokens.iter().map(|(tok, w)| format!("{tok}={w:.6}")).collect();
            let _ = writeln!(out, "  head {}: {}", h + 1, cells.join(" "));
        }
    }
    let path = cfg.output_dir.join("attend.txt");
    write_file(&path, out)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Run the finite-difference suite; returns whether everything passed.
pub fn cmd_gradcheck(seed: u64) -> Result<bool> {
    let reports = checks::run_gradcheck_suite(seed)?;
    let failed = reports.iter().filter(|r| !r.passed()).count();
    for r in &reports {
        println!("{r}");
    }
    println!("{} checks run, {failed} failed", reports.len());
    Ok(failed == 0)
}
