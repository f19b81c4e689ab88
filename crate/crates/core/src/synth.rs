//! Synthetic corpora for tests and scaled-down experiments.
//!
//! The two-domain task mirrors the structure of a domain shift: both
//! domains share a small set of label-carrying pivot tokens, but each
//! domain also has its own, stronger label-carrying tokens that do not
//! transfer. A model that leans on the source-only tokens looks great on
//! source validation data and stumbles on the target; a model that spreads
//! its attention has a better chance of picking up the shared pivots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{encode, EncodedCorpus, Origin, RawExample, Vocabulary};
use crate::error::{Error, Result};
use crate::rng;

/// Random embedding rows for the given tokens, uniform in [-0.5, 0.5].
pub fn embedding_rows(tokens: &[String], dim: usize, seed: u64) -> Vec<(String, Vec<f64>)> {
    let mut r = rng::stream(seed, "synth-embeddings");
    tokens
        .iter()
        .map(|t| (t.clone(), (0..dim).map(|_| r.random_range(-0.5..0.5)).collect()))
        .collect()
}

/// Write embedding rows in the classic text format.
pub fn write_embeddings(path: impl AsRef<Path>, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let path = path.as_ref();
    let dim = rows.first().map_or(0, |(_, v)| v.len());
    let mut out = format!("{} {}\n", rows.len(), dim);
    for (token, vector) in rows {
        out.push_str(token);
        for v in vector {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write a labeled corpus file: `label<TAB>text` lines.
pub fn write_labeled(path: impl AsRef<Path>, examples: &[RawExample]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for ex in examples {
        let label = ex
            .label
            .ok_or_else(|| Error::Corpus("cannot write unlabeled example to a labeled file".into()))?;
        let _ = writeln!(out, "{label}\t{}", ex.text);
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write an unlabeled corpus file: bare text lines.
pub fn write_unlabeled(path: impl AsRef<Path>, examples: &[RawExample]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for ex in examples {
        let _ = writeln!(out, "{}", ex.text);
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// A memorization task: 32 examples over a 50-token vocabulary (48 words
/// plus PAD and UNK), 8-dimensional embeddings, width 10. Each class draws
/// from its own token pool, so a tiny model can reach perfect training
/// accuracy.
pub fn overfit_task(seed: u64) -> Result<(Vocabulary, EncodedCorpus)> {
    let tokens: Vec<String> = (0..48).map(|i| format!("t{i}")).collect();
    let rows = embedding_rows(&tokens, 8, seed);
    let vocab = Vocabulary::from_rows(rows, 8, seed)?;
    let mut r = rng::stream(seed, "overfit-task");
    let mut examples = Vec::with_capacity(32);
    for i in 0..32 {
        let label = (i % 2) as u8;
        let pool: Vec<usize> = if label == 1 { (0..16).collect() } else { (16..32).collect() };
        let mut words = Vec::with_capacity(10);
        for _ in 0..6 {
            words.push(tokens[pool[r.random_range(0..pool.len())]].clone());
        }
        for _ in 0..4 {
            words.push(tokens[r.random_range(32..48)].clone());
        }
        words.shuffle(&mut r);
        examples.push(RawExample { text: words.join(" "), label: Some(label) });
    }
    let corpus = encode(&examples, &vocab, 10, Origin::SourceLabeled)?;
    Ok((vocab, corpus))
}

#[derive(Debug, Clone, Copy)]
pub struct TwoDomainConfig {
    pub n_source: usize,
    pub n_unlabeled: usize,
    pub n_target: usize,
    pub max_len: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for TwoDomainConfig {
    fn default() -> Self {
        TwoDomainConfig {
            n_source: 160,
            n_unlabeled: 160,
            n_target: 400,
            max_len: 12,
            dim: 12,
            seed: 0,
        }
    }
}

/// Raw two-domain data; encode through the normal pipeline.
pub struct TwoDomain {
    pub config: TwoDomainConfig,
    pub embedding_rows: Vec<(String, Vec<f64>)>,
    pub source_labeled: Vec<RawExample>,
    pub source_unlabeled: Vec<RawExample>,
    pub target_test: Vec<RawExample>,
}

const SHARED: usize = 4;
const DOMAIN_ONLY: usize = 6;
const NOISE: usize = 20;

fn pick<'a>(pool: &'a [String], r: &mut ChaCha8Rng) -> &'a str {
    &pool[r.random_range(0..pool.len())]
}

pub fn two_domain(config: TwoDomainConfig) -> TwoDomain {
    let named = |prefix: &str, n: usize| -> Vec<String> { (0..n).map(|i| format!("{prefix}{i}")).collect() };
    let shared_pos = named("sp", SHARED);
    let shared_neg = named("sn", SHARED);
    let source_pos = named("ap", DOMAIN_ONLY);
    let source_neg = named("an", DOMAIN_ONLY);
    let target_pos = named("bp", DOMAIN_ONLY);
    let target_neg = named("bn", DOMAIN_ONLY);
    let noise = named("nz", NOISE);
    let mut tokens = Vec::new();
    for pool in [&shared_pos, &shared_neg, &source_pos, &source_neg, &target_pos, &target_neg, &noise] {
        tokens.extend(pool.iter().cloned());
    }
    let embedding_rows = embedding_rows(&tokens, config.dim, config.seed);

    // Two domain-specific tokens and one shared pivot per example: the
    // domain tokens are the stronger in-domain signal, the shared pivot the
    // only transferable one. Noise never crowds the pivots out.
    assert!(config.max_len >= 6, "two-domain examples need room for 3 pivots and noise");
    let noise_cap = config.max_len - 3;
    let make = |n: usize, domain_pos: &[String], domain_neg: &[String], r: &mut ChaCha8Rng| -> Vec<RawExample> {
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let (dpool, spool) = if label == 1 {
                    (domain_pos, &shared_pos)
                } else {
                    (domain_neg, &shared_neg)
                };
                let mut words = vec![
                    pick(dpool, r).to_string(),
                    pick(dpool, r).to_string(),
                    pick(spool, r).to_string(),
                ];
                let n_noise = r.random_range(noise_cap.min(4)..=noise_cap);
                words.extend((0..n_noise).map(|_| pick(&noise, r).to_string()));
                words.shuffle(r);
                RawExample { text: words.join(" "), label: Some(label) }
            })
            .collect()
    };

    let mut r_src = rng::stream(config.seed, "two-domain-source");
    let source_labeled = make(config.n_source, &source_pos, &source_neg, &mut r_src);
    let mut r_unl = rng::stream(config.seed, "two-domain-unlabeled");
    let source_unlabeled = make(config.n_unlabeled, &source_pos, &source_neg, &mut r_unl)
        .into_iter()
        .map(|ex| RawExample { text: ex.text, label: None })
        .collect();
    let mut r_tgt = rng::stream(config.seed, "two-domain-target");
    let target_test = make(config.n_target, &target_pos, &target_neg, &mut r_tgt);

    TwoDomain {
        config,
        embedding_rows,
        source_labeled,
        source_unlabeled,
        target_test,
    }
}

impl TwoDomain {
    pub fn vocabulary(&self, vocab_seed: u64) -> Result<Vocabulary> {
        Vocabulary::from_rows(self.embedding_rows.clone(), self.config.dim, vocab_seed)
    }

    /// Encode all three corpora with their proper origin tags.
    pub fn encode_all(&self, vocab: &Vocabulary, max_len: usize) -> Result<(EncodedCorpus, EncodedCorpus, EncodedCorpus)> {
        let source = encode(&self.source_labeled, vocab, max_len, Origin::SourceLabeled)?;
        let unlabeled = encode(&self.source_unlabeled, vocab, max_len, Origin::SourceUnlabeled)?;
        let target = encode(&self.target_test, vocab, max_len, Origin::TargetTest)?;
        Ok((source, unlabeled, target))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overfit_task_has_the_promised_shape() {
        let (vocab, corpus) = overfit_task(1).unwrap();
        assert_eq!(vocab.size(), 50);
        assert_eq!(vocab.dim(), 8);
        assert_eq!(corpus.len(), 32);
        assert_eq!(corpus.max_len(), 10);
        assert_eq!(corpus.class_counts().unwrap(), (16, 16));
    }

    #[test]
    fn two_domain_is_deterministic_and_balanced() {
        let a = two_domain(TwoDomainConfig::default());
        let b = two_domain(TwoDomainConfig::default());
        assert_eq!(a.source_labeled, b.source_labeled);
        assert_eq!(a.target_test, b.target_test);
        let pos = a.source_labeled.iter().filter(|e| e.label == Some(1)).count();
        assert_eq!(pos * 2, a.source_labeled.len());
        assert!(a.source_unlabeled.iter().all(|e| e.label.is_none()));
    }

    #[test]
    fn domain_tokens_stay_in_their_domain() {
        let d = two_domain(TwoDomainConfig::default());
        for ex in &d.source_labeled {
            assert!(!ex.text.contains("bp") && !ex.text.contains("bn"), "{}", ex.text);
        }
        for ex in &d.target_test {
            assert!(!ex.text.contains("ap") && !ex.text.contains("an"), "{}", ex.text);
        }
    }

    #[test]
    fn shared_pivots_match_the_label() {
        let d = two_domain(TwoDomainConfig::default());
        for ex in d.source_labeled.iter().chain(&d.target_test) {
            let has_sp = ex.text.contains("sp");
            let has_sn = ex.text.contains("sn");
            match ex.label.unwrap() {
                1 => assert!(has_sp && !has_sn, "{}", ex.text),
                _ => assert!(has_sn && !has_sp, "{}", ex.text),
            }
        }
    }

    #[test]
    fn corpus_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = two_domain(TwoDomainConfig { n_source: 6, n_unlabeled: 4, n_target: 4, ..TwoDomainConfig::default() });
        let labeled = dir.path().join("s.tsv");
        let unlabeled = dir.path().join("u.txt");
        let vectors = dir.path().join("vecs.txt");
        write_labeled(&labeled, &d.source_labeled).unwrap();
        write_unlabeled(&unlabeled, &d.source_unlabeled).unwrap();
        write_embeddings(&vectors, &d.embedding_rows).unwrap();
        let ex = crate::corpus::load_labeled(&labeled).unwrap();
        assert_eq!(ex, d.source_labeled);
        let un = crate::corpus::load_unlabeled(&unlabeled).unwrap();
        assert_eq!(un, d.source_unlabeled);
        let vocab = crate::corpus::load_embeddings(&vectors, 3).unwrap();
        assert_eq!(vocab.size(), d.embedding_rows.len() + 2);
        let direct = d.vocabulary(3).unwrap();
        assert_eq!(vocab.embeddings().data(), direct.embeddings().data());
    }
}
