//! Tri-training: a jointly trained pair plus an independent third model,
//! refined with pseudo-labeled unlabeled source data.
//!
//! The one-step variant trains m1 and m2 together under the cross-model
//! orthogonality penalty and m3 on its own, then predicts by majority vote.
//! The full loop repeatedly pseudo-labels unlabeled source examples with
//! each model's two peers (accepting an example when the peers agree and at
//! least one is confident), retrains every model on its augmented set, and
//! stops once all three agree on enough of the unlabeled pool.
//!
//! Within an iteration, every pseudo-labeling and partnering decision uses
//! the models as they stood when the iteration began; the pseudo-labeling
//! phase is a barrier. That makes the three update sessions independent, so
//! the independent m3 fit may run concurrently with the joint sessions.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::HyperParams;
use crate::corpus::{train_val_split, EncodedCorpus, Vocabulary};
use crate::error::{Error, Result};
use crate::losses;
use crate::model::{self, forward, Mode, ModelParams, Prediction};
use crate::parallel;
use crate::rng;
use crate::trainer::{self, AdamState, EarlyStop, EpochStats, TrainReport};

/// Three models trained on the same vocabulary and shapes.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub m1: ModelParams,
    pub m2: ModelParams,
    pub m3: ModelParams,
    pub hp: HyperParams,
}

/// What the full loop did, for the ensemble manifest.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TriHistory {
    /// Refinement iterations actually run.
    pub iterations: usize,
    /// Agreement on the unlabeled pool, measured before each iteration and
    /// once after the last.
    pub agreement: Vec<f64>,
    /// Accepted pseudo-label counts per iteration, for models 1..3.
    pub pseudo_counts: Vec<[usize; 3]>,
}

/// Pseudo-labeled rows of an unlabeled corpus, with the peer confidences
/// that justified each acceptance.
#[derive(Debug, Clone)]
pub struct PseudoLabeledSet {
    /// Labeled corpus of the accepted rows.
    pub corpus: EncodedCorpus,
    /// Row indices into the original unlabeled corpus.
    pub kept: Vec<usize>,
    /// (confidence of peer j, confidence of peer k) per accepted row.
    pub confidences: Vec<(f64, f64)>,
}

impl PseudoLabeledSet {
    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

/// The acceptance rule on a pair of peer probabilities: both peers must
/// predict the same label and at least one with confidence above `tau`,
/// where confidence is `max(p, 1-p)`.
pub fn accept(p_j: f64, p_k: f64, tau: f64) -> Option<u8> {
    let (label_j, label_k) = (u8::from(p_j > 0.5), u8::from(p_k > 0.5));
    if label_j != label_k {
        return None;
    }
    let conf_j = p_j.max(1.0 - p_j);
    let conf_k = p_k.max(1.0 - p_k);
    if conf_j.max(conf_k) > tau {
        Some(label_j)
    } else {
        None
    }
}

/// Label unlabeled rows with two peer models.
pub fn pseudo_label(peer_j: &ModelParams, peer_k: &ModelParams, unlabeled: &EncodedCorpus, tau: f64, batch_size: usize) -> Result<PseudoLabeledSet> {
    unlabeled.reject_target()?;
    let (pred_j, pred_k) = parallel::join(
        || model::predict(peer_j, unlabeled, batch_size),
        || model::predict(peer_k, unlabeled, batch_size),
    );
    let (pred_j, pred_k) = (pred_j?, pred_k?);
    let mut kept = Vec::new();
    let mut labels = Vec::new();
    let mut confidences = Vec::new();
    for i in 0..unlabeled.len() {
        if let Some(label) = accept(pred_j.probs[i], pred_k.probs[i], tau) {
            kept.push(i);
            labels.push(label);
            confidences.push((pred_j.confidence(i), pred_k.confidence(i)));
        }
    }
    let corpus = unlabeled.subset(&kept).with_labels(labels)?;
    Ok(PseudoLabeledSet { corpus, kept, confidences })
}

/// Loss pieces of one joint batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct JointLossBreakdown {
    pub bce_primary: f64,
    pub bce_partner: f64,
    pub orthogonality: f64,
    pub diversity_primary: f64,
    pub diversity_partner: f64,
    pub total: f64,
}

/// One joint update: both models forward on the same batch, one backward
/// sweep through `w1*bce1 + w2*bce2 + alpha*L_o + beta*(L_d1+L_d2)`, then
/// each model's own optimizer applies its gradients.
#[allow(clippy::too_many_arguments)]
pub fn joint_train_batch(
    primary: &mut ModelParams,
    partner: &mut ModelParams,
    adam_primary: &mut AdamState,
    adam_partner: &mut AdamState,
    ids: &[usize],
    targets: &[f64],
    hp: &HyperParams,
    weights: (f64, f64),
    rng_primary: &mut rand_chacha::ChaCha8Rng,
    rng_partner: &mut rand_chacha::ChaCha8Rng,
) -> Result<JointLossBreakdown> {
    let mut tape = Tape::new();
    let bound1 = primary.bind(&mut tape);
    let bound2 = partner.bind(&mut tape);
    let fwd1 = forward(&mut tape, &bound1, ids, Mode::Train(rng_primary))?;
    let fwd2 = forward(&mut tape, &bound2, ids, Mode::Train(rng_partner))?;
    let bce1 = tape.bce(fwd1.yhat, targets)?;
    let bce2 = tape.bce(fwd2.yhat, targets)?;
    let l_d1 = losses::diversity_loss(&mut tape, &fwd1.attention)?;
    let l_d2 = losses::diversity_loss(&mut tape, &fwd2.attention)?;
    let l_o = losses::cross_orthogonality_loss(&mut tape, &fwd1.attention, &fwd2.attention)?;
    let l_dtri = losses::tri_diversity_loss(&mut tape, l_o, l_d1, l_d2, hp.alpha, hp.beta)?;
    let total = losses::joint_loss(&mut tape, bce1, bce2, weights, l_dtri)?;
    let grads = tape.backward(total)?;
    adam_primary.step(primary, &bound1, &tape, &grads)?;
    adam_partner.step(partner, &bound2, &tape, &grads)?;
    Ok(JointLossBreakdown {
        bce_primary: tape.value(bce1).item(),
        bce_partner: tape.value(bce2).item(),
        orthogonality: tape.value(l_o).item(),
        diversity_primary: tape.value(l_d1).item(),
        diversity_partner: tape.value(l_d2).item(),
        total: tape.value(total).item(),
    })
}

/// Train a pair jointly. Early stopping watches the primary's validation
/// loss exactly as a solo fit would; the best-validation snapshot of both
/// models is restored at exit.
pub fn joint_diversity_train(
    primary: &mut ModelParams,
    partner: &mut ModelParams,
    train: &EncodedCorpus,
    val: &EncodedCorpus,
    hp: &HyperParams,
    weights: (f64, f64),
    seed: u64,
) -> Result<TrainReport> {
    train.reject_target()?;
    val.reject_target()?;
    if train.is_empty() {
        return Err(Error::Corpus("joint training corpus is empty".into()));
    }
    let labels = train
        .labels()
        .ok_or_else(|| Error::Corpus("joint training corpus has no labels".into()))?;
    hp.validate()?;
    let mut shuffle_rng = rng::stream(seed, "joint-shuffle");
    let mut rng1 = rng::stream(seed, "joint-dropout-primary");
    let mut rng2 = rng::stream(seed, "joint-dropout-partner");
    let mut adam1 = AdamState::new(hp.learning_rate, hp.lr_decay);
    let mut adam2 = AdamState::new(hp.learning_rate, hp.lr_decay);
    let mut stopper = EarlyStop::new(hp.patience);
    let mut best = (primary.clone(), partner.clone());
    let mut epochs = Vec::new();
    let mut stopped_epoch = 0;
    for epoch in 1..=hp.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let ids = train.gather_rows(batch);
            let targets: Vec<f64> = batch.iter().map(|&i| labels[i] as f64).collect();
            let pieces = joint_train_batch(
                primary, partner, &mut adam1, &mut adam2, &ids, &targets, hp, weights, &mut rng1, &mut rng2,
            )?;
            loss_sum += pieces.total * batch.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let train_acc = trainer::evaluate_accuracy(primary, train, hp.batch_size)?;
        let (val_loss, val_acc) = trainer::evaluate(primary, val, hp.gamma, hp.batch_size)?;
        epochs.push(EpochStats { epoch, train_loss, val_loss, train_acc, val_acc });
        stopped_epoch = epoch;
        let (improved, stop) = stopper.observe(val_loss);
        if improved {
            best = (primary.clone(), partner.clone());
        }
        if stop {
            break;
        }
    }
    *primary = best.0;
    *partner = best.1;
    Ok(TrainReport { epochs, stopped_epoch, best_val_loss: stopper.best() })
}

fn session_seed(seed: u64, label: &str) -> u64 {
    rng::derive(seed, label)
}

/// Train the ensemble on labeled source data alone: m1 and m2 jointly with
/// equal weight, m3 independently, all sharing one train/validation split.
pub fn one_step_tritrain(source: &EncodedCorpus, vocab: &Vocabulary, hp: &HyperParams, seed: u64) -> Result<(Ensemble, TrainReport)> {
    source.reject_target()?;
    let (train, val) = train_val_split(source, hp.val_fraction, session_seed(seed, "split"))?;
    let cfg = model::ModelConfig::from_hyper(hp, vocab);
    let mut m1 = ModelParams::init(cfg, vocab.embeddings().clone(), session_seed(seed, "init-m1"))?;
    let mut m2 = ModelParams::init(cfg, vocab.embeddings().clone(), session_seed(seed, "init-m2"))?;
    let mut m3 = ModelParams::init(cfg, vocab.embeddings().clone(), session_seed(seed, "init-m3"))?;
    let (joint, solo) = parallel::join(
        || joint_diversity_train(&mut m1, &mut m2, &train, &val, hp, (1.0, 1.0), session_seed(seed, "joint")),
        || trainer::fit(&mut m3, &train, &val, hp, session_seed(seed, "m3")),
    );
    let report = joint?;
    solo?;
    Ok((Ensemble { m1, m2, m3, hp: hp.clone() }, report))
}

/// The full refinement loop. Bootstraps with [`one_step_tritrain`], then
/// per iteration pseudo-labels the unlabeled pool for each model using the
/// other two as they stood at the start of the iteration, retrains m1 and
/// m2 jointly (each against a start-of-iteration snapshot of its partner,
/// 2:1 in its own favor) on source plus its pseudo-labels, retrains m3 on
/// its pseudo-labels alone, and stops when three-way agreement on the
/// unlabeled pool reaches the configured threshold or the iteration budget
/// runs out.
pub fn tritrain_full(source: &EncodedCorpus, unlabeled: &EncodedCorpus, vocab: &Vocabulary, hp: &HyperParams, seed: u64, max_iters: usize) -> Result<(Ensemble, TriHistory)> {
    source.reject_target()?;
    unlabeled.reject_target()?;
    if unlabeled.is_labeled() {
        return Err(Error::Corpus("the pseudo-labeling pool must be unlabeled".into()));
    }
    let (ensemble, _) = one_step_tritrain(source, vocab, hp, seed)?;
    let Ensemble { mut m1, mut m2, mut m3, .. } = ensemble;
    let (train, val) = train_val_split(source, hp.val_fraction, session_seed(seed, "split"))?;
    let mut history = TriHistory::default();
    for iter in 1..=max_iters {
        let agreement = agreement_of_models(&m1, &m2, &m3, unlabeled, hp.batch_size)?;
        history.agreement.push(agreement);
        if agreement >= hp.agreement_stop {
            break;
        }
        // Pseudo-labeling barrier: all three sets come from the models as
        // they stand right now.
        let pl1 = pseudo_label(&m2, &m3, unlabeled, hp.tau, hp.batch_size)?;
        let pl2 = pseudo_label(&m1, &m3, unlabeled, hp.tau, hp.batch_size)?;
        let pl3 = pseudo_label(&m1, &m2, unlabeled, hp.tau, hp.batch_size)?;
        history.pseudo_counts.push([pl1.len(), pl2.len(), pl3.len()]);
        if pl3.is_empty() && iter == 1 {
            return Err(Error::EmptyPseudoLabelSet);
        }
        let snap1 = m1.clone();
        let snap2 = m2.clone();
        let train1 = train.concat(&pl1.corpus)?;
        let train2 = train.concat(&pl2.corpus)?;
        let hp1 = hp.clone();
        let seed1 = session_seed(seed, &format!("iter{iter}-m1"));
        let seed2 = session_seed(seed, &format!("iter{iter}-m2"));
        let seed3 = session_seed(seed, &format!("iter{iter}-m3"));
        let (pair_result, solo_result) = parallel::join(
            || -> Result<()> {
                let mut partner = snap2;
                joint_diversity_train(&mut m1, &mut partner, &train1, &val, &hp1, (2.0, 1.0), seed1)?;
                let mut partner = snap1;
                joint_diversity_train(&mut m2, &mut partner, &train2, &val, &hp1, (2.0, 1.0), seed2)?;
                Ok(())
            },
            || -> Result<()> {
                if pl3.is_empty() {
                    return Ok(());
                }
                trainer::fit(&mut m3, &pl3.corpus, &val, hp, seed3)?;
                Ok(())
            },
        );
        pair_result?;
        solo_result?;
        history.iterations = iter;
    }
    if history.agreement.len() == history.iterations {
        history.agreement.push(agreement_of_models(&m1, &m2, &m3, unlabeled, hp.batch_size)?);
    }
    Ok((Ensemble { m1, m2, m3, hp: hp.clone() }, history))
}

fn predictions(m1: &ModelParams, m2: &ModelParams, m3: &ModelParams, corpus: &EncodedCorpus, batch: usize) -> Result<[Prediction; 3]> {
    let (p12, p3) = parallel::join(
        || parallel::join(|| model::predict(m1, corpus, batch), || model::predict(m2, corpus, batch)),
        || model::predict(m3, corpus, batch),
    );
    let (p1, p2) = p12;
    Ok([p1?, p2?, p3?])
}

/// Fraction of examples where all three label vectors coincide.
pub fn agreement_of_labels(l1: &[u8], l2: &[u8], l3: &[u8]) -> f64 {
    let n = l1.len();
    let agree = (0..n).filter(|&i| l1[i] == l2[i] && l2[i] == l3[i]).count();
    agree as f64 / n as f64
}

fn agreement_of_models(m1: &ModelParams, m2: &ModelParams, m3: &ModelParams, corpus: &EncodedCorpus, batch: usize) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Corpus("cannot measure agreement on an empty corpus".into()));
    }
    let [p1, p2, p3] = predictions(m1, m2, m3, corpus, batch)?;
    Ok(agreement_of_labels(&p1.labels, &p2.labels, &p3.labels))
}

/// Per-example majority over three label vectors.
pub fn vote_of_labels(l1: &[u8], l2: &[u8], l3: &[u8]) -> Vec<u8> {
    (0..l1.len())
        .map(|i| u8::from(l1[i] as u32 + l2[i] as u32 + l3[i] as u32 >= 2))
        .collect()
}

impl Ensemble {
    /// Majority-vote labels over a corpus.
    pub fn majority_vote(&self, corpus: &EncodedCorpus) -> Result<Vec<u8>> {
        if corpus.is_empty() {
            return Err(Error::Corpus("cannot vote on an empty corpus".into()));
        }
        let [p1, p2, p3] = predictions(&self.m1, &self.m2, &self.m3, corpus, self.hp.batch_size)?;
        Ok(vote_of_labels(&p1.labels, &p2.labels, &p3.labels))
    }

    /// Agreement rate of the three members on a corpus.
    pub fn agreement_rate(&self, corpus: &EncodedCorpus) -> Result<f64> {
        agreement_of_models(&self.m1, &self.m2, &self.m3, corpus, self.hp.batch_size)
    }

    /// Majority-vote accuracy on a labeled corpus.
    pub fn accuracy(&self, corpus: &EncodedCorpus) -> Result<f64> {
        let labels = corpus
            .labels()
            .ok_or_else(|| Error::Corpus("accuracy needs labels".into()))?;
        let votes = self.majority_vote(corpus)?;
        let correct = votes.iter().zip(labels).filter(|(v, y)| v == y).count();
        Ok(correct as f64 / labels.len() as f64)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub seed: u64,
    pub vocab_seed: u64,
    pub hp: HyperParams,
    pub history: TriHistory,
}

/// Write `m1.ckpt`, `m2.ckpt`, `m3.ckpt` and `ensemble.json` into `dir`.
pub fn save_ensemble(dir: impl AsRef<Path>, ensemble: &Ensemble, history: &TriHistory, seed: u64, vocab_seed: u64) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (name, params) in [("m1", &ensemble.m1), ("m2", &ensemble.m2), ("m3", &ensemble.m3)] {
        model::save_checkpoint(dir.join(format!("{name}.ckpt")), params, seed, vocab_seed)?;
    }
    let manifest = EnsembleManifest {
        seed,
        vocab_seed,
        hp: ensemble.hp.clone(),
        history: history.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("ensemble manifest: {e}")))?;
    let path = dir.join("ensemble.json");
    fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_ensemble(dir: impl AsRef<Path>, vocab: &Vocabulary) -> Result<(Ensemble, EnsembleManifest)> {
    let dir = dir.as_ref();
    let path = dir.join("ensemble.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: EnsembleManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (m1, _) = model::load_checkpoint(dir.join("m1.ckpt"), vocab)?;
    let (m2, _) = model::load_checkpoint(dir.join("m2.ckpt"), vocab)?;
    let (m3, _) = model::load_checkpoint(dir.join("m3.ckpt"), vocab)?;
    let ensemble = Ensemble { m1, m2, m3, hp: manifest.hp.clone() };
    Ok((ensemble, manifest))
}
