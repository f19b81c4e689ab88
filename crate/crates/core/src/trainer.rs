//! Single-model training: Adam with inverse-time learning-rate decay,
//! seeded mini-batching, early stopping on validation loss, and evaluation.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::autodiff::{Gradients, Tape, Tensor};
use crate::config::HyperParams;
use crate::corpus::EncodedCorpus;
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown};
use crate::model::{forward, BoundModel, Mode, ModelParams};
use crate::rng;

/// Validation loss must drop by at least this much to count as progress.
pub const IMPROVEMENT_TOL: f64 = 1e-5;

/// Adam with per-update inverse-time decay: the update at step count `t`
/// (starting from 0) uses `lr_t = lr0 / (1 + decay * t)`, then standard
/// bias-corrected moment updates.
pub struct AdamState {
    lr0: f64,
    decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: HashMap<&'static str, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(lr0: f64, decay: f64) -> AdamState {
        AdamState {
            lr0,
            decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    /// Learning rate the next update will use.
    pub fn effective_lr(&self) -> f64 {
        self.lr0 / (1.0 + self.decay * self.t as f64)
    }

    /// One optimizer step over raw parameter/gradient slices. All tensors
    /// of one model must go through a single call so they share the step
    /// count.
    pub fn step_slices(&mut self, items: &mut [(&'static str, &mut [f64], &[f64])]) -> Result<()> {
        let lr_t = self.effective_lr();
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, param, grad) in items {
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGrad { tensor: name.to_string() });
            }
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                param[i] -= lr_t * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// One step over a bound model: gradients are looked up by the bound
    /// variable ids, parameters updated in place.
    pub fn step(&mut self, params: &mut ModelParams, bound: &BoundModel, tape: &Tape, grads: &Gradients) -> Result<()> {
        let dense: Vec<(&'static str, Tensor)> = bound
            .vars()
            .iter()
            .map(|&(name, id)| {
                let t = tape.value(id);
                (name, grads.dense(id, t.rows(), t.cols()))
            })
            .collect();
        let mut items: Vec<(&'static str, &mut [f64], &[f64])> = params
            .trainable_mut()
            .into_iter()
            .zip(&dense)
            .map(|((name, param), (gname, grad))| {
                debug_assert_eq!(name, *gname);
                (name, param.data_mut(), grad.data())
            })
            .collect();
        self.step_slices(&mut items)
    }
}

/// Early-stopping counter: stop after `patience` consecutive epochs without
/// improvement; 0 disables stopping.
pub struct EarlyStop {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> EarlyStop {
        EarlyStop { patience, best: f64::INFINITY, stale: 0 }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Record one epoch's validation loss; returns (improved, stop).
    pub fn observe(&mut self, val_loss: f64) -> (bool, bool) {
        if val_loss < self.best - IMPROVEMENT_TOL {
            self.best = val_loss;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.patience > 0 && self.stale >= self.patience)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub stopped_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,train_acc,val_acc\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.epoch, e.train_loss, e.val_loss, e.train_acc, e.val_acc
            );
        }
        out
    }
}

fn check_trainable(corpus: &EncodedCorpus, what: &str) -> Result<()> {
    corpus.reject_target()?;
    if corpus.is_empty() {
        return Err(Error::Corpus(format!("{what} corpus is empty")));
    }
    if !corpus.is_labeled() {
        return Err(Error::Corpus(format!("{what} corpus has no labels")));
    }
    Ok(())
}

/// Run one training batch: forward in train mode, objective
/// `bce + gamma * L_d`, backward, Adam update. Returns the loss pieces.
pub fn train_batch(params: &mut ModelParams, adam: &mut AdamState, ids: &[usize], targets: &[f64], gamma: f64, dropout_rng: &mut rand_chacha::ChaCha8Rng) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fwd = forward(&mut tape, &bound, ids, Mode::Train(dropout_rng))?;
    let bce = tape.bce(fwd.yhat, targets)?;
    let l_d = losses::diversity_loss(&mut tape, &fwd.attention)?;
    let total = losses::total_loss(&mut tape, bce, l_d, gamma)?;
    let grads = tape.backward(total)?;
    adam.step(params, &bound, &tape, &grads)?;
    Ok(LossBreakdown {
        bce: tape.value(bce).item(),
        diversity: tape.value(l_d).item(),
        total: tape.value(total).item(),
    })
}

/// Eval-mode loss and accuracy of the full objective over a corpus.
pub fn evaluate(params: &ModelParams, corpus: &EncodedCorpus, gamma: f64, batch_size: usize) -> Result<(f64, f64)> {
    if corpus.is_empty() {
        return Err(Error::Corpus("cannot evaluate an empty corpus".into()));
    }
    let labels = corpus
        .labels()
        .ok_or_else(|| Error::Corpus("evaluation needs labels".into()))?;
    let batch = batch_size.max(1);
    let starts: Vec<usize> = (0..corpus.len()).step_by(batch).collect();
    let chunks = crate::parallel::map_indexed(starts.len(), |i| -> Result<(f64, usize, usize)> {
        let start = starts[i];
        let count = batch.min(corpus.len() - start);
        let targets: Vec<f64> = labels[start..start + count].iter().map(|&l| l as f64).collect();
        let mut tape = Tape::inference();
        let bound = params.bind(&mut tape);
        let fwd = forward(&mut tape, &bound, corpus.id_rows(start, count), Mode::Eval)?;
        let bce = tape.bce(fwd.yhat, &targets)?;
        let l_d = losses::diversity_loss(&mut tape, &fwd.attention)?;
        let total = losses::total_loss(&mut tape, bce, l_d, gamma)?;
        let correct = tape
            .value(fwd.yhat)
            .data()
            .iter()
            .zip(&targets)
            .filter(|(&p, &y)| u8::from(p > 0.5) == y as u8)
            .count();
        Ok((tape.value(total).item() * count as f64, correct, count))
    });
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut total = 0;
    for c in chunks {
        let (l, c_ok, n) = c?;
        loss_sum += l;
        correct += c_ok;
        total += n;
    }
    Ok((loss_sum / total as f64, correct as f64 / total as f64))
}

/// Fraction of examples whose thresholded prediction matches the label.
pub fn evaluate_accuracy(params: &ModelParams, corpus: &EncodedCorpus, batch_size: usize) -> Result<f64> {
    let labels = corpus
        .labels()
        .ok_or_else(|| Error::Corpus("accuracy needs labels".into()))?;
    let pred = crate::model::predict(params, corpus, batch_size)?;
    let correct = pred.labels.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Train until the epoch budget or patience runs out; the parameters left
/// in `params` are the best-validation snapshot.
pub fn fit(params: &mut ModelParams, train: &EncodedCorpus, val: &EncodedCorpus, hp: &HyperParams, seed: u64) -> Result<TrainReport> {
    check_trainable(train, "training")?;
    check_trainable(val, "validation")?;
    hp.validate()?;
    let labels = train.labels().unwrap();
    let mut shuffle_rng = rng::stream(seed, "shuffle");
    let mut dropout_rng = rng::stream(seed, "dropout");
    let mut adam = AdamState::new(hp.learning_rate, hp.lr_decay);
    let mut stopper = EarlyStop::new(hp.patience);
    let mut best_params = params.clone();
    let mut epochs = Vec::new();
    let mut stopped_epoch = 0;
    for epoch in 1..=hp.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let ids = train.gather_rows(batch);
            let targets: Vec<f64> = batch.iter().map(|&i| labels[i] as f64).collect();
            let pieces = train_batch(params, &mut adam, &ids, &targets, hp.gamma, &mut dropout_rng)?;
            loss_sum += pieces.total * batch.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let train_acc = evaluate_accuracy(params, train, hp.batch_size)?;
        let (val_loss, val_acc) = evaluate(params, val, hp.gamma, hp.batch_size)?;
        epochs.push(EpochStats { epoch, train_loss, val_loss, train_acc, val_acc });
        stopped_epoch = epoch;
        let (improved, stop) = stopper.observe(val_loss);
        if improved {
            best_params = params.clone();
        }
        if stop {
            break;
        }
    }
    *params = best_params;
    Ok(TrainReport {
        epochs,
        stopped_epoch,
        best_val_loss: stopper.best(),
    })
}
