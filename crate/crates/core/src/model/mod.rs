//! The classifier: a bidirectional LSTM encoder, a chain of attention heads
//! each driving one step of a decoder LSTM, and a sigmoid output on the
//! final decoder state.
//!
//! Every head scores the encoder states with the previous decoder state as
//! query (zeros for the first head), takes a softmax masked at padding, and
//! mixes the states into a context vector that feeds the decoder cell. The
//! carried decoder state is what chains the heads: later heads see what
//! earlier heads already summarized.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, TensorEntry};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, ValueId, BCE_EPS};
use crate::config::{HyperParams, Scoring};
use crate::corpus::{EncodedCorpus, Vocabulary, PAD_ID, UNK_ID};
use crate::error::{Error, Result};
use crate::rng;

/// Architecture shape, echoed into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Embedding width.
    pub dim: usize,
    /// Encoder hidden size per direction.
    pub hidden: usize,
    /// Attention heads, equal to decoder steps.
    pub heads: usize,
    pub max_len: usize,
    pub scoring: Scoring,
    pub dropout: f64,
    pub train_embeddings: bool,
}

impl ModelConfig {
    pub fn from_hyper(hp: &HyperParams, vocab: &Vocabulary) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.size(),
            dim: vocab.dim(),
            hidden: hp.hidden,
            heads: hp.heads,
            max_len: hp.max_len,
            scoring: hp.scoring,
            dropout: hp.dropout,
            train_embeddings: hp.train_embeddings,
        }
    }

    /// Encoder output width: both directions concatenated.
    pub fn state_width(&self) -> usize {
        2 * self.hidden
    }

    /// Decoder hidden size; doubles as the attention query width.
    pub fn decoder_hidden(&self) -> usize {
        2 * self.hidden
    }

    /// Width of the additive scoring space.
    pub fn att_dim(&self) -> usize {
        self.hidden
    }
}

/// One LSTM cell's weights as fused kernels over the four gates in order
/// input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmWeights {
    /// `input_width x 4*hidden`.
    pub wx: Tensor,
    /// `hidden x 4*hidden`.
    pub wh: Tensor,
    /// `1 x 4*hidden`; forget-gate slice initialized to 1.
    pub b: Tensor,
}

impl LstmWeights {
    fn init(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> LstmWeights {
        let mut b = Tensor::zeros(1, 4 * hidden);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmWeights {
            wx: glorot(input, 4 * hidden, rng),
            wh: glorot(hidden, 4 * hidden, rng),
            b,
        }
    }
}

#[derive(Debug, Clone)]
pub enum AttentionWeights {
    Additive {
        /// `state_width x att_dim`.
        key: Tensor,
        /// `decoder_hidden x att_dim`.
        query: Tensor,
        /// `1 x att_dim`.
        bias: Tensor,
        /// `att_dim x 1`.
        v: Tensor,
    },
    Dot {
        /// `decoder_hidden x state_width`.
        query: Tensor,
    },
}

/// All weights of one model. Tensor iteration order is fixed and named, so
/// optimizer state and checkpoints key on names.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    embedding: Tensor,
    enc_fw: LstmWeights,
    enc_bw: LstmWeights,
    attention: AttentionWeights,
    dec: LstmWeights,
    out_w: Tensor,
    out_b: Tensor,
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(rows, cols, data).expect("sized by construction")
}

impl ModelParams {
    /// Fresh weights: uniform Glorot matrices, zero biases except the
    /// forget gates at 1, deterministic in `seed`.
    pub fn init(config: ModelConfig, embedding: Tensor, seed: u64) -> Result<ModelParams> {
        if embedding.rows() != config.vocab_size || embedding.cols() != config.dim {
            return Err(Error::Shape {
                op: "init_params",
                detail: format!(
                    "embedding {:?} vs config {}x{}",
                    embedding.shape(),
                    config.vocab_size,
                    config.dim
                ),
            });
        }
        let (h, s, w) = (config.hidden, config.decoder_hidden(), config.state_width());
        let mut rng = rng::stream(seed, "init");
        let rng = &mut rng;
        let enc_fw = LstmWeights::init(config.dim, h, rng);
        let enc_bw = LstmWeights::init(config.dim, h, rng);
        let attention = match config.scoring {
            Scoring::Additive => AttentionWeights::Additive {
                key: glorot(w, config.att_dim(), rng),
                query: glorot(s, config.att_dim(), rng),
                bias: Tensor::zeros(1, config.att_dim()),
                v: glorot(config.att_dim(), 1, rng),
            },
            Scoring::DotProduct => AttentionWeights::Dot { query: glorot(s, w, rng) },
        };
        let dec = LstmWeights::init(w, s, rng);
        Ok(ModelParams {
            config,
            embedding,
            enc_fw,
            enc_bw,
            attention,
            dec,
            out_w: glorot(s, 1, rng),
            out_b: Tensor::zeros(1, 1),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embedding
    }

    /// Named weights in fixed order, excluding the embedding table.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut t = vec![
            ("enc_fw.wx", &self.enc_fw.wx),
            ("enc_fw.wh", &self.enc_fw.wh),
            ("enc_fw.b", &self.enc_fw.b),
            ("enc_bw.wx", &self.enc_bw.wx),
            ("enc_bw.wh", &self.enc_bw.wh),
            ("enc_bw.b", &self.enc_bw.b),
        ];
        match &self.attention {
            AttentionWeights::Additive { key, query, bias, v } => {
                t.extend([("att.key", key), ("att.query", query), ("att.bias", bias), ("att.v", v)]);
            }
            AttentionWeights::Dot { query } => t.push(("att.query", query)),
        }
        t.extend([
            ("dec.wx", &self.dec.wx),
            ("dec.wh", &self.dec.wh),
            ("dec.b", &self.dec.b),
            ("out.w", &self.out_w),
            ("out.b", &self.out_b),
        ]);
        t
    }

    /// Trainable tensors: the weights plus the embedding when unfrozen.
    pub fn trainable(&self) -> Vec<(&'static str, &Tensor)> {
        let mut t = self.tensors();
        if self.config.train_embeddings {
            t.push(("embedding", &self.embedding));
        }
        t
    }

    pub fn trainable_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let ModelParams { config, embedding, enc_fw, enc_bw, attention, dec, out_w, out_b } = self;
        let mut t = vec![
            ("enc_fw.wx", &mut enc_fw.wx),
            ("enc_fw.wh", &mut enc_fw.wh),
            ("enc_fw.b", &mut enc_fw.b),
            ("enc_bw.wx", &mut enc_bw.wx),
            ("enc_bw.wh", &mut enc_bw.wh),
            ("enc_bw.b", &mut enc_bw.b),
        ];
        match attention {
            AttentionWeights::Additive { key, query, bias, v } => {
                t.extend([("att.key", key), ("att.query", query), ("att.bias", bias), ("att.v", v)]);
            }
            AttentionWeights::Dot { query } => t.push(("att.query", query)),
        }
        t.extend([
            ("dec.wx", &mut dec.wx),
            ("dec.wh", &mut dec.wh),
            ("dec.b", &mut dec.b),
            ("out.w", out_w),
            ("out.b", out_b),
        ]);
        if config.train_embeddings {
            t.push(("embedding", embedding));
        }
        t
    }

    /// Put every weight on `tape` as a variable so one backward sweep
    /// yields gradients for all of them.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let vars = self
            .trainable()
            .into_iter()
            .map(|(name, t)| (name, tape.variable(t.clone())))
            .collect::<Vec<_>>();
        let find = |name: &str| vars.iter().find(|(n, _)| *n == name).map(|&(_, id)| id);
        let embedding = match find("embedding") {
            Some(id) => id,
            None => tape.constant(self.embedding.clone()),
        };
        let cell = |prefix: &str| BoundLstm {
            wx: find(&format!("{prefix}.wx")).unwrap(),
            wh: find(&format!("{prefix}.wh")).unwrap(),
            b: find(&format!("{prefix}.b")).unwrap(),
        };
        let attention = match self.attention {
            AttentionWeights::Additive { .. } => BoundAttention::Additive {
                key: find("att.key").unwrap(),
                query: find("att.query").unwrap(),
                bias: find("att.bias").unwrap(),
                v: find("att.v").unwrap(),
            },
            AttentionWeights::Dot { .. } => BoundAttention::Dot { query: find("att.query").unwrap() },
        };
        BoundModel {
            config: self.config,
            embedding,
            enc_fw: cell("enc_fw"),
            enc_bw: cell("enc_bw"),
            attention,
            dec: cell("dec"),
            out_w: find("out.w").unwrap(),
            out_b: find("out.b").unwrap(),
            vars,
        }
    }
}

struct BoundLstm {
    wx: ValueId,
    wh: ValueId,
    b: ValueId,
}

enum BoundAttention {
    Additive { key: ValueId, query: ValueId, bias: ValueId, v: ValueId },
    Dot { query: ValueId },
}

/// A model's weights materialized on a tape.
pub struct BoundModel {
    config: ModelConfig,
    embedding: ValueId,
    enc_fw: BoundLstm,
    enc_bw: BoundLstm,
    attention: BoundAttention,
    dec: BoundLstm,
    out_w: ValueId,
    out_b: ValueId,
    vars: Vec<(&'static str, ValueId)>,
}

impl BoundModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same names and order as [`ModelParams::trainable`].
    pub fn vars(&self) -> &[(&'static str, ValueId)] {
        &self.vars
    }
}

/// Forward mode: training applies dropout from the given stream.
pub enum Mode<'r> {
    Train(&'r mut ChaCha8Rng),
    Eval,
}

/// Tape handles produced by one forward pass.
pub struct Forward {
    /// `B x 1` probabilities.
    pub yhat: ValueId,
    /// One `B x max_len` row-stochastic matrix per head.
    pub attention: Vec<ValueId>,
}

fn lstm_step(tape: &mut Tape, cell: &BoundLstm, hidden: usize, x: ValueId, h: ValueId, c: ValueId) -> Result<(ValueId, ValueId)> {
    let zx = tape.matmul(x, cell.wx)?;
    let zh = tape.matmul(h, cell.wh)?;
    let zs = tape.add(zx, zh)?;
    let z = tape.add_row_bias(zs, cell.b)?;
    let zi = tape.slice_cols(z, 0, hidden)?;
    let i = tape.sigmoid(zi)?;
    let zf = tape.slice_cols(z, hidden, hidden)?;
    let f = tape.sigmoid(zf)?;
    let zg = tape.slice_cols(z, 2 * hidden, hidden)?;
    let g = tape.tanh(zg)?;
    let zo = tape.slice_cols(z, 3 * hidden, hidden)?;
    let o = tape.sigmoid(zo)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let ct = tape.tanh(c_next)?;
    let h_next = tape.mul(o, ct)?;
    Ok((h_next, c_next))
}

/// Run the model over a flat row-major `B x max_len` id batch.
pub fn forward(tape: &mut Tape, m: &BoundModel, ids: &[usize], mut mode: Mode) -> Result<Forward> {
    let cfg = &m.config;
    let t_x = cfg.max_len;
    if ids.is_empty() || ids.len() % t_x != 0 {
        return Err(Error::Shape {
            op: "forward",
            detail: format!("{} ids do not tile rows of {t_x}", ids.len()),
        });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Shape {
            op: "forward",
            detail: format!("token id {bad} outside vocabulary of {}", cfg.vocab_size),
        });
    }
    let b = ids.len() / t_x;
    let (h, s, w) = (cfg.hidden, cfg.decoder_hidden(), cfg.state_width());

    // Position-major layout: block t holds all B rows for position t.
    let mut ids_pm = Vec::with_capacity(ids.len());
    let mut mask = vec![false; ids.len()];
    for t in 0..t_x {
        for bi in 0..b {
            let id = ids[bi * t_x + t];
            ids_pm.push(id);
            mask[bi * t_x + t] = id != PAD_ID;
        }
    }

    let dropout = |tape: &mut Tape, x: ValueId, mode: &mut Mode| -> Result<ValueId> {
        match mode {
            Mode::Train(rng) if cfg.dropout > 0.0 => tape.dropout(x, cfg.dropout, rng),
            _ => Ok(x),
        }
    };

    let table = tape.gather(m.embedding, &ids_pm)?;
    let embedded = dropout(tape, table, &mut mode)?;

    // Both encoder directions; h/c start at zero.
    let run_dir = |tape: &mut Tape, cell: &BoundLstm, reverse: bool| -> Result<Vec<ValueId>> {
        let mut hc = (tape.constant(Tensor::zeros(b, h)), tape.constant(Tensor::zeros(b, h)));
        let mut states = vec![0; t_x];
        let order: Vec<usize> = if reverse { (0..t_x).rev().collect() } else { (0..t_x).collect() };
        for t in order {
            let x_t = tape.slice_rows(embedded, t * b, b)?;
            hc = lstm_step(tape, cell, h, x_t, hc.0, hc.1)?;
            states[t] = hc.0;
        }
        Ok(states)
    };
    let fw = run_dir(tape, &m.enc_fw, false)?;
    let bw = run_dir(tape, &m.enc_bw, true)?;

    let per_pos: Vec<ValueId> = fw
        .iter()
        .zip(&bw)
        .map(|(&f, &r)| tape.concat_cols(&[f, r]))
        .collect::<Result<_>>()?;
    let stacked = tape.concat_rows(&per_pos)?;
    let states = dropout(tape, stacked, &mut mode)?;

    // Key projection is query-independent, so hoist it out of the head loop.
    let keys = match m.attention {
        BoundAttention::Additive { key, bias, .. } => {
            let k = tape.matmul(states, key)?;
            Some(tape.add_row_bias(k, bias)?)
        }
        BoundAttention::Dot { .. } => None,
    };

    let mut dec_h = tape.constant(Tensor::zeros(b, s));
    let mut dec_c = tape.constant(Tensor::zeros(b, s));
    let mut attention = Vec::with_capacity(cfg.heads);
    for _ in 0..cfg.heads {
        let scores_pm = match m.attention {
            BoundAttention::Additive { query, v, .. } => {
                let q = tape.matmul(dec_h, query)?;
                let pre = tape.add_tiled(keys.unwrap(), q)?;
                let act = tape.tanh(pre)?;
                tape.matmul(act, v)?
            }
            BoundAttention::Dot { query } => {
                let q = tape.matmul(dec_h, query)?;
                let zero = tape.constant(Tensor::zeros(t_x * b, w));
                let tiled = tape.add_tiled(zero, q)?;
                let prod = tape.mul(states, tiled)?;
                tape.row_sums(prod)?
            }
        };
        let by_pos = tape.reshape(scores_pm, t_x, b)?;
        let scores = tape.transpose(by_pos)?;
        let a_i = tape.masked_softmax_rows(scores, &mask)?;
        let ctx = tape.context_mix(a_i, states)?;
        let (h_next, c_next) = lstm_step(tape, &m.dec, s, ctx, dec_h, dec_c)?;
        dec_h = h_next;
        dec_c = c_next;
        attention.push(a_i);
    }

    let logits = tape.matmul(dec_h, m.out_w)?;
    let logits = tape.add_row_bias(logits, m.out_b)?;
    let yhat = tape.sigmoid(logits)?;
    Ok(Forward { yhat, attention })
}

/// Thresholded probabilities for one batch or corpus.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Clamped to `[1e-7, 1 - 1e-7]`.
    pub probs: Vec<f64>,
    /// 1 iff the probability strictly exceeds 0.5.
    pub labels: Vec<u8>,
}

impl Prediction {
    pub fn from_probs(probs: Vec<f64>) -> Prediction {
        let probs: Vec<f64> = probs.iter().map(|p| p.clamp(BCE_EPS, 1.0 - BCE_EPS)).collect();
        let labels = probs.iter().map(|&p| u8::from(p > 0.5)).collect();
        Prediction { probs, labels }
    }

    /// Confidence in the thresholded label: `max(p, 1-p)`.
    pub fn confidence(&self, i: usize) -> f64 {
        self.probs[i].max(1.0 - self.probs[i])
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Eval-mode forward on one flat id batch, off the tape.
pub fn eval_batch(params: &ModelParams, ids: &[usize]) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let mut tape = Tape::inference();
    let bound = params.bind(&mut tape);
    let fwd = forward(&mut tape, &bound, ids, Mode::Eval)?;
    let probs = tape.value(fwd.yhat).data().to_vec();
    let stacks = fwd.attention.iter().map(|&a| tape.value(a).clone()).collect();
    Ok((probs, stacks))
}

/// Predict a whole corpus in eval mode, batched.
pub fn predict(params: &ModelParams, corpus: &EncodedCorpus, batch_size: usize) -> Result<Prediction> {
    if corpus.is_empty() {
        return Err(Error::Corpus("cannot predict an empty corpus".into()));
    }
    if corpus.max_len() != params.config.max_len {
        return Err(Error::Shape {
            op: "predict",
            detail: format!("corpus width {} vs model {}", corpus.max_len(), params.config.max_len),
        });
    }
    let batch = batch_size.max(1);
    let starts: Vec<usize> = (0..corpus.len()).step_by(batch).collect();
    let chunks = crate::parallel::map_indexed(starts.len(), |i| {
        let start = starts[i];
        let count = batch.min(corpus.len() - start);
        eval_batch(params, corpus.id_rows(start, count)).map(|(p, _)| p)
    });
    let mut probs = Vec::with_capacity(corpus.len());
    for chunk in chunks {
        probs.extend(chunk?);
    }
    Ok(Prediction::from_probs(probs))
}

/// Per-head top tokens for one example.
#[derive(Debug, Clone)]
pub struct ExampleAttention {
    pub prob: f64,
    pub label: u8,
    /// `heads[i]` lists the head's top tokens as (token, weight), best first.
    pub heads: Vec<Vec<(String, f64)>>,
}

/// What each head looked at, for a whole corpus.
pub fn attend_report(params: &ModelParams, corpus: &EncodedCorpus, vocab: &Vocabulary, top_k: usize, batch_size: usize) -> Result<Vec<ExampleAttention>> {
    if top_k < 1 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Corpus("cannot report on an empty corpus".into()));
    }
    let batch = batch_size.max(1);
    let mut out = Vec::with_capacity(corpus.len());
    let mut start = 0;
    while start < corpus.len() {
        let count = batch.min(corpus.len() - start);
        let ids = corpus.id_rows(start, count);
        let (probs, stacks) = eval_batch(params, ids)?;
        for bi in 0..count {
            let row = corpus.row(start + bi);
            let heads = stacks
                .iter()
                .map(|a| {
                    let mut ranked: Vec<(usize, f64)> = row
                        .iter()
                        .enumerate()
                        .filter(|&(_, &id)| id != PAD_ID && id != UNK_ID)
                        .map(|(t, _)| (t, a.get(bi, t)))
                        .collect();
                    ranked.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
                    ranked
                        .into_iter()
                        .take(top_k)
                        .map(|(t, wgt)| (vocab.token(row[t]).to_string(), wgt))
                        .collect()
                })
                .collect();
            let p = probs[bi].clamp(BCE_EPS, 1.0 - BCE_EPS);
            out.push(ExampleAttention { prob: p, label: u8::from(p > 0.5), heads });
        }
        start += count;
    }
    Ok(out)
}
