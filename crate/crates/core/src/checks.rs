//! A numerical verification suite: every tape primitive, every loss, and
//! the full model objective checked against central finite differences.
//!
//! The suite exists so a refactor of any backward rule fails loudly. It
//! runs in the test suite and behind the `gradcheck` CLI command; all of
//! it finishes in seconds at the fixed small sizes used here.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, GradCheckReport, Tape, Tensor, ValueId};
use crate::config::Scoring;
use crate::error::Result;
use crate::losses;
use crate::model::{forward, Mode, ModelConfig, ModelParams};
use crate::rng;

fn rand_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(rows, cols, data).expect("random tensor")
}

/// Check the gradient of `build` (a tape program with one designated input)
/// at `x`, pushing one report.
fn check(reports: &mut Vec<GradCheckReport>, name: &str, x: &Tensor, build: impl Fn(&mut Tape, ValueId) -> Result<ValueId>) -> Result<()> {
    let mut tape = Tape::new();
    let xid = tape.variable(x.clone());
    let root = build(&mut tape, xid)?;
    let grads = tape.backward(root)?;
    let analytic = grads.dense(xid, x.rows(), x.cols());
    reports.push(grad_check(name, x, &analytic, |xt| {
        let mut tape = Tape::new();
        let xid = tape.variable(xt.clone());
        let root = build(&mut tape, xid).expect("finite-difference forward");
        tape.value(root).item()
    }));
    Ok(())
}

/// Reduce a non-scalar op output to a scalar that is sensitive to every
/// coordinate: the sum of an elementwise product with fixed weights.
fn weighted_sum(tape: &mut Tape, out: ValueId, w: &Tensor) -> Result<ValueId> {
    let w = tape.constant(w.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn primitive_checks(reports: &mut Vec<GradCheckReport>, seed: u64) -> Result<()> {
    let r = &mut rng::stream(seed, "gradcheck-primitives");
    let a34 = rand_tensor(r, 3, 4, -0.8, 0.8);
    let b34 = rand_tensor(r, 3, 4, -0.8, 0.8);
    let b42 = rand_tensor(r, 4, 2, -0.8, 0.8);
    let w32 = rand_tensor(r, 3, 2, 0.2, 1.0);
    let w34 = rand_tensor(r, 3, 4, 0.2, 1.0);
    let w43 = rand_tensor(r, 4, 3, 0.2, 1.0);
    let w31 = rand_tensor(r, 3, 1, 0.2, 1.0);
    let bias = rand_tensor(r, 1, 4, -0.5, 0.5);

    check(reports, "matmul/left", &a34, |t, x| {
        let b = t.constant(b42.clone());
        let out = t.matmul(x, b)?;
        weighted_sum(t, out, &w32)
    })?;
    check(reports, "matmul/right", &b42, |t, x| {
        let a = t.constant(a34.clone());
        let out = t.matmul(a, x)?;
        weighted_sum(t, out, &w32)
    })?;
    check(reports, "add/left", &a34, |t, x| {
        let b = t.constant(b34.clone());
        let out = t.add(x, b)?;
        weighted_sum(t, out, &w34)
    })?;
    check(reports, "add/right", &b34, |t, x| {
        let a = t.constant(a34.clone());
        let out = t.add(a, x)?;
        weighted_sum(t, out, &w34)
    })?;
    check(reports, "mul/left", &a34, |t, x| {
        let b = t.constant(b34.clone());
        let out = t.mul(x, b)?;
        weighted_sum(t, out, &w34)
    })?;
    check(reports, "mul/right", &b34, |t, x| {
        let a = t.constant(a34.clone());
        let out = t.mul(a, x)?;
        weighted_sum(t, out, &w34)
    })?;
    check(reports, "scale", &a34, |t, x| {
        let out = t.scale(x, -1.7)?;
        weighted_sum(t, out, &w34)
    })?;
    check(reports, "add_row_bias/x", &a34, |t, x| {
        let b = t.constant(bias.clone());
        let out = t.add_row_bias(x, b)?;
        weighted_sum(t, out, &w34)
    })?;
    check(reports, "add_row_bias/bias", &bias, |t, x| {
        let a = t.constant(a34.clone());
        let out = t.add_row_bias(a, x)?;
        weighted_sum(t, out, &w34)
    })?;

    // tiled add over a stack of 3 blocks of 2 rows
    let x62 = rand_tensor(r, 6, 2, -0.8, 0.8);
    let tile22 = rand_tensor(r, 2, 2, -0.8, 0.8);
    let w62 = rand_tensor(r, 6, 2, 0.2, 1.0);
    check(reports, "add_tiled/x", &x62, |t, x| {
        let tile = t.constant(tile22.clone());
        let out = t.add_tiled(x, tile)?;
        weighted_sum(t, out, &w62)
    })?;
    check(reports, "add_tiled/tile", &tile22, |t, x| {
        let a = t.constant(x62.clone());
        let out = t.add_tiled(a, x)?;
        weighted_sum(t, out, &w62)
    })?;

    let top = rand_tensor(r, 2, 4, -0.8, 0.8);
    let bottom = rand_tensor(r, 1, 4, -0.8, 0.8);
    check(reports, "concat_rows/top", &top, |t, x| {
        let b = t.constant(bottom.clone());
        let out = t.concat_rows(&[x, b])?;
        weighted_sum(t, out, &w34)
    })?;
    check(reports, "concat_rows/bottom", &bottom, |t, x| {
        let a = t.constant(top.clone());
        let out = t.concat_rows(&[a, x])?;
        weighted_sum(t, out, &w34)
    })?;
    let left = rand_tensor(r, 3, 3, -0.8, 0.8);
    let right = rand_tensor(r, 3, 1, -0.8, 0.8);
    check(reports, "concat_cols/left", &left, |t, x| {
        let b = t.constant(right.clone());
        let out = t.concat_cols(&[x, b])?;
        weighted_sum(t, out, &w34)
    })?;
    check(reports, "concat_cols/right", &right, |t, x| {
        let a = t.constant(left.clone());
        let out = t.concat_cols(&[a, x])?;
        weighted_sum(t, out, &w34)
    })?;
    check(reports, "slice_rows", &a34, |t, x| {
        let out = t.slice_rows(x, 1, 2)?;
        let w = Tensor::new(2, 4, w34.data()[..8].to_vec())?;
        weighted_sum(t, out, &w)
    })?;
    check(reports, "slice_cols", &a34, |t, x| {
        let out = t.slice_cols(x, 1, 2)?;
        weighted_sum(t, out, &w32)
    })?;
    check(reports, "transpose", &a34, |t, x| {
        let out = t.transpose(x)?;
        weighted_sum(t, out, &w43)
    })?;
    check(reports, "reshape", &a34, |t, x| {
        let out = t.reshape(x, 2, 6)?;
        let w = Tensor::new(2, 6, w34.data().to_vec())?;
        weighted_sum(t, out, &w)
    })?;
    check(reports, "tanh", &a34, |t, x| {
        let out = t.tanh(x)?;
        weighted_sum(t, out, &w34)
    })?;
    check(reports, "sigmoid", &a34, |t, x| {
        let out = t.sigmoid(x)?;
        weighted_sum(t, out, &w34)
    })?;
    check(reports, "softmax_rows", &a34, |t, x| {
        let out = t.softmax_rows(x)?;
        weighted_sum(t, out, &w34)
    })?;
    // two live positions masked out, none fully masked
    let mask: Vec<bool> = vec![true, true, false, true, true, false, true, true, true, true, true, true];
    check(reports, "masked_softmax_rows", &a34, move |t, x| {
        let out = t.masked_softmax_rows(x, &mask)?;
        weighted_sum(t, out, &w34)
    })?;
    let w34b = rand_tensor(r, 3, 4, 0.2, 1.0);
    // frozen inverted-dropout mask at rate 0.4
    let drop_mask: Vec<f64> = (0..12)
        .map(|_| if r.random::<f64>() < 0.6 { 1.0 / 0.6 } else { 0.0 })
        .collect();
    check(reports, "dropout", &a34, move |t, x| {
        let out = t.dropout_with_mask(x, drop_mask.clone())?;
        weighted_sum(t, out, &w34b)
    })?;
    check(reports, "sum", &a34, |t, x| t.sum(x))?;
    check(reports, "mean", &a34, |t, x| t.mean(x))?;
    let w31b = w31.clone();
    check(reports, "row_sums", &a34, move |t, x| {
        let out = t.row_sums(x)?;
        weighted_sum(t, out, &w31b)
    })?;
    let w34c = rand_tensor(r, 3, 4, 0.2, 1.0);
    check(reports, "square", &a34, move |t, x| {
        let out = t.square(x)?;
        weighted_sum(t, out, &w34c)
    })?;
    check(reports, "dot/left", &a34, |t, x| {
        let b = t.constant(b34.clone());
        t.dot(x, b)
    })?;
    check(reports, "dot/right", &b34, |t, x| {
        let a = t.constant(a34.clone());
        t.dot(a, x)
    })?;
    // probabilities away from the clamp edges so differencing stays smooth
    let yhat = rand_tensor(r, 4, 1, 0.1, 0.9);
    let targets = [1.0, 0.0, 0.0, 1.0];
    check(reports, "bce", &yhat, move |t, x| t.bce(x, &targets))?;
    let table = rand_tensor(r, 6, 3, -0.8, 0.8);
    let w53 = rand_tensor(r, 5, 3, 0.2, 1.0);
    // duplicate id 2 to exercise accumulation in the scatter
    check(reports, "gather", &table, move |t, x| {
        let out = t.gather(x, &[0, 2, 2, 5, 1])?;
        weighted_sum(t, out, &w53)
    })?;
    let weights23 = rand_tensor(r, 2, 3, 0.1, 0.9);
    let states62 = rand_tensor(r, 6, 2, -0.8, 0.8);
    let w22 = rand_tensor(r, 2, 2, 0.2, 1.0);
    let (s1, w1) = (states62.clone(), w22.clone());
    check(reports, "context_mix/weights", &weights23, move |t, x| {
        let s = t.constant(s1.clone());
        let out = t.context_mix(x, s)?;
        weighted_sum(t, out, &w1)
    })?;
    let (w2, w3) = (weights23.clone(), w22.clone());
    check(reports, "context_mix/states", &states62, move |t, x| {
        let w = t.constant(w2.clone());
        let out = t.context_mix(w, x)?;
        weighted_sum(t, out, &w3)
    })?;
    Ok(())
}

fn loss_checks(reports: &mut Vec<GradCheckReport>, seed: u64) -> Result<()> {
    let r = &mut rng::stream(seed, "gradcheck-losses");
    // three attention-like stacks over 2 examples x 4 positions
    let heads: Vec<Tensor> = (0..3).map(|_| rand_tensor(r, 2, 4, 0.05, 0.95)).collect();
    let other: Vec<Tensor> = (0..3).map(|_| rand_tensor(r, 2, 4, 0.05, 0.95)).collect();
    let yhat = rand_tensor(r, 2, 1, 0.1, 0.9);
    let targets = [1.0, 0.0];

    let stack_with = |t: &mut Tape, stack: &[Tensor], slot: usize, x: ValueId| -> Vec<ValueId> {
        stack
            .iter()
            .enumerate()
            .map(|(i, h)| if i == slot { x } else { t.constant(h.clone()) })
            .collect()
    };

    for slot in [0, 2] {
        let heads = heads.clone();
        let name = if slot == 2 { "diversity_loss/free_head".to_string() } else { format!("diversity_loss/head{slot}") };
        check(reports, &name, &heads[slot].clone(), move |t, x| {
            let ids = stack_with(t, &heads, slot, x);
            losses::diversity_loss(t, &ids)
        })?;
    }
    {
        let (h, o) = (heads.clone(), other.clone());
        check(reports, "cross_orthogonality_loss/stack1", &heads[1].clone(), move |t, x| {
            let ids1 = stack_with(t, &h, 1, x);
            let ids2: Vec<ValueId> = o.iter().map(|m| t.constant(m.clone())).collect();
            losses::cross_orthogonality_loss(t, &ids1, &ids2)
        })?;
    }
    {
        let (h, o) = (heads.clone(), other.clone());
        check(reports, "cross_orthogonality_loss/stack2", &other[0].clone(), move |t, x| {
            let ids1: Vec<ValueId> = h.iter().map(|m| t.constant(m.clone())).collect();
            let ids2 = stack_with(t, &o, 0, x);
            losses::cross_orthogonality_loss(t, &ids1, &ids2)
        })?;
    }
    {
        let (h, o) = (heads.clone(), other.clone());
        check(reports, "tri_diversity_loss", &heads[0].clone(), move |t, x| {
            let ids1 = stack_with(t, &h, 0, x);
            let ids2: Vec<ValueId> = o.iter().map(|m| t.constant(m.clone())).collect();
            let l_o = losses::cross_orthogonality_loss(t, &ids1, &ids2)?;
            let l_d1 = losses::diversity_loss(t, &ids1)?;
            let l_d2 = losses::diversity_loss(t, &ids2)?;
            losses::tri_diversity_loss(t, l_o, l_d1, l_d2, 0.05, 0.01)
        })?;
    }
    {
        let h = heads.clone();
        check(reports, "total_loss/yhat", &yhat.clone(), move |t, x| {
            let ids = h.iter().map(|m| t.constant(m.clone())).collect::<Vec<_>>();
            let bce = t.bce(x, &targets)?;
            let l_d = losses::diversity_loss(t, &ids)?;
            losses::total_loss(t, bce, l_d, 0.5)
        })?;
    }
    {
        let (h, y) = (heads.clone(), yhat.clone());
        check(reports, "total_loss/attention", &heads[0].clone(), move |t, x| {
            let ids = stack_with(t, &h, 0, x);
            let yid = t.constant(y.clone());
            let bce = t.bce(yid, &targets)?;
            let l_d = losses::diversity_loss(t, &ids)?;
            losses::total_loss(t, bce, l_d, 0.5)
        })?;
    }
    {
        let (h, o) = (heads.clone(), other.clone());
        let y2 = rand_tensor(r, 2, 1, 0.1, 0.9);
        check(reports, "joint_loss/yhat1", &yhat.clone(), move |t, x| {
            let ids1: Vec<ValueId> = h.iter().map(|m| t.constant(m.clone())).collect();
            let ids2: Vec<ValueId> = o.iter().map(|m| t.constant(m.clone())).collect();
            let bce1 = t.bce(x, &targets)?;
            let y2id = t.constant(y2.clone());
            let bce2 = t.bce(y2id, &targets)?;
            let l_o = losses::cross_orthogonality_loss(t, &ids1, &ids2)?;
            let l_d1 = losses::diversity_loss(t, &ids1)?;
            let l_d2 = losses::diversity_loss(t, &ids2)?;
            let l_dtri = losses::tri_diversity_loss(t, l_o, l_d1, l_d2, 0.05, 0.01)?;
            losses::joint_loss(t, bce1, bce2, (2.0, 1.0), l_dtri)
        })?;
    }
    {
        let (h, o, y) = (heads.clone(), other.clone(), yhat.clone());
        let y2 = rand_tensor(r, 2, 1, 0.1, 0.9);
        check(reports, "joint_loss/attention2", &other[1].clone(), move |t, x| {
            let ids1: Vec<ValueId> = h.iter().map(|m| t.constant(m.clone())).collect();
            let ids2 = stack_with(t, &o, 1, x);
            let y1id = t.constant(y.clone());
            let bce1 = t.bce(y1id, &targets)?;
            let y2id = t.constant(y2.clone());
            let bce2 = t.bce(y2id, &targets)?;
            let l_o = losses::cross_orthogonality_loss(t, &ids1, &ids2)?;
            let l_d1 = losses::diversity_loss(t, &ids1)?;
            let l_d2 = losses::diversity_loss(t, &ids2)?;
            let l_dtri = losses::tri_diversity_loss(t, l_o, l_d1, l_d2, 0.05, 0.01)?;
            losses::joint_loss(t, bce1, bce2, (2.0, 1.0), l_dtri)
        })?;
    }
    Ok(())
}

/// Check the gradient of `bce + gamma * L_d` through the whole network for
/// every trainable tensor of `params`.
fn model_checks(reports: &mut Vec<GradCheckReport>, label: &str, params: &ModelParams, ids: &[usize], targets: &[f64], gamma: f64) -> Result<()> {
    let objective = |p: &ModelParams| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let fwd = forward(&mut tape, &bound, ids, Mode::Eval)?;
        let bce = tape.bce(fwd.yhat, targets)?;
        let l_d = losses::diversity_loss(&mut tape, &fwd.attention)?;
        let total = losses::total_loss(&mut tape, bce, l_d, gamma)?;
        Ok(tape.value(total).item())
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fwd = forward(&mut tape, &bound, ids, Mode::Eval)?;
    let bce = tape.bce(fwd.yhat, targets)?;
    let l_d = losses::diversity_loss(&mut tape, &fwd.attention)?;
    let total = losses::total_loss(&mut tape, bce, l_d, gamma)?;
    let grads = tape.backward(total)?;
    for &(name, id) in bound.vars() {
        let x = tape.value(id).clone();
        let analytic = grads.dense(id, x.rows(), x.cols());
        reports.push(grad_check(&format!("model/{label}/{name}"), &x, &analytic, |xt| {
            let mut p = params.clone();
            for (n, t) in p.trainable_mut() {
                if n == name {
                    *t = xt.clone();
                }
            }
            objective(&p).expect("finite-difference forward")
        }));
    }
    Ok(())
}

fn model_setup(scoring: Scoring, train_embeddings: bool, seed: u64) -> Result<(ModelParams, Vec<usize>, Vec<f64>)> {
    // the reference small configuration: dim 4, hidden 3, 5 positions,
    // 3 heads, batch of 2, with trailing padding on the second example
    let config = ModelConfig {
        vocab_size: 8,
        dim: 4,
        hidden: 3,
        heads: 3,
        max_len: 5,
        scoring,
        dropout: 0.0,
        train_embeddings,
    };
    let r = &mut rng::stream(seed, "gradcheck-model");
    let mut embedding = rand_tensor(r, config.vocab_size, config.dim, -0.5, 0.5);
    embedding.data_mut()[..config.dim].fill(0.0);
    let params = ModelParams::init(config, embedding, r.random())?;
    let ids = vec![2, 3, 4, 5, 6, 7, 2, 3, 0, 0];
    let targets = vec![1.0, 0.0];
    Ok((params, ids, targets))
}

/// Run every gradient check; callers decide how to render the reports.
/// The seed only varies the random probe points, never the shapes.
pub fn run_gradcheck_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    primitive_checks(&mut reports, seed)?;
    loss_checks(&mut reports, seed)?;
    let (params, ids, targets) = model_setup(Scoring::Additive, false, seed)?;
    model_checks(&mut reports, "additive", &params, &ids, &targets, 0.5)?;
    let (params, ids, targets) = model_setup(Scoring::DotProduct, false, seed)?;
    model_checks(&mut reports, "dot_product", &params, &ids, &targets, 0.5)?;
    let (params, ids, targets) = model_setup(Scoring::Additive, true, seed)?;
    model_checks(&mut reports, "trained_embeddings", &params, &ids, &targets, 0.5)?;
    Ok(reports)
}
