//! Training objectives.
//!
//! The diversity penalty punishes squared overlaps between attention heads
//! of one model; the orthogonality penalty does the same across the heads
//! of two jointly trained models. Both read each head's attention as a
//! per-example distribution over positions, so the penalty is exactly zero
//! when heads attend disjoint tokens. All functions build on the tape, so
//! one backward sweep differentiates any combination.

use crate::autodiff::{Tape, Tensor, ValueId};
use crate::error::{Error, Result};

/// Loss components of one batch, for reports.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub bce: f64,
    pub diversity: f64,
    pub total: f64,
}

fn scalar(tape: &mut Tape, v: f64) -> ValueId {
    tape.constant(Tensor::scalar(v))
}

/// Squared-overlap sum over head pairs `i < j` drawn from `heads`, averaged
/// over the batch and divided by `pairs_norm`.
fn overlap_penalty(tape: &mut Tape, left: &[ValueId], right: &[ValueId], include_diagonal_pairs: bool, pairs_norm: f64) -> Result<ValueId> {
    let mut acc: Option<ValueId> = None;
    for (i, &a) in left.iter().enumerate() {
        for (j, &b) in right.iter().enumerate() {
            if !include_diagonal_pairs && j <= i {
                continue;
            }
            let prod = tape.mul(a, b)?;
            let dots = tape.row_sums(prod)?;
            let sq = tape.square(dots)?;
            acc = Some(match acc {
                Some(t) => tape.add(t, sq)?,
                None => sq,
            });
        }
    }
    let acc = match acc {
        Some(t) => t,
        None => return Ok(scalar(tape, 0.0)),
    };
    let scaled = tape.scale(acc, 1.0 / pairs_norm)?;
    tape.mean(scaled)
}

fn check_stack(stack: &[ValueId], tape: &Tape, what: &'static str) -> Result<()> {
    if stack.is_empty() {
        return Err(Error::Shape { op: what, detail: "empty attention stack".into() });
    }
    let shape = tape.value(stack[0]).shape();
    for &a in stack {
        if tape.value(a).shape() != shape {
            return Err(Error::Shape {
                op: what,
                detail: format!("head shapes differ: {:?} vs {:?}", tape.value(a).shape(), shape),
            });
        }
    }
    Ok(())
}

/// Self-diversity penalty over one model's attention stack.
///
/// The last head is left unconstrained; pairs run over heads `1..T_y-1`
/// and the sum is divided by the pair count `(T_y-2)(T_y-1)/2`, then
/// averaged over the batch. Two heads or fewer have no constrained pair,
/// so the penalty is zero.
pub fn diversity_loss(tape: &mut Tape, stack: &[ValueId]) -> Result<ValueId> {
    check_stack(stack, tape, "diversity_loss")?;
    let t_y = stack.len();
    if t_y <= 2 {
        return Ok(scalar(tape, 0.0));
    }
    let constrained = &stack[..t_y - 1];
    let k = ((t_y - 2) * (t_y - 1)) as f64 / 2.0;
    overlap_penalty(tape, constrained, constrained, false, k)
}

/// Cross-model orthogonality penalty over two stacks from the same batch.
///
/// All head pairs across the two models contribute; the normalizer is
/// `(T_y-1)T_y/2` (1 when a single head would make it zero).
pub fn cross_orthogonality_loss(tape: &mut Tape, stack1: &[ValueId], stack2: &[ValueId]) -> Result<ValueId> {
    check_stack(stack1, tape, "cross_orthogonality_loss")?;
    check_stack(stack2, tape, "cross_orthogonality_loss")?;
    if stack1.len() != stack2.len() || tape.value(stack1[0]).shape() != tape.value(stack2[0]).shape() {
        return Err(Error::Shape {
            op: "cross_orthogonality_loss",
            detail: format!(
                "stacks disagree: {} heads of {:?} vs {} heads of {:?}",
                stack1.len(),
                tape.value(stack1[0]).shape(),
                stack2.len(),
                tape.value(stack2[0]).shape()
            ),
        });
    }
    let t_y = stack1.len();
    let k = (((t_y - 1) * t_y) as f64 / 2.0).max(1.0);
    overlap_penalty(tape, stack1, stack2, true, k)
}

/// Combined tri-training diversity term:
/// `alpha * L_o + beta * (L_d(m1) + L_d(m2))`.
pub fn tri_diversity_loss(tape: &mut Tape, l_o: ValueId, l_d_m1: ValueId, l_d_m2: ValueId, alpha: f64, beta: f64) -> Result<ValueId> {
    let weighted_o = tape.scale(l_o, alpha)?;
    let d_sum = tape.add(l_d_m1, l_d_m2)?;
    let weighted_d = tape.scale(d_sum, beta)?;
    tape.add(weighted_o, weighted_d)
}

/// Single-model objective: `bce + gamma * L_d`.
pub fn total_loss(tape: &mut Tape, bce: ValueId, l_d: ValueId, gamma: f64) -> Result<ValueId> {
    let weighted = tape.scale(l_d, gamma)?;
    tape.add(bce, weighted)
}

/// Joint two-model objective: `w1 * bce1 + w2 * bce2 + L_dtri`. Weights are
/// (2, 1) with the primary model first.
pub fn joint_loss(tape: &mut Tape, bce1: ValueId, bce2: ValueId, weights: (f64, f64), l_dtri: ValueId) -> Result<ValueId> {
    let (w1, w2) = weights;
    if w1 <= 0.0 || w2 <= 0.0 {
        return Err(Error::Config(format!("joint loss weights must be positive, got ({w1}, {w2})")));
    }
    let a = tape.scale(bce1, w1)?;
    let b = tape.scale(bce2, w2)?;
    let s = tape.add(a, b)?;
    tape.add(s, l_dtri)
}

/// Mean over examples and constrained head pairs of the raw attention dot
/// product `A_i . A_j` (not squared). This is the report metric for how
/// much the constrained heads overlap; training never optimizes it
/// directly.
pub fn mean_constrained_head_dot(stack: &[Tensor]) -> f64 {
    let t_y = stack.len();
    if t_y <= 2 {
        return 0.0;
    }
    let b = stack[0].rows();
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..t_y - 1 {
        for j in i + 1..t_y - 1 {
            for bi in 0..b {
                let dot: f64 = stack[i].row(bi).iter().zip(stack[j].row(bi)).map(|(x, y)| x * y).sum();
                acc += dot;
                count += 1;
            }
        }
    }
    acc / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn put(tape: &mut Tape, rows: usize, cols: usize, data: &[f64]) -> ValueId {
        tape.variable(Tensor::new(rows, cols, data.to_vec()).unwrap())
    }

    fn eval(tape: &Tape, id: ValueId) -> f64 {
        tape.value(id).item()
    }

    #[test]
    fn disjoint_one_hot_heads_have_zero_diversity_loss() {
        let mut tape = Tape::new();
        let a1 = put(&mut tape, 1, 2, &[1.0, 0.0]);
        let a2 = put(&mut tape, 1, 2, &[0.0, 1.0]);
        let a3 = put(&mut tape, 1, 2, &[0.5, 0.5]); // free head, ignored
        let l = diversity_loss(&mut tape, &[a1, a2, a3]).unwrap();
        assert_eq!(eval(&tape, l), 0.0);
    }

    #[test]
    fn duplicated_uniform_heads_cost_a_quarter() {
        // dot = 0.5, squared = 0.25, one pair, k = 1
        let mut tape = Tape::new();
        let a1 = put(&mut tape, 1, 2, &[0.5, 0.5]);
        let a2 = put(&mut tape, 1, 2, &[0.5, 0.5]);
        let a3 = put(&mut tape, 1, 2, &[1.0, 0.0]);
        let l = diversity_loss(&mut tape, &[a1, a2, a3]).unwrap();
        assert!((eval(&tape, l) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn last_head_is_unconstrained() {
        let mut tape = Tape::new();
        let a1 = put(&mut tape, 1, 2, &[1.0, 0.0]);
        let a2 = put(&mut tape, 1, 2, &[0.0, 1.0]);
        let free_a = put(&mut tape, 1, 2, &[1.0, 0.0]);
        let free_b = put(&mut tape, 1, 2, &[0.0, 1.0]);
        let la = diversity_loss(&mut tape, &[a1, a2, free_a]).unwrap();
        let lb = diversity_loss(&mut tape, &[a1, a2, free_b]).unwrap();
        assert_eq!(eval(&tape, la), eval(&tape, lb));
    }

    #[test]
    fn two_heads_or_fewer_cost_nothing() {
        let mut tape = Tape::new();
        let a1 = put(&mut tape, 2, 3, &[0.2, 0.3, 0.5, 1.0, 0.0, 0.0]);
        let a2 = put(&mut tape, 2, 3, &[0.2, 0.3, 0.5, 1.0, 0.0, 0.0]);
        let l = diversity_loss(&mut tape, &[a1, a2]).unwrap();
        assert_eq!(eval(&tape, l), 0.0);
        let l1 = diversity_loss(&mut tape, &[a1]).unwrap();
        assert_eq!(eval(&tape, l1), 0.0);
    }

    #[test]
    fn diversity_loss_is_symmetric_in_constrained_heads() {
        let mut tape = Tape::new();
        let a1 = put(&mut tape, 1, 3, &[0.7, 0.2, 0.1]);
        let a2 = put(&mut tape, 1, 3, &[0.1, 0.8, 0.1]);
        let a3 = put(&mut tape, 1, 3, &[0.3, 0.3, 0.4]);
        let free = put(&mut tape, 1, 3, &[1.0, 0.0, 0.0]);
        let fwd = diversity_loss(&mut tape, &[a1, a2, a3, free]).unwrap();
        let perm = diversity_loss(&mut tape, &[a3, a1, a2, free]).unwrap();
        assert!((eval(&tape, fwd) - eval(&tape, perm)).abs() < 1e-15);
    }

    #[test]
    fn cross_orthogonality_counts_all_pairs() {
        // identical single-position heads: every pair dots to 1;
        // T_y = 2 gives 4 pairs over k = 1
        let mut tape = Tape::new();
        let a = put(&mut tape, 1, 2, &[1.0, 0.0]);
        let b = put(&mut tape, 1, 2, &[1.0, 0.0]);
        let l = cross_orthogonality_loss(&mut tape, &[a, a], &[b, b]).unwrap();
        assert!((eval(&tape, l) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn cross_orthogonality_disjoint_supports_cost_nothing() {
        let mut tape = Tape::new();
        let a = put(&mut tape, 1, 3, &[1.0, 0.0, 0.0]);
        let b = put(&mut tape, 1, 3, &[0.0, 1.0, 0.0]);
        let l = cross_orthogonality_loss(&mut tape, &[a, a], &[b, b]).unwrap();
        assert_eq!(eval(&tape, l), 0.0);
    }

    #[test]
    fn single_head_orthogonality_uses_unit_normalizer() {
        let mut tape = Tape::new();
        let a = put(&mut tape, 1, 2, &[1.0, 0.0]);
        let l = cross_orthogonality_loss(&mut tape, &[a], &[a]).unwrap();
        assert!((eval(&tape, l) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tri_diversity_combines_linearly() {
        // 0.05 * 2 + 0.01 * (0.6 + 0.4) = 0.11
        let mut tape = Tape::new();
        let l_o = put(&mut tape, 1, 1, &[2.0]);
        let d1 = put(&mut tape, 1, 1, &[0.6]);
        let d2 = put(&mut tape, 1, 1, &[0.4]);
        let l = tri_diversity_loss(&mut tape, l_o, d1, d2, 0.05, 0.01).unwrap();
        assert!((eval(&tape, l) - 0.11).abs() < 1e-15);
    }

    #[test]
    fn bce_of_coin_flip_is_ln_two() {
        let mut tape = Tape::new();
        let yhat = put(&mut tape, 2, 1, &[0.5, 0.5]);
        let l = tape.bce(yhat, &[1.0, 0.0]).unwrap();
        assert!((eval(&tape, l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weights_diversity_by_gamma() {
        let mut tape = Tape::new();
        let bce = put(&mut tape, 1, 1, &[0.2]);
        let ld = put(&mut tape, 1, 1, &[3.0]);
        let t = total_loss(&mut tape, bce, ld, 0.01).unwrap();
        assert!((eval(&tape, t) - 0.23).abs() < 1e-15);
        let t0 = total_loss(&mut tape, bce, ld, 0.0).unwrap();
        assert!((eval(&tape, t0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn joint_loss_hand_value() {
        // 2 * 0.5 + 1 * 0.3 + 0.11 = 1.41
        let mut tape = Tape::new();
        let b1 = put(&mut tape, 1, 1, &[0.5]);
        let b2 = put(&mut tape, 1, 1, &[0.3]);
        let d = put(&mut tape, 1, 1, &[0.11]);
        let l = joint_loss(&mut tape, b1, b2, (2.0, 1.0), d).unwrap();
        assert!((eval(&tape, l) - 1.41).abs() < 1e-12);
        assert!(joint_loss(&mut tape, b1, b2, (0.0, 1.0), d).is_err());
    }

    #[test]
    fn joint_weights_are_order_sensitive() {
        let mut tape = Tape::new();
        let b1 = put(&mut tape, 1, 1, &[0.5]);
        let b2 = put(&mut tape, 1, 1, &[0.3]);
        let d = put(&mut tape, 1, 1, &[0.0]);
        let fwd = joint_loss(&mut tape, b1, b2, (2.0, 1.0), d).unwrap();
        let rev = joint_loss(&mut tape, b1, b2, (1.0, 2.0), d).unwrap();
        assert!((eval(&tape, fwd) - 1.3).abs() < 1e-15);
        assert!((eval(&tape, rev) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn mean_dot_sees_only_constrained_pairs() {
        let t = |d: &[f64]| Tensor::new(1, 2, d.to_vec()).unwrap();
        // constrained pair dot = 0.5; the free head would add 1.0 pairs
        let stack = vec![t(&[0.5, 0.5]), t(&[0.5, 0.5]), t(&[1.0, 0.0])];
        assert!((mean_constrained_head_dot(&stack) - 0.5).abs() < 1e-15);
        assert_eq!(mean_constrained_head_dot(&stack[..2]), 0.0);
    }
}
