//! Numerical gradient verification by central differences.
//!
//! The tape's analytic gradients are compared against
//! `(f(x+h) - f(x-h)) / 2h` coordinate by coordinate. Relative error uses a
//! floor so coordinates near zero are judged on absolute error instead.

use super::tensor::Tensor;

/// Step size for central differences. With 64-bit arithmetic this balances
/// truncation against cancellation error around 1e-10 of slack.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Acceptance threshold on the worst relative error.
pub const GRAD_CHECK_TOL: f64 = 1e-4;

const REL_FLOOR: f64 = 1e-4;

/// Outcome of checking one input tensor of one scalar function.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub numeric: f64,
    pub analytic: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRAD_CHECK_TOL
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max_rel_err {:.3e} at coord {} (numeric {:.6e}, analytic {:.6e}) {}",
            self.name,
            self.max_rel_err,
            self.worst_coord,
            self.numeric,
            self.analytic,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Check the analytic gradient of `f` with respect to `x`.
///
/// `f` maps the current input value to a scalar; it is re-run `2 * len + 1`
/// times, so keep the probe sizes small. `analytic` is the tape gradient for
/// `x` evaluated at the unperturbed input.
pub fn grad_check(name: &str, x: &Tensor, analytic: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> GradCheckReport {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape mismatch in {name}");
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst_coord: 0,
        numeric: 0.0,
        analytic: 0.0,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + GRAD_CHECK_STEP;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - GRAD_CHECK_STEP;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        let ana = analytic.data()[i];
        let rel = (numeric - ana).abs() / numeric.abs().max(ana.abs()).max(REL_FLOOR);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = i;
            report.numeric = numeric;
            report.analytic = ana;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn passes_on_a_correct_gradient() {
        let x0 = Tensor::new(2, 2, vec![0.5, -1.2, 0.3, 2.0]).unwrap();
        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.variable(input.clone());
            let th = tape.tanh(x).unwrap();
            let sq = tape.square(th).unwrap();
            let root = tape.sum(sq).unwrap();
            (tape, x, root)
        };
        let (tape, x, root) = run(&x0);
        let grads = tape.backward(root).unwrap();
        let analytic = grads.dense(x, 2, 2);
        let report = grad_check("tanh_square_sum", &x0, &analytic, |probe| {
            let (tape, _, root) = run(probe);
            tape.value(root).item()
        });
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn fails_on_a_wrong_gradient() {
        // f(x) = x * c with c frozen at x's current value. The analytic
        // gradient is c = x, but numerically f behaves like x^2 with
        // gradient 2x, so the check must flag the mismatch.
        let x0 = Tensor::new(1, 3, vec![1.0, -2.0, 0.7]).unwrap();
        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.variable(input.clone());
            let c = tape.constant(input.clone());
            let prod = tape.mul(x, c).unwrap();
            let root = tape.sum(prod).unwrap();
            (tape, x, root)
        };
        let (tape, x, root) = run(&x0);
        let analytic = tape.backward(root).unwrap().dense(x, 1, 3);
        let report = grad_check("detached_square", &x0, &analytic, |probe| {
            let (tape, _, root) = run(probe);
            tape.value(root).item()
        });
        assert!(!report.passed(), "negative control unexpectedly passed: {report}");
    }
}
