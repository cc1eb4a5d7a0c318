//! Central finite-difference verification of tape gradients.
//!
//! Used by the test suites to falsify backward rules: a scalar-valued
//! forward builder is evaluated at coordinate-wise perturbed inputs and the
//! two-sided difference quotient is compared against the recorded gradient.
//! The difference path never touches `backward`, so the check is an
//! independent oracle for it.

use crate::tensor::{Result, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, coordinate) where the worst error occurred.
    pub worst: (usize, usize),
}

/// Compare backward gradients of `f` against central finite differences.
///
/// `f` must deterministically build a 1-element loss from the given leaf
/// vars. `step` is the half-width of the central difference (1e-5 is the
/// standard choice at 64-bit).
pub fn check_gradients<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(loss))
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let ad = grads.grad(vars[ti]).to_vec();
        for ci in 0..input.numel() {
            let base = input.data()[ci];

            let mut plus = input.data().to_vec();
            plus[ci] = base + step;
            work[ti] = Tensor::new(input.shape().to_vec(), plus)?;
            let fp = eval(&work)?;

            let mut minus = input.data().to_vec();
            minus[ci] = base - step;
            work[ti] = Tensor::new(input.shape().to_vec(), minus)?;
            let fm = eval(&work)?;

            work[ti] = input.clone();

            let fd = (fp - fm) / (2.0 * step);
            let diff = (ad[ci] - fd).abs();
            let scale = ad[ci].abs().max(fd.abs()).max(1e-6);
            let rel = diff / scale;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, ci);
            }
        }
    }
    Ok(report)
}
