//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it checks.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so gradients that are zero up to
/// rounding do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of `f` at `inputs` with central differences.
///
/// `f` receives a fresh tape with one parameter leaf per input and must
/// return a scalar loss. When `only` is given, elements are checked only for
/// the listed inputs.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.numel() {
            let orig = t.data()[ei];
            probe[ti].data_mut()[ei] = orig + step;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig - step;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ti][ei];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((ti, ei));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

/// `sum(v ⊙ w)` for a fixed pseudo-random `w`, turning any tensor into a
/// scalar loss without the cancellations a plain sum can hide.
pub fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let mut state = seed ^ 0x9E37_79B9_7F4A_7C15;
    let w = Tensor::from_fn(shape, |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    });
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}
