//! Central finite-difference gradient verification.
//!
//! The numeric side evaluates the forward function only, so it stays
//! independent of the backward rules it is used to check.

use crate::tensor::{Tape, TensorId};

/// Step used by the central-difference stencil.
pub const FD_STEP: f64 = 1e-5;

/// Numeric gradient of `f` with respect to every element of every input,
/// by central differences `(f(x+h) - f(x-h)) / 2h`.
pub fn fd_grad<F>(f: F, inputs: &[Vec<f64>], h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for (pi, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[pi][e] += h;
            let mut minus = inputs.to_vec();
            minus[pi][e] -= h;
            numeric[e] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grads.push(numeric);
    }
    grads
}

/// Relative error between two gradient vectors:
/// `|a - b|_2 / max(|a|_2 + |b|_2, 1e-8)`.
pub fn rel_err_vec(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(1e-8)
}

/// Check a tape-built scalar function. `f` must register one parameter per
/// input vector (in order) and return the loss plus those parameter ids.
/// Returns the worst per-tensor relative error between the tape's
/// gradients and the finite-difference oracle.
pub fn fd_check<F>(inputs: &[Vec<f64>], f: F) -> f64
where
    F: Fn(&[Vec<f64>], &mut Tape) -> (TensorId, Vec<TensorId>),
{
    let mut tape = Tape::new();
    let (loss, params) = f(inputs, &mut tape);
    tape.backward(loss).expect("backward failed in fd_check");
    assert_eq!(params.len(), inputs.len(), "one param id per input");
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&p| {
            tape.grad(p)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.values(p).len()])
        })
        .collect();
    let numeric = fd_grad(
        |xs| {
            let mut t = Tape::new();
            let (l, _) = f(xs, &mut t);
            t.scalar_value(l)
        },
        inputs,
        FD_STEP,
    );
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err_vec(a, n))
        .fold(0.0, f64::max)
}
