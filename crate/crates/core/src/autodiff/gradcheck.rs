//! Finite-difference gradient verification.
//!
//! Used by the op-level unit tests and by the integration suite that probes
//! the full denoiser: analytic reverse-mode gradients are compared entry by
//! entry against central differences of the scalar loss.

use super::{Tape, Var};
use ndarray::ArrayD;

/// Relative error with a floor so near-zero pairs compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central difference of `eval` at `x` with step `h`. `eval` receives the
/// perturbed value and returns the scalar objective.
pub fn central_diff(mut eval: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (eval(x + h) - eval(x - h)) / (2.0 * h)
}

/// Build the graph twice per probed entry and compare every input gradient
/// against central differences. Panics (test helper) on mismatch.
///
/// `build` must be deterministic: it is re-invoked for every probe with
/// perturbed copies of `inputs` and must return a scalar root.
pub fn check_input_grads(
    inputs: &[ArrayD<f64>],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
) {
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| tape.param(i, x.clone()))
        .collect();
    let root = build(&mut tape, &vars);
    assert_eq!(tape.value(root).len(), 1, "gradcheck root must be scalar");
    let grads = tape.backward(root);

    let loss_at = |perturbed: &[ArrayD<f64>]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed
            .iter()
            .enumerate()
            .map(|(i, x)| t.param(i, x.clone()))
            .collect();
        let r = build(&mut t, &vs);
        *t.value(r).iter().next().unwrap()
    };

    for (which, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[which])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
        let flat_len = input.len();
        for j in 0..flat_len {
            let x = input.as_slice().unwrap()[j];
            let h = 1e-6 * x.abs().max(1.0);
            let numeric = central_diff(
                |v| {
                    let mut copy: Vec<ArrayD<f64>> = inputs.to_vec();
                    copy[which].as_slice_mut().unwrap()[j] = v;
                    loss_at(&copy)
                },
                x,
                h,
            );
            let a = analytic.as_slice().unwrap()[j];
            let err = (a - numeric).abs();
            let tol = 1e-7 + 1e-5 * a.abs().max(numeric.abs());
            assert!(
                err <= tol,
                "input {which} entry {j}: analytic {a} vs numeric {numeric} (err {err:.3e} > tol {tol:.3e})"
            );
        }
    }
}
