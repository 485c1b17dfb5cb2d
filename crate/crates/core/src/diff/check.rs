//! Central finite-difference oracle for gradient checks.
//!
//! Independent of the reverse sweep: it only calls forward evaluation, so it
//! can falsify a broken backward rule.

use super::{Tape, Tensor, TensorId};

/// Builds a scalar loss from freshly bound copies of `params` on the given
/// tape. Must be deterministic in the parameter values.
pub type LossFn<'f> = &'f dyn Fn(&mut Tape, &[TensorId]) -> TensorId;

/// Result of a gradient check: the largest relative error over all
/// coordinates of all parameters.
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_coord: usize,
}

fn eval(loss: LossFn, params: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = loss(&mut tape, &ids);
    tape.value(out).item()
}

/// Compares analytic gradients against central finite differences with the
/// given step. Relative error uses `max(1, |analytic|, |numeric|)` as the
/// denominator so near-zero gradients are judged absolutely.
pub fn grad_check(loss: LossFn, params: &[Tensor], eps: f64) -> GradCheck {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|p| tape.leaf(p.clone().with_grad()))
        .collect();
    let out = loss(&mut tape, &ids);
    let grads = tape.backward(out);

    let mut worst = GradCheck { max_rel_err: 0.0, worst_param: 0, worst_coord: 0 };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(ids[pi], p.numel());
        for ci in 0..p.numel() {
            let orig = p.values[ci];
            probe[pi].values[ci] = orig + eps;
            let up = eval(loss, &probe);
            probe[pi].values[ci] = orig - eps;
            let down = eval(loss, &probe);
            probe[pi].values[ci] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let denom = 1.0_f64.max(analytic[ci].abs()).max(numeric.abs());
            let rel = (analytic[ci] - numeric).abs() / denom;
            if rel > worst.max_rel_err {
                worst = GradCheck { max_rel_err: rel, worst_param: pi, worst_coord: ci };
            }
        }
    }
    worst
}

/// Convenience assertion used throughout the test suites.
pub fn assert_grads_match(loss: LossFn, params: &[Tensor], eps: f64, tol: f64) {
    let r = grad_check(loss, params, eps);
    assert!(
        r.max_rel_err < tol,
        "gradient mismatch: rel err {:.3e} at param {} coord {} (tol {:.1e})",
        r.max_rel_err,
        r.worst_param,
        r.worst_coord,
        tol
    );
}
