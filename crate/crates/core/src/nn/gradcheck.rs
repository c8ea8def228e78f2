//! Central finite-difference verification of analytic weight gradients.

use crate::error::Result;
use crate::nn::layer::Mode;
use crate::nn::loss::{loss, LossKind};
use crate::nn::stack::LayerStack;
use crate::tensor::Tensor;

/// Entries checked per call; larger stacks are sampled with a fixed stride.
pub const MAX_CHECKED: usize = 800;
/// Denominator floor as a fraction of the largest analytic entry, so that
/// structurally zero gradients are judged against the stack's gradient scale.
pub const FLOOR_FRACTION: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

pub fn grad_check(
    stack: &LayerStack,
    batch: &Tensor,
    labels: &Tensor,
    kind: LossKind,
    eps: f64,
) -> Result<GradCheckReport> {
    grad_check_with(stack, batch, labels, kind, eps, |_| {})
}

/// Like [`grad_check`], but lets the caller alter the analytic gradients
/// before comparison (fault injection for the verifier's own tests).
pub fn grad_check_with(
    stack: &LayerStack,
    batch: &Tensor,
    labels: &Tensor,
    kind: LossKind,
    eps: f64,
    tamper: impl FnOnce(&mut [Tensor]),
) -> Result<GradCheckReport> {
    let (out, tape) = stack.forward_frozen(batch, Mode::Train)?;
    let (_, upstream) = loss(kind, &out, labels)?;
    let (_, mut analytic) = stack.backward(tape, &upstream)?;
    tamper(&mut analytic);

    let total: usize = analytic.iter().map(Tensor::len).sum();
    if total == 0 {
        return Ok(GradCheckReport {
            max_rel_error: 0.0,
            checked: 0,
        });
    }
    let stride = total.div_ceil(MAX_CHECKED);
    let scale = analytic
        .iter()
        .flat_map(|g| g.data())
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (FLOOR_FRACTION * scale).max(1e-8);

    let mut scratch = stack.clone();
    let eval = |s: &LayerStack| -> Result<f64> {
        let (out, _) = s.forward_frozen(batch, Mode::Train)?;
        Ok(loss(kind, &out, labels)?.0)
    };

    let mut max_rel_error = 0.0_f64;
    let mut checked = 0;
    let mut flat = 0;
    for (t, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            flat += 1;
            if (flat - 1) % stride != 0 {
                continue;
            }
            let original = scratch.params()[t].data()[j];
            scratch.params_mut()[t].data_mut()[j] = original + eps;
            let plus = eval(&scratch)?;
            scratch.params_mut()[t].data_mut()[j] = original - eps;
            let minus = eval(&scratch)?;
            scratch.params_mut()[t].data_mut()[j] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            max_rel_error = max_rel_error.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        checked,
    })
}
