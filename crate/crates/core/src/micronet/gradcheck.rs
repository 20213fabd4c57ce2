//! Central finite-difference verification of [`Network::backward`].

use super::{softmax_cross_entropy, Network};
use crate::error::Result;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared on an absolute scale: below it
/// the round-off of a central difference (about `1e-16 / h`) dominates any
/// relative comparison.
pub const SCALE_FLOOR: f64 = 1e-4;

/// One compared component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Component {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Component {
    /// `|a - n| / max(|a|, |n|, SCALE_FLOOR)`.
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(SCALE_FLOOR);
        (self.analytic - self.numeric).abs() / scale
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Components whose perturbation flipped a ReLU, where the loss is not
    /// differentiable and central differences are meaningless.
    pub skipped_kinks: usize,
    pub worst: Option<Component>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.worst.map_or(0.0, |c| c.relative_error())
    }
}

fn loss(
    net: &Network,
    pixels: &Tensor,
    metadata: &[f64],
    target: usize,
    weight: f64,
    dropout_seed: Option<u64>,
) -> Result<f64> {
    let scores = net.forward(pixels, metadata, dropout_seed.is_some(), dropout_seed.unwrap_or(0))?;
    softmax_cross_entropy(scores.as_slice(), target, weight)
}

/// Compares every analytic gradient component with `(L(p+h) - L(p-h)) / 2h`.
pub fn check_gradients(
    net: &Network,
    pixels: &Tensor,
    metadata: &[f64],
    target: usize,
    class_weights: &[f64],
    dropout_seed: Option<u64>,
    h: f64,
) -> Result<GradCheck> {
    let (_, grads) = net.backward(pixels, metadata, target, class_weights, dropout_seed)?;
    let base_pattern = net.relu_pattern(pixels, metadata, dropout_seed)?;
    let weight = class_weights[target];
    let mut probe = net.clone();
    let mut report = GradCheck::default();
    for (t, grad) in grads.iter().enumerate() {
        for i in 0..grad.len() {
            let original = probe.params()[t].data()[i];
            let mut side = |delta: f64| -> Result<(f64, bool)> {
                probe.params_mut()[t].data_mut()[i] = original + delta;
                let l = loss(&probe, pixels, metadata, target, weight, dropout_seed)?;
                let same = probe.relu_pattern(pixels, metadata, dropout_seed)? == base_pattern;
                Ok((l, same))
            };
            let (plus, same_plus) = side(h)?;
            let (minus, same_minus) = side(-h)?;
            probe.params_mut()[t].data_mut()[i] = original;
            if !(same_plus && same_minus) {
                report.skipped_kinks += 1;
                continue;
            }
            let c = Component {
                tensor: t,
                index: i,
                analytic: grad.data()[i],
                numeric: (plus - minus) / (2.0 * h),
            };
            report.checked += 1;
            if report.worst.is_none_or(|w| c.relative_error() > w.relative_error()) {
                report.worst = Some(c);
            }
        }
    }
    Ok(report)
}
