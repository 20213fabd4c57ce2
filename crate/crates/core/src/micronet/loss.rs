use crate::error::{Error, Result};

fn check(scores: &[f64], target: usize) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("empty score vector".into()));
    }
    if target >= scores.len() {
        return Err(Error::LabelOutOfRange {
            index: 0,
            label: target,
            classes: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            layer: "softmax_cross_entropy".into(),
        });
    }
    Ok(())
}

/// `-class_weight * ln(softmax(scores)[target])`, stabilised by subtracting
/// the maximum score.
pub fn softmax_cross_entropy(scores: &[f64], target: usize, class_weight: f64) -> Result<f64> {
    check(scores, target)?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(-class_weight * (scores[target] - max - log_norm))
}

/// Loss together with its gradient `class_weight * (softmax(scores) - onehot)`.
pub fn softmax_cross_entropy_grad(scores: &[f64], target: usize, class_weight: f64) -> Result<(f64, Vec<f64>)> {
    let loss = softmax_cross_entropy(scores, target, class_weight)?;
    let mut grad = crate::fusion::softmax(scores);
    grad[target] -= 1.0;
    grad.iter_mut().for_each(|g| *g *= class_weight);
    Ok((loss, grad))
}
