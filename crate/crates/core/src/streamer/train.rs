//! Training windows: `2w` tokens, loss only on the last `w`.

use super::level_time;
use crate::error::{ensure, Error, Result};
use crate::flow::{interpolate, target_velocity};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    /// Noised tokens `x_t`.
    pub inputs: Vec<Tensor>,
    /// Regression targets `x1 - x0`.
    pub targets: Vec<Tensor>,
    pub times: Vec<f64>,
    /// 0 for the `w` warmup positions, 1 for the last `w`.
    pub loss_mask: Vec<f32>,
}

/// Noises `2w` clean tokens with the window's graduated levels. Each half
/// carries levels `1..=w` left to right, each time drawn uniformly inside its
/// level's interval `[1 - l/w, 1 - (l-1)/w)`.
pub fn make_training_window(tokens: &[Tensor], window: usize, seed: u64) -> Result<TrainingWindow> {
    ensure!(window >= 1, Error::invalid("make_training_window", "window must be >= 1"));
    ensure!(
        tokens.len() == 2 * window,
        Error::shape("make_training_window", "sequence length", 2 * window, tokens.len())
    );
    let mut r = rng::seeded(rng::derive_seed(seed, 0x7457, 0));
    let mut out = TrainingWindow {
        inputs: Vec::with_capacity(2 * window),
        targets: Vec::with_capacity(2 * window),
        times: Vec::with_capacity(2 * window),
        loss_mask: Vec::with_capacity(2 * window),
    };
    for (i, x1) in tokens.iter().enumerate() {
        let level = i % window + 1;
        let t = level_time(level, window) + r.random::<f64>() / window as f64;
        let x0 = rng::noise(seed, 0x7458, i as u64, x1.shape());
        out.inputs.push(interpolate(&x0, x1, t)?);
        out.targets.push(target_velocity(&x0, x1)?);
        out.times.push(t);
        out.loss_mask.push(if i < window { 0.0 } else { 1.0 });
    }
    Ok(out)
}

/// Mean squared error over the masked tokens' elements.
pub fn masked_loss(pred: &[Tensor], target: &[Tensor], mask: &[f32]) -> Result<f64> {
    ensure!(
        pred.len() == target.len() && pred.len() == mask.len(),
        Error::shape("masked_loss", "token count", target.len(), pred.len())
    );
    let (mut sum, mut n) = (0.0f64, 0usize);
    for ((p, t), &m) in pred.iter().zip(target).zip(mask) {
        p.expect_same_shape("masked_loss", t)?;
        if m == 0.0 {
            continue;
        }
        sum += m as f64 * p.data().iter().zip(t.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>();
        n += p.numel();
    }
    ensure!(n > 0, Error::invalid("masked_loss", "mask selects no tokens"));
    Ok(sum / n as f64)
}
