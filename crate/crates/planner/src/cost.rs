use crate::{CostCoeffs, ModelShape};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Pass {
    Forward,
    ForwardBackward,
}

/// `L(α·b·s·h² + β·b·s²·h)` in integers.
pub fn dit_flops_exact(shape: &ModelShape, coeffs: &CostCoeffs, pass: Pass) -> u128 {
    let (l, b, s, h) = (shape.layers as u128, shape.batch as u128, shape.seq as u128, shape.hidden as u128);
    let (a, be) = (coeffs.alpha(pass) as u128, coeffs.beta(pass) as u128);
    l * (a * b * s * h * h + be * b * s * s * h)
}

pub fn dit_flops(shape: &ModelShape, coeffs: &CostCoeffs, pass: Pass) -> f64 {
    let (linear, attn) = flop_terms(shape, coeffs, pass);
    linear + attn
}

/// The linear and attention terms separately, as f64.
pub(crate) fn flop_terms(shape: &ModelShape, coeffs: &CostCoeffs, pass: Pass) -> (f64, f64) {
    let (l, b, s, h) = (shape.layers as f64, shape.batch as f64, shape.seq as f64, shape.hidden as f64);
    let (a, be) = (coeffs.alpha(pass) as f64, coeffs.beta(pass) as f64);
    (l * a * b * s * h * h, l * be * b * s * s * h)
}

/// `βs / (αh + βs)`: the attention share of DiT FLOPs.
pub fn attention_fraction(shape: &ModelShape, coeffs: &CostCoeffs, pass: Pass) -> f64 {
    let bs = coeffs.beta(pass) as f64 * shape.seq as f64;
    bs / (coeffs.alpha(pass) as f64 * shape.hidden as f64 + bs)
}

/// `γ·L·b·s·h` bytes for the whole unsharded sequence.
pub fn activation_memory(shape: &ModelShape, gamma: f64) -> f64 {
    gamma * shape.layers as f64 * shape.batch as f64 * shape.seq as f64 * shape.hidden as f64
}

pub fn param_count(shape: &ModelShape, coeffs: &CostCoeffs) -> f64 {
    coeffs.params_per_h2 as f64 * shape.layers as f64 * (shape.hidden as f64).powi(2)
}
