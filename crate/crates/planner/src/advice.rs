use crate::cost::{flop_terms, Pass};
use crate::{invalid, ClusterSpec, CostCoeffs, ModelShape, Result};
use serde::Serialize;

/// Layers of forward compute a single layer's offload may hide behind.
pub const DEFAULT_OVERLAP_BUDGET: f64 = 3.0;

/// Cost of one encoder-output broadcast, as a fraction of a training step.
pub const DEFAULT_BROADCAST_FRACTION: f64 = 2.5e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LayerPlan {
    Offload,
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OffloadAdvice {
    /// Host transfer time of one layer's activations over its forward compute time.
    pub ratio: f64,
    pub budget: f64,
    pub layers: Vec<LayerPlan>,
}

impl OffloadAdvice {
    pub fn offloaded(&self) -> usize {
        self.layers.iter().filter(|&&l| l == LayerPlan::Offload).count()
    }
}

/// Offload while the transfer hides behind `budget` layers of compute and host
/// memory lasts; checkpoint the rest.
///
/// Both the transfer and the compute shrink by `cp`, so the ratio does not
/// depend on it; only the host-memory fill does.
pub fn offload_vs_gc(
    shape: &ModelShape,
    coeffs: &CostCoeffs,
    cluster: &ClusterSpec,
    cp: u64,
    budget: f64,
) -> Result<OffloadAdvice> {
    shape.validate()?;
    coeffs.validate()?;
    if cp == 0 || budget.is_nan() || budget < 0.0 {
        return Err(invalid("offload advice", format!("need cp >= 1 and budget >= 0, got {cp}, {budget}")));
    }
    let layer_bytes = coeffs.gamma * (shape.batch * shape.seq * shape.hidden) as f64 / cp as f64;
    let transfer = layer_bytes / cluster.host_bw;
    let (linear, attn) = flop_terms(shape, coeffs, Pass::Forward);
    let compute = (linear + attn) / shape.layers as f64 / cp as f64 / cluster.gpu_flops;
    let ratio = if transfer == 0.0 { 0.0 } else { transfer / compute };
    let room = if ratio <= budget {
        if layer_bytes == 0.0 {
            usize::MAX
        } else {
            (cluster.host_memory / layer_bytes).floor() as usize
        }
    } else {
        0
    };
    let layers = (0..shape.layers as usize)
        .map(|i| if i < room { LayerPlan::Offload } else { LayerPlan::Checkpoint })
        .collect();
    Ok(OffloadAdvice { ratio, budget, layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SwitchCost {
    /// Encoder share once each rank encodes `1/cp` of the group's inputs.
    pub encoder_fraction: f64,
    /// `cp` sequential broadcasts of the encoded results.
    pub broadcast_fraction: f64,
}

impl SwitchCost {
    pub fn total(&self) -> f64 {
        self.encoder_fraction + self.broadcast_fraction
    }

    /// The `cp` beyond which broadcasts outgrow the encoder savings.
    pub fn crossover(fraction: f64, broadcast: f64) -> f64 {
        if broadcast == 0.0 {
            f64::INFINITY
        } else {
            (fraction / broadcast).sqrt()
        }
    }
}

/// Encoder share of a step when the CP group takes turns encoding.
///
/// Without switching, every rank of a CP group would encode the same sample.
pub fn strategy_switch_overhead(cp: u64, fraction: f64, broadcast: f64) -> Result<SwitchCost> {
    if cp == 0 || !(0.0..=1.0).contains(&fraction) || broadcast.is_nan() || broadcast < 0.0 {
        return Err(invalid(
            "strategy switch",
            format!("need cp >= 1, fraction in [0, 1], broadcast >= 0; got {cp}, {fraction}, {broadcast}"),
        ));
    }
    if cp == 1 {
        return Ok(SwitchCost { encoder_fraction: fraction, broadcast_fraction: 0.0 });
    }
    Ok(SwitchCost {
        encoder_fraction: fraction / cp as f64,
        broadcast_fraction: cp as f64 * broadcast,
    })
}
