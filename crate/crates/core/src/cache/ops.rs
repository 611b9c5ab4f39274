//! Analytic operation counts for cached sampling.

use super::CacheSchedule;
use crate::dit::DitConfig;

/// Per-step operation counts of each guidance branch, split into the part
/// the attention cache can skip and the rest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOps {
    pub cond_attn: f64,
    pub cond_other: f64,
    /// Zero when sampling without guidance.
    pub uncond_attn: f64,
    pub uncond_other: f64,
}

impl StepOps {
    pub fn per_step(&self) -> f64 {
        self.cond_attn + self.cond_other + self.uncond_attn + self.uncond_other
    }
}

/// `(ops without caching) / (ops with caching)` from full-step counts.
/// Counts must be positive.
pub fn op_savings(schedule: &CacheSchedule, ops: &StepOps) -> f64 {
    let n = schedule.steps as f64;
    let attn_full = schedule.full_count(schedule.k_attn) as f64;
    let cfg_full = schedule.full_count(schedule.k_cfg) as f64;
    let both = (0..schedule.steps)
        .filter(|&s| schedule.attn_full(s) && schedule.cfg_full(s))
        .count() as f64;
    let with = n * ops.cond_other + attn_full * ops.cond_attn + cfg_full * ops.uncond_other + both * ops.uncond_attn;
    n * ops.per_step() / with
}

/// The same ratio by summing each step's executed work.
pub fn op_savings_by_steps(schedule: &CacheSchedule, ops: &StepOps) -> f64 {
    let (mut without, mut with) = (0.0, 0.0);
    for f in schedule.flags() {
        without += ops.per_step();
        with += ops.cond_other;
        if f.attn_full {
            with += ops.cond_attn;
        }
        if f.cfg_full {
            with += ops.uncond_other;
            if f.attn_full {
                with += ops.uncond_attn;
            }
        }
    }
    without / with
}

/// Multiply-add based flop counts `(attention sites, everything else)` of
/// one DiT forward over a `(frames, h, w)` latent with `text_len` context
/// tokens. Attention sites include their q/k/v/o projections.
pub fn dit_forward_ops(config: &DitConfig, frames: usize, h: usize, w: usize, text_len: usize) -> (f64, f64) {
    let l = (frames * (h / 2) * (w / 2)) as f64;
    let d = config.dim as f64;
    let lt = text_len as f64;
    let td = config.text_dim as f64;
    let self_attn = 8.0 * l * d * d + 4.0 * l * l * d;
    let cross = if text_len > 0 { 4.0 * l * d * d + 4.0 * lt * td * d + 4.0 * l * lt * d } else { 0.0 };
    let c_in = 4.0 * (config.latent_channels + config.cond_channels) as f64;
    let c_out = 4.0 * config.latent_channels as f64;
    let per_block_other = 4.0 * l * d * config.ffn_dim as f64 + 2.0 * frames as f64 * d * 6.0 * d;
    let depth = config.depth as f64;
    let attn = depth * (self_attn + cross);
    let other = depth * per_block_other + 2.0 * l * c_in * d + 2.0 * l * d * c_out;
    (attn, other)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_steps_cfg_cached() {
        // 8 steps, every other uncond pass skipped, uncond half the work
        let s = CacheSchedule::new(8, 1, 2, 0, 0).unwrap();
        let ops = StepOps { cond_attn: 0.0, cond_other: 1.0, uncond_attn: 0.0, uncond_other: 1.0 };
        assert!((op_savings(&s, &ops) - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(op_savings(&CacheSchedule::disabled(8).unwrap(), &ops), 1.0);
    }
}
