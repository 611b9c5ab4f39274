//! Step-scheduled reuse during sampling.
//!
//! Attention outputs are recomputed on full steps and replayed in between.
//! The unconditional CFG branch is recomputed on its own full steps. In
//! between it is rebuilt as `cond + (uncond - cond)`, where the difference
//! is the one measured on the last full step.

mod ops;

pub use ops::{dit_forward_ops, op_savings, op_savings_by_steps, StepOps};

use crate::dit::{AttentionHook, AttnSite, Dit};
use crate::error::{ensure, Error, Result};
use crate::flow::{cfg_velocity, euler_loop, GuidanceConfig};
use crate::tensor::Tensor;
use std::collections::HashMap;

pub const DEFAULT_HEAD: usize = 2;
pub const DEFAULT_TAIL: usize = 2;

/// Which of `steps` sampling steps recompute attention and the CFG branch.
///
/// A step is full when it falls in the first `head` or last `tail` steps, or
/// when `(step - head) % k == 0` in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheSchedule {
    pub steps: usize,
    pub k_attn: usize,
    pub k_cfg: usize,
    pub head: usize,
    pub tail: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepFlags {
    pub attn_full: bool,
    pub cfg_full: bool,
}

impl CacheSchedule {
    pub fn new(steps: usize, k_attn: usize, k_cfg: usize, head: usize, tail: usize) -> Result<Self> {
        ensure!(steps >= 1, Error::invalid("cache schedule", "need at least one step"));
        ensure!(
            k_attn >= 1 && k_cfg >= 1,
            Error::invalid("cache schedule", "refresh intervals must be >= 1")
        );
        ensure!(
            head + tail <= steps,
            Error::invalid("cache schedule", format!("head {head} + tail {tail} exceeds {steps} steps"))
        );
        Ok(Self { steps, k_attn, k_cfg, head, tail })
    }

    /// Every step full: caching off.
    pub fn disabled(steps: usize) -> Result<Self> {
        Self::new(steps, 1, 1, 0, 0)
    }

    fn full(&self, step: usize, k: usize) -> bool {
        step < self.head || step >= self.steps - self.tail || (step - self.head) % k == 0
    }

    pub fn attn_full(&self, step: usize) -> bool {
        self.full(step, self.k_attn)
    }

    pub fn cfg_full(&self, step: usize) -> bool {
        self.full(step, self.k_cfg)
    }

    pub fn flags(&self) -> Vec<StepFlags> {
        (0..self.steps)
            .map(|s| StepFlags { attn_full: self.attn_full(s), cfg_full: self.cfg_full(s) })
            .collect()
    }

    pub fn interior(&self) -> usize {
        self.steps - self.head - self.tail
    }

    /// Full-step count for interval `k`: guards plus `ceil(interior / k)`.
    pub fn full_count(&self, k: usize) -> usize {
        self.head + self.tail + self.interior().div_ceil(k)
    }
}

pub fn plan_schedule(steps: usize, k_attn: usize, k_cfg: usize, head: usize, tail: usize) -> Result<Vec<StepFlags>> {
    Ok(CacheSchedule::new(steps, k_attn, k_cfg, head, tail)?.flags())
}

/// Last computed output of one attention site.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnCacheEntry {
    pub output: Tensor,
    pub step: usize,
}

/// Attention hook keyed by `(block, site)`; one instance per sampling branch.
#[derive(Debug, Clone, Default)]
pub struct AttentionCache {
    entries: HashMap<AttnSite, AttnCacheEntry>,
    step: usize,
    full: bool,
    pub computed: usize,
    pub reused: usize,
}

impl AttentionCache {
    pub fn new() -> Self {
        Self { full: true, ..Default::default() }
    }

    /// Sets whether calls until the next `begin_step` compute or replay.
    pub fn begin_step(&mut self, step: usize, full: bool) {
        self.step = step;
        self.full = full;
    }

    pub fn entry(&self, site: AttnSite) -> Option<&AttnCacheEntry> {
        self.entries.get(&site)
    }

    pub fn cached_attention(
        &mut self,
        site: AttnSite,
        compute: &mut dyn FnMut() -> Result<Tensor>,
    ) -> Result<Tensor> {
        if self.full {
            let output = compute()?;
            self.entries.insert(site, AttnCacheEntry { output: output.clone(), step: self.step });
            self.computed += 1;
            return Ok(output);
        }
        let e = self.entries.get(&site).ok_or_else(|| {
            Error::Cache(format!("step {}: {site:?} read before any full step wrote it", self.step))
        })?;
        self.reused += 1;
        Ok(e.output.clone())
    }
}

impl AttentionHook for AttentionCache {
    fn attend(&mut self, site: AttnSite, compute: &mut dyn FnMut() -> Result<Tensor>) -> Result<Tensor> {
        self.cached_attention(site, compute)
    }
}

/// `uncond - cond` from the last full CFG step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CfgResidual {
    delta: Option<Tensor>,
    step: Option<usize>,
}

impl CfgResidual {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn delta(&self) -> Option<&Tensor> {
        self.delta.as_ref()
    }

    pub fn step(&self) -> Option<usize> {
        self.step
    }
}

/// Unconditional output for one step: computed and remembered on full
/// steps, otherwise `cond_output + residual`.
pub fn cfg_cached_step(
    step: usize,
    full: bool,
    cond_output: &Tensor,
    residual: &mut CfgResidual,
    compute_uncond: impl FnOnce() -> Result<Tensor>,
) -> Result<Tensor> {
    if full {
        let u = compute_uncond()?;
        residual.delta = Some(u.sub(cond_output)?);
        residual.step = Some(step);
        return Ok(u);
    }
    let d = residual
        .delta
        .as_ref()
        .ok_or_else(|| Error::Cache(format!("step {step}: CFG residual used before any full step")))?;
    cond_output.add(d)
}

/// A velocity model that routes its attention through a hook.
pub trait HookedVelocity {
    fn velocity_with(&self, x: &Tensor, t: f64, ctx: Option<&Tensor>, hook: &mut dyn AttentionHook) -> Result<Tensor>;
}

impl HookedVelocity for Dit {
    fn velocity_with(&self, x: &Tensor, t: f64, ctx: Option<&Tensor>, hook: &mut dyn AttentionHook) -> Result<Tensor> {
        self.velocity_hooked(x, t, ctx, Some(hook))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunStats {
    pub cond_attn_full: usize,
    pub uncond_passes: usize,
    pub uncond_attn_full: usize,
}

#[derive(Debug, Clone)]
pub struct CachedRun {
    pub sample: Tensor,
    pub stats: RunStats,
}

/// Euler sampling from `x0` under `schedule`. Each branch keeps its own
/// attention cache; the unconditional cache only advances on full CFG steps.
pub fn cached_euler_integrate<M: HookedVelocity + ?Sized>(
    model: &M,
    x0: Tensor,
    ctx: Option<&Tensor>,
    guidance: Option<&GuidanceConfig>,
    schedule: &CacheSchedule,
) -> Result<CachedRun> {
    let mut cond_cache = AttentionCache::new();
    let mut uncond_cache = AttentionCache::new();
    let mut residual = CfgResidual::new();
    let mut stats = RunStats::default();
    let guided = guidance.filter(|g| g.scale != 1.0);
    let sample = euler_loop(x0, schedule.steps, |i, x, t| {
        let attn_full = schedule.attn_full(i);
        cond_cache.begin_step(i, attn_full);
        stats.cond_attn_full += attn_full as usize;
        let vc = model.velocity_with(x, t, ctx, &mut cond_cache)?;
        let Some(gc) = guided else {
            return Ok(vc);
        };
        let vu = cfg_cached_step(i, schedule.cfg_full(i), &vc, &mut residual, || {
            uncond_cache.begin_step(i, attn_full);
            stats.uncond_passes += 1;
            stats.uncond_attn_full += attn_full as usize;
            model.velocity_with(x, t, Some(&gc.null_context), &mut uncond_cache)
        })?;
        cfg_velocity(&vc, &vu, gc.scale)
    })?;
    Ok(CachedRun { sample, stats })
}

/// `||a - b|| / ||b||`.
pub fn relative_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.sub(b)?.l2_norm();
    let n = b.l2_norm();
    Ok(if n == 0.0 { d } else { d / n })
}

/// Guard grid search: the `(head, tail)` with the best op ratio whose
/// validation error stays within `tolerance`; ties go to fewer guard steps,
/// then smaller head. `None` when no candidate qualifies.
pub fn search_guards(
    base: CacheSchedule,
    heads: &[usize],
    tails: &[usize],
    ops: &StepOps,
    tolerance: f64,
    mut validation_error: impl FnMut(&CacheSchedule) -> Result<f64>,
) -> Result<Option<(CacheSchedule, f64, f64)>> {
    let mut best: Option<(CacheSchedule, f64, f64)> = None;
    for &head in heads {
        for &tail in tails {
            let Ok(s) = CacheSchedule::new(base.steps, base.k_attn, base.k_cfg, head, tail) else {
                continue;
            };
            let err = validation_error(&s)?;
            if err > tolerance {
                continue;
            }
            let ratio = op_savings(&s, ops);
            let better = match &best {
                None => true,
                Some((b, r, _)) => {
                    ratio > *r || (ratio == *r && (head + tail, head) < (b.head + b.tail, b.head))
                }
            };
            if better {
                best = Some((s, ratio, err));
            }
        }
    }
    Ok(best)
}
