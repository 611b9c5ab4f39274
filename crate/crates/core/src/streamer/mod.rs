//! Sliding-window denoise queue for unbounded generation.
//!
//! The window holds `w` tokens (one latent frame each) at levels `1..=w`,
//! lowest on the left. Level `l` sits at flow time `t = 1 - l/w`, so level
//! `w` is pure noise and level 0 is clean. Every step moves each token down
//! one level with Euler updates, dequeues the now-clean leftmost token and
//! appends fresh noise at level `w`. A token enqueued after step `n` is
//! emitted by step `n + w`; the `w` tokens present at initialization are
//! discarded as warmup.

mod train;

pub use train::{make_training_window, masked_loss, TrainingWindow};

use crate::dit::Dit;
use crate::error::{ensure, Error, Result};
use crate::flow::VelocityField;
use crate::rng;
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

/// Velocities for a run of tokens, each at its own flow time.
///
/// `tokens` are `(C, h, w)` latent frames in temporal order; clean context
/// tokens come first with time 1. Returns one velocity per token.
pub trait WindowModel: Sync {
    fn window_velocity(&self, tokens: &[&Tensor], times: &[f64], ctx: Option<&Tensor>) -> Result<Vec<Tensor>>;
}

impl WindowModel for Dit {
    fn window_velocity(&self, tokens: &[&Tensor], times: &[f64], ctx: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let first = tokens.first().ok_or_else(|| Error::invalid("window_velocity", "no tokens"))?;
        first.expect_rank("window_velocity", 3)?;
        let (c, h, w) = (first.dim(0), first.dim(1), first.dim(2));
        let frames: Vec<Tensor> = tokens
            .iter()
            .map(|t| t.reshape(&[c, 1, h, w]))
            .collect::<Result<_>>()?;
        let video = Tensor::cat(&frames.iter().collect::<Vec<_>>(), 1)?.into_reshape(&[1, c, tokens.len(), h, w])?;
        let v = self.velocity_frames(&video, times, ctx, None)?;
        let v = v.into_reshape(&[c, tokens.len(), h, w])?;
        (0..tokens.len())
            .map(|i| v.narrow(1, i, 1)?.into_reshape(&[c, h, w]))
            .collect()
    }
}

/// Applies a per-token field independently: no token sees another.
pub struct Tokenwise<M>(pub M);

impl<M: VelocityField + Sync> WindowModel for Tokenwise<M> {
    fn window_velocity(&self, tokens: &[&Tensor], times: &[f64], ctx: Option<&Tensor>) -> Result<Vec<Tensor>> {
        ensure!(
            tokens.len() == times.len(),
            Error::shape("window_velocity", "times", tokens.len(), times.len())
        );
        tokens.iter().zip(times).map(|(x, &t)| self.0.velocity(x, t, ctx)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotEvaluation {
    /// One model call over context plus the whole window.
    Joint,
    /// One call per slot over context plus that slot, run in parallel.
    PerSlot,
}

impl fmt::Display for SlotEvaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SlotEvaluation::Joint => "joint",
            SlotEvaluation::PerSlot => "per_slot",
        })
    }
}

impl FromStr for SlotEvaluation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(SlotEvaluation::Joint),
            "per_slot" => Ok(SlotEvaluation::PerSlot),
            _ => Err(Error::invalid("slot evaluation", format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    /// Window length `w`, usually the solver step count.
    pub window: usize,
    /// Euler updates per level; each update spans `1 / (w * substeps)`.
    pub substeps: usize,
    /// Most recent clean tokens kept as level-0 context (0 disables).
    pub context_horizon: usize,
    /// Emitted tokens rejoin the context automatically.
    pub reintroduce_emitted: bool,
    pub evaluation: SlotEvaluation,
    /// `(C, h, w)` of one token.
    pub token_shape: [usize; 3],
    pub seed: u64,
}

impl StreamConfig {
    pub fn new(window: usize, token_shape: [usize; 3], seed: u64) -> Self {
        Self {
            window,
            substeps: 1,
            context_horizon: 0,
            reintroduce_emitted: true,
            evaluation: SlotEvaluation::Joint,
            token_shape,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.window >= 1, Error::invalid("stream config", "window must be >= 1"));
        ensure!(self.substeps >= 1, Error::invalid("stream config", "substeps must be >= 1"));
        ensure!(
            self.token_shape.iter().all(|&d| d >= 1),
            Error::invalid("stream config", "token dimensions must be >= 1")
        );
        Ok(())
    }
}

/// A token and its noise level; `index` counts tokens in enqueue order.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub index: u64,
    pub level: usize,
    pub token: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenoiseQueue {
    config: StreamConfig,
    slots: VecDeque<Slot>,
    context: VecDeque<Tensor>,
    next_index: u64,
    steps: u64,
    warmup_left: usize,
}

/// Flow time of a level.
pub fn level_time(level: usize, window: usize) -> f64 {
    1.0 - level as f64 / window as f64
}

/// Initial noise for the token with enqueue index `index`.
pub fn token_noise(seed: u64, index: u64, shape: &[usize]) -> Tensor {
    rng::noise(seed, STREAM_NOISE, index, shape)
}

const STREAM_NOISE: u64 = 0x5354;

impl DenoiseQueue {
    pub fn new(config: StreamConfig) -> Result<Self> {
        config.validate()?;
        let w = config.window;
        let mut q = Self {
            slots: VecDeque::with_capacity(w + 1),
            context: VecDeque::with_capacity(config.context_horizon + 1),
            next_index: 0,
            steps: 0,
            warmup_left: w,
            config,
        };
        for level in 1..=w {
            let slot = q.fresh(level);
            q.slots.push_back(slot);
        }
        Ok(q)
    }

    fn fresh(&mut self, level: usize) -> Slot {
        let index = self.next_index;
        self.next_index += 1;
        Slot {
            index,
            level,
            token: token_noise(self.config.seed, index, &self.config.token_shape),
        }
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn levels(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.level).collect()
    }

    pub fn slots(&self) -> impl Iterator<Item = &Slot> {
        self.slots.iter()
    }

    pub fn context(&self) -> impl Iterator<Item = &Tensor> {
        self.context.iter()
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    pub fn warmup_remaining(&self) -> usize {
        self.warmup_left
    }

    /// Slot count per level `1..=w`.
    pub fn level_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.config.window];
        for s in &self.slots {
            h[s.level - 1] += 1;
        }
        h
    }

    /// Bytes held in token tensors (window plus context).
    pub fn state_bytes(&self) -> usize {
        let n: usize = self.slots.iter().map(|s| s.token.numel()).sum::<usize>()
            + self.context.iter().map(Tensor::numel).sum::<usize>();
        n * std::mem::size_of::<f32>()
    }

    /// Adds clean tokens as level-0 context; only the newest
    /// `context_horizon` are kept.
    pub fn reintroduce_cached(&mut self, tokens: &[Slot]) -> Result<()> {
        for t in tokens {
            ensure!(
                t.level == 0,
                Error::invalid(
                    "reintroduce_cached",
                    format!("token {} is at level {}, only clean tokens can be reintroduced", t.index, t.level)
                )
            );
            ensure!(
                t.token.shape() == self.config.token_shape,
                Error::shape(
                    "reintroduce_cached",
                    format!("token {}", t.index),
                    format!("{:?}", self.config.token_shape),
                    format!("{:?}", t.token.shape())
                )
            );
        }
        for t in tokens {
            self.push_context(t.token.clone());
        }
        Ok(())
    }

    fn push_context(&mut self, token: Tensor) {
        if self.config.context_horizon == 0 {
            return;
        }
        if self.context.len() == self.config.context_horizon {
            self.context.pop_front();
        }
        self.context.push_back(token);
    }

    fn velocities(&self, model: &dyn WindowModel, times: &[f64], ctx: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let k = self.context.len();
        let context: Vec<&Tensor> = self.context.iter().collect();
        let check = |v: Vec<Tensor>, want: usize| -> Result<Vec<Tensor>> {
            ensure!(v.len() == want, Error::shape("queue_step", "model outputs", want, v.len()));
            for x in &v {
                ensure!(
                    x.shape() == self.config.token_shape,
                    Error::shape(
                        "queue_step",
                        "velocity",
                        format!("{:?}", self.config.token_shape),
                        format!("{:?}", x.shape())
                    )
                );
            }
            Ok(v)
        };
        match self.config.evaluation {
            SlotEvaluation::Joint => {
                let mut tokens = context.clone();
                tokens.extend(self.slots.iter().map(|s| &s.token));
                let mut all_t = vec![1.0; k];
                all_t.extend_from_slice(times);
                let v = check(model.window_velocity(&tokens, &all_t, ctx)?, k + self.slots.len())?;
                Ok(v.into_iter().skip(k).collect())
            }
            SlotEvaluation::PerSlot => self
                .slots
                .par_iter()
                .zip(times.par_iter())
                .map(|(s, &t)| {
                    let mut tokens = context.clone();
                    tokens.push(&s.token);
                    let mut all_t = vec![1.0; k];
                    all_t.push(t);
                    let mut v = check(model.window_velocity(&tokens, &all_t, ctx)?, k + 1)?;
                    Ok(v.pop().expect("checked length"))
                })
                .collect(),
        }
    }

    /// Advances every slot one level and rotates the window. Returns the
    /// emitted clean token once warmup is over.
    pub fn step(&mut self, model: &dyn WindowModel, ctx: Option<&Tensor>) -> Result<Option<Slot>> {
        let w = self.config.window;
        let sub = self.config.substeps;
        let dt = 1.0 / (w * sub) as f64;
        for j in 0..sub {
            let times: Vec<f64> = self
                .slots
                .iter()
                .map(|s| level_time(s.level, w) + j as f64 * dt)
                .collect();
            let v = self.velocities(model, &times, ctx)?;
            for (s, v) in self.slots.iter_mut().zip(&v) {
                s.token.axpy(dt as f32, v)?;
            }
        }
        for s in &mut self.slots {
            s.level -= 1;
        }
        let mut out = self.slots.pop_front().expect("window is never empty");
        debug_assert_eq!(out.level, 0);
        let fresh = self.fresh(w);
        self.slots.push_back(fresh);
        self.steps += 1;
        if self.warmup_left > 0 {
            self.warmup_left -= 1;
            return Ok(None);
        }
        if self.config.reintroduce_emitted {
            self.push_context(out.token.clone());
        }
        out.level = 0;
        Ok(Some(out))
    }
}

/// Manifest record for one emission.
pub fn manifest_line(step: u64, path: &str, histogram: &[usize]) -> String {
    let h: Vec<String> = histogram.iter().map(ToString::to_string).collect();
    format!("step={step} emitted={path} level_histogram={}", h.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero;

    impl VelocityField for Zero {
        fn velocity(&self, x: &Tensor, _t: f64, _ctx: Option<&Tensor>) -> Result<Tensor> {
            Ok(Tensor::zeros(x.shape()))
        }
    }

    #[test]
    fn init_fills_graduated_levels() {
        let q = DenoiseQueue::new(StreamConfig::new(4, [2, 1, 1], 0)).unwrap();
        assert_eq!(q.levels(), vec![1, 2, 3, 4]);
        assert_eq!(q.level_histogram(), vec![1, 1, 1, 1]);
        assert_eq!(q.warmup_remaining(), 4);
        assert!(DenoiseQueue::new(StreamConfig::new(0, [2, 1, 1], 0)).is_err());
    }

    #[test]
    fn warmup_then_one_emission_per_step() {
        let mut q = DenoiseQueue::new(StreamConfig::new(3, [1, 1, 1], 0)).unwrap();
        let got: Vec<Option<u64>> = (0..6).map(|_| q.step(&Tokenwise(Zero), None).unwrap().map(|s| s.index)).collect();
        assert_eq!(got, vec![None, None, None, Some(3), Some(4), Some(5)]);
    }

    #[test]
    fn time_mapping() {
        assert_eq!(level_time(4, 4), 0.0);
        assert_eq!(level_time(0, 4), 1.0);
        assert_eq!(level_time(1, 4), 0.75);
    }

    #[test]
    fn manifest_format() {
        assert_eq!(manifest_line(7, "t/0003.wvt", &[1, 1, 1]), "step=7 emitted=t/0003.wvt level_histogram=1,1,1");
    }
}
