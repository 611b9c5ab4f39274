//! Analytic cost model for laying out sequence-parallel DiT training.
//!
//! A layout nests four groups, innermost first: Ulysses all-to-all, Ring
//! K/V rotation (together the context-parallel group of size `cp`), the rest
//! of the FSDP group (`fsdp / cp` data-parallel replicas sharing one parameter
//! shard set), and outer data parallelism. Ranks are numbered so that every
//! group is a contiguous or strided block starting at rank 0, which is what
//! decides whether a group stays on one node.

mod advice;
mod cost;
mod layout;
mod search;

pub use advice::{
    offload_vs_gc, strategy_switch_overhead, LayerPlan, OffloadAdvice, SwitchCost, DEFAULT_BROADCAST_FRACTION,
    DEFAULT_OVERLAP_BUDGET,
};
pub use cost::{activation_memory, attention_fraction, dit_flops, dit_flops_exact, param_count, Pass};
pub use layout::{comm_time, feasible, plan, CommBreakdown, Verdict};
pub use search::{enumerate, rank, search, Objective};

use serde::Serialize;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },
    #[error("no feasible configuration: {binding} ({detail})")]
    NoFeasible { binding: String, detail: String },
}

pub type Result<T> = std::result::Result<T, PlanError>;

fn invalid(what: &'static str, why: impl Into<String>) -> PlanError {
    PlanError::Invalid { what, why: why.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelShape {
    /// DiT layers `L`.
    pub layers: u64,
    /// Micro batch `b` per context-parallel group.
    pub batch: u64,
    /// Sequence length `s` in tokens.
    pub seq: u64,
    /// Hidden size `h`.
    pub hidden: u64,
}

impl ModelShape {
    pub fn new(layers: u64, batch: u64, seq: u64, hidden: u64) -> Result<Self> {
        let s = Self { layers, batch, seq, hidden };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.batch == 0 || self.seq == 0 || self.hidden == 0 {
            return Err(invalid("model shape", format!("every dimension must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostCoeffs {
    /// Linear-layer FLOP coefficient of one forward pass; a backward pass
    /// costs twice that.
    pub alpha_fwd: u64,
    pub beta_fwd: u64,
    pub beta_bwd: u64,
    /// Activation bytes per layer, token and hidden unit.
    pub gamma: f64,
    /// Parameters per layer in units of `h²`.
    pub params_per_h2: u64,
    /// Weight, gradient-master and optimizer bytes per parameter.
    pub state_bytes_per_param: f64,
}

impl Default for CostCoeffs {
    fn default() -> Self {
        Self {
            alpha_fwd: 24,
            beta_fwd: 4,
            beta_bwd: 8,
            gamma: 60.0,
            params_per_h2: 14,
            state_bytes_per_param: 14.0,
        }
    }
}

impl CostCoeffs {
    pub fn validate(&self) -> Result<()> {
        if self.beta_fwd != 4 || self.beta_bwd != 8 {
            return Err(invalid(
                "cost coefficients",
                format!("non-causal attention needs beta 4/8, got {}/{}", self.beta_fwd, self.beta_bwd),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(invalid("cost coefficients", format!("gamma must be finite and > 0, got {}", self.gamma)));
        }
        if !(self.state_bytes_per_param >= 0.0 && self.state_bytes_per_param.is_finite()) {
            return Err(invalid("cost coefficients", "state bytes per parameter must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn alpha(&self, pass: Pass) -> u64 {
        match pass {
            Pass::Forward => self.alpha_fwd,
            Pass::ForwardBackward => 3 * self.alpha_fwd,
        }
    }

    pub fn beta(&self, pass: Pass) -> u64 {
        match pass {
            Pass::Forward => self.beta_fwd,
            Pass::ForwardBackward => self.beta_fwd + self.beta_bwd,
        }
    }
}

/// Per-layer communication volumes, in passes over the relevant tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommCoeffs {
    /// Bytes per communicated element.
    pub elem_bytes: f64,
    /// All-to-alls per layer: q, k, v and output, forward and backward.
    pub ulysses_alltoalls: f64,
    /// K/V block passes per ring hop: one forward, two backward (K/V + dK/dV).
    pub ring_passes: f64,
    /// Parameter gathers and gradient scatters per layer.
    pub fsdp_passes: f64,
    /// Fraction of a layer's compute available to hide FSDP and DP traffic.
    pub fsdp_overlap: f64,
}

impl Default for CommCoeffs {
    fn default() -> Self {
        Self {
            elem_bytes: 2.0,
            ulysses_alltoalls: 8.0,
            ring_passes: 3.0,
            fsdp_passes: 3.0,
            fsdp_overlap: 1.0,
        }
    }
}

impl CommCoeffs {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.elem_bytes, self.ulysses_alltoalls, self.ring_passes, self.fsdp_passes];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("communication coefficients", "volumes must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.fsdp_overlap) {
            return Err(invalid("communication coefficients", format!("fsdp overlap {} outside [0, 1]", self.fsdp_overlap)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClusterSpec {
    pub gpus: u64,
    pub gpus_per_node: u64,
    /// Per-GPU bandwidth inside a node, bytes/s.
    pub intra_bw: f64,
    /// Per-GPU bandwidth between nodes, bytes/s.
    pub inter_bw: f64,
    pub gpu_memory: f64,
    /// Per-GPU host-link share when every GPU offloads at once, bytes/s.
    pub host_bw: f64,
    /// Sustained per-GPU FLOP/s.
    pub gpu_flops: f64,
    /// Host memory available per GPU for offloaded activations.
    pub host_memory: f64,
}

impl ClusterSpec {
    /// Defaults calibrated to an 8-GPU-per-node 80 GB accelerator cluster.
    pub fn new(gpus: u64, gpus_per_node: u64) -> Self {
        Self {
            gpus,
            gpus_per_node,
            intra_bw: 200e9,
            inter_bw: 25e9,
            gpu_memory: 80e9,
            host_bw: 4e9,
            gpu_flops: 400e12,
            host_memory: 200e9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gpus == 0 || self.gpus_per_node == 0 || self.gpus % self.gpus_per_node != 0 {
            return Err(invalid(
                "cluster",
                format!("{} GPUs do not split into nodes of {}", self.gpus, self.gpus_per_node),
            ));
        }
        let rates = [self.intra_bw, self.inter_bw, self.host_bw, self.gpu_flops];
        if rates.iter().any(|r| r.is_nan() || *r <= 0.0) {
            return Err(invalid("cluster", "bandwidths and FLOP rate must be > 0"));
        }
        if self.gpu_memory.is_nan() || self.gpu_memory < 0.0 || self.host_memory.is_nan() || self.host_memory < 0.0 {
            return Err(invalid("cluster", "memory capacities must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ParallelConfig {
    pub dp: u64,
    pub fsdp: u64,
    pub ulysses: u64,
    pub ring: u64,
}

impl ParallelConfig {
    pub fn new(dp: u64, fsdp: u64, ulysses: u64, ring: u64) -> Self {
        Self { dp, fsdp, ulysses, ring }
    }

    pub fn cp(&self) -> u64 {
        self.ulysses * self.ring
    }

    /// Micro batches per optimizer step; `None` when `cp ∤ fsdp`.
    pub fn global_batch_multiple(&self) -> Option<u64> {
        let cp = self.cp();
        (cp > 0 && self.fsdp % cp == 0).then(|| self.dp * (self.fsdp / cp))
    }
}

impl std::fmt::Display for ParallelConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "dp={} fsdp={} ulysses={} ring={}", self.dp, self.fsdp, self.ulysses, self.ring)
    }
}

/// Everything the cost model says about one layout.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanReport {
    pub config: ParallelConfig,
    pub compute_s: f64,
    pub comm: CommBreakdown,
    /// Exposed communication over step time.
    pub comm_fraction: f64,
    pub step_s: f64,
    pub activation_bytes: f64,
    pub state_bytes: f64,
    pub feasible: bool,
    pub reasons: Vec<String>,
    pub warnings: Vec<String>,
    pub global_batch_multiple: u64,
    /// Micro-batch samples per second across the cluster.
    pub throughput: f64,
}

/// A model, its cost constants and the cluster it trains on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scenario {
    pub shape: ModelShape,
    pub coeffs: CostCoeffs,
    pub comm: CommCoeffs,
    pub cluster: ClusterSpec,
}

impl Scenario {
    pub fn new(shape: ModelShape, cluster: ClusterSpec) -> Self {
        Self { shape, coeffs: CostCoeffs::default(), comm: CommCoeffs::default(), cluster }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        self.coeffs.validate()?;
        self.comm.validate()?;
        self.cluster.validate()
    }
}
