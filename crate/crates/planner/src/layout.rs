use crate::cost::{activation_memory, flop_terms, param_count, Pass};
use crate::{invalid, ParallelConfig, PlanReport, Result, Scenario};
use serde::Serialize;

/// Seconds per training step spent communicating. `*_raw_s` is the full
/// transfer time, the unsuffixed field what remains after overlap.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CommBreakdown {
    pub ulysses_s: f64,
    pub ring_raw_s: f64,
    pub ring_s: f64,
    pub fsdp_raw_s: f64,
    pub fsdp_s: f64,
    pub dp_raw_s: f64,
    pub dp_s: f64,
}

impl CommBreakdown {
    /// Exposed time of all groups.
    pub fn total_s(&self) -> f64 {
        self.ulysses_s + self.ring_s + self.fsdp_s + self.dp_s
    }

    /// Exposed context-parallel time.
    pub fn cp_s(&self) -> f64 {
        self.ulysses_s + self.ring_s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub feasible: bool,
    /// Hard constraint violations.
    pub reasons: Vec<String>,
    /// Legal but discouraged choices.
    pub warnings: Vec<String>,
}

/// Whether an aligned block of `size` consecutive ranks stays on one node.
fn fits_node(size: u64, per_node: u64) -> bool {
    size <= per_node && per_node % size == 0
}

fn structure_errors(sc: &Scenario, c: &ParallelConfig) -> Vec<String> {
    let mut out = Vec::new();
    if c.dp == 0 || c.fsdp == 0 || c.ulysses == 0 || c.ring == 0 {
        out.push(format!("every degree must be >= 1 ({c})"));
        return out;
    }
    if c.dp * c.fsdp != sc.cluster.gpus {
        out.push(format!("dp*fsdp = {} != {} GPUs", c.dp * c.fsdp, sc.cluster.gpus));
    }
    if c.fsdp % c.cp() != 0 {
        out.push(format!("cp = {} does not divide fsdp = {}", c.cp(), c.fsdp));
    }
    out
}

/// Per-step communication of a structurally valid layout.
pub fn comm_time(sc: &Scenario, c: &ParallelConfig) -> Result<CommBreakdown> {
    sc.validate()?;
    let errs = structure_errors(sc, c);
    if !errs.is_empty() {
        return Err(invalid("parallel config", errs.join("; ")));
    }
    let (shape, cl, k) = (&sc.shape, &sc.cluster, &sc.comm);
    let link = |size: u64| if fits_node(size, cl.gpus_per_node) { cl.intra_bw } else { cl.inter_bw };
    let layers = shape.layers as f64;
    let cp = c.cp() as f64;
    let (linear, attn) = flop_terms(shape, &sc.coeffs, Pass::ForwardBackward);
    let layer_compute = (linear + attn) / layers / cp / cl.gpu_flops;
    let layer_attn = attn / layers / cp / cl.gpu_flops;
    // Elements of one (b, s/cp, h) activation shard.
    let shard = (shape.batch * shape.seq * shape.hidden) as f64 / cp;

    let u = c.ulysses as f64;
    let ulysses_layer = k.ulysses_alltoalls * k.elem_bytes * shard * (u - 1.0) / u / link(c.ulysses);

    // Each hop moves one K and one V block; the ring spans the whole CP block.
    let r = c.ring as f64;
    let ring_layer = k.ring_passes * (r - 1.0) * 2.0 * k.elem_bytes * shard / link(c.cp());

    let f = c.fsdp as f64;
    let layer_params = (sc.coeffs.params_per_h2 * shape.hidden * shape.hidden) as f64;
    let fsdp_layer = k.fsdp_passes * k.elem_bytes * layer_params * (f - 1.0) / f / link(c.fsdp);
    let hide = k.fsdp_overlap * layer_compute;

    // One all-reduce of the local parameter shard per step across replicas.
    let d = c.dp as f64;
    let dp_raw = 2.0 * k.elem_bytes * param_count(shape, &sc.coeffs) / f * (d - 1.0) / d / link(cl.gpus);

    Ok(CommBreakdown {
        ulysses_s: layers * ulysses_layer,
        ring_raw_s: layers * ring_layer,
        ring_s: layers * (ring_layer - layer_attn).max(0.0),
        fsdp_raw_s: layers * fsdp_layer,
        fsdp_s: layers * (fsdp_layer - hide).max(0.0),
        dp_raw_s: dp_raw,
        dp_s: (dp_raw - hide).max(0.0),
    })
}

/// Per-GPU activation and parameter-state bytes.
fn memory(sc: &Scenario, c: &ParallelConfig) -> (f64, f64) {
    let act = activation_memory(&sc.shape, sc.coeffs.gamma) / c.cp() as f64;
    let state = sc.coeffs.state_bytes_per_param * param_count(&sc.shape, &sc.coeffs) / c.fsdp as f64;
    (act, state)
}

fn gb(x: f64) -> String {
    format!("{:.1} GB", x / 1e9)
}

pub fn feasible(sc: &Scenario, c: &ParallelConfig) -> Verdict {
    let mut reasons = structure_errors(sc, c);
    let mut warnings = Vec::new();
    let degrees_ok = c.dp > 0 && c.fsdp > 0 && c.ulysses > 0 && c.ring > 0;
    if degrees_ok {
        let (act, state) = memory(sc, c);
        let cap = sc.cluster.gpu_memory;
        if act > cap {
            reasons.push(format!("activation memory {} per GPU exceeds {}", gb(act), gb(cap)));
        } else if act + state > cap {
            reasons.push(format!(
                "parameter-state memory {} on top of {} activations exceeds {}",
                gb(state),
                gb(act),
                gb(cap)
            ));
        }
        if c.ulysses > sc.cluster.gpus_per_node {
            warnings.push(format!(
                "ulysses = {} spans nodes of {} GPUs",
                c.ulysses, sc.cluster.gpus_per_node
            ));
        }
    }
    Verdict { feasible: reasons.is_empty(), reasons, warnings }
}

/// Full report for a structurally valid layout, feasible or not.
pub fn plan(sc: &Scenario, c: &ParallelConfig) -> Result<PlanReport> {
    let comm = comm_time(sc, c)?;
    let verdict = feasible(sc, c);
    let (linear, attn) = flop_terms(&sc.shape, &sc.coeffs, Pass::ForwardBackward);
    let compute_s = (linear + attn) / c.cp() as f64 / sc.cluster.gpu_flops;
    let step_s = compute_s + comm.total_s();
    let (activation_bytes, state_bytes) = memory(sc, c);
    let gbm = c.global_batch_multiple().expect("structure checked");
    Ok(PlanReport {
        config: *c,
        compute_s,
        comm,
        comm_fraction: if step_s > 0.0 { comm.total_s() / step_s } else { 0.0 },
        step_s,
        activation_bytes,
        state_bytes,
        feasible: verdict.feasible,
        reasons: verdict.reasons,
        warnings: verdict.warnings,
        global_batch_multiple: gbm,
        throughput: (gbm * sc.shape.batch) as f64 / step_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_fit() {
        assert!(fits_node(8, 8));
        assert!(fits_node(2, 8));
        assert!(!fits_node(3, 8));
        assert!(!fits_node(16, 8));
    }
}
