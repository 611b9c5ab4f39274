use crate::config::RunConfig;
use crate::error::{CliError, CliResult, Exit};
use std::io::Write;
use vidflow_planner::{
    plan, search, ClusterSpec, CommCoeffs, CostCoeffs, ModelShape, Objective, ParallelConfig, PlanReport,
    Scenario,
};

const KEYS: &[&str] = &[
    "model.layers",
    "model.batch",
    "model.seq",
    "model.hidden",
    "coeffs.alpha_fwd",
    "coeffs.beta_fwd",
    "coeffs.beta_bwd",
    "coeffs.gamma",
    "coeffs.params_per_h2",
    "coeffs.state_bytes_per_param",
    "comm.elem_bytes",
    "comm.ulysses_alltoalls",
    "comm.ring_passes",
    "comm.fsdp_passes",
    "comm.fsdp_overlap",
    "cluster.gpus",
    "cluster.gpus_per_node",
    "cluster.intra_bw",
    "cluster.inter_bw",
    "cluster.gpu_memory",
    "cluster.host_bw",
    "cluster.gpu_flops",
    "cluster.host_memory",
    "plan.objective",
    "plan.top",
    "plan.layout",
    "plan.json",
];

pub fn scenario(cfg: &RunConfig) -> CliResult<Scenario> {
    let shape = ModelShape {
        layers: cfg.get_or("model.layers", 40)?,
        batch: cfg.get_or("model.batch", 1)?,
        seq: cfg.get_or("model.seq", 75_600)?,
        hidden: cfg.get_or("model.hidden", 5120)?,
    };
    let d = CostCoeffs::default();
    let coeffs = CostCoeffs {
        alpha_fwd: cfg.get_or("coeffs.alpha_fwd", d.alpha_fwd)?,
        beta_fwd: cfg.get_or("coeffs.beta_fwd", d.beta_fwd)?,
        beta_bwd: cfg.get_or("coeffs.beta_bwd", d.beta_bwd)?,
        gamma: cfg.get_or("coeffs.gamma", d.gamma)?,
        params_per_h2: cfg.get_or("coeffs.params_per_h2", d.params_per_h2)?,
        state_bytes_per_param: cfg.get_or("coeffs.state_bytes_per_param", d.state_bytes_per_param)?,
    };
    let d = CommCoeffs::default();
    let comm = CommCoeffs {
        elem_bytes: cfg.get_or("comm.elem_bytes", d.elem_bytes)?,
        ulysses_alltoalls: cfg.get_or("comm.ulysses_alltoalls", d.ulysses_alltoalls)?,
        ring_passes: cfg.get_or("comm.ring_passes", d.ring_passes)?,
        fsdp_passes: cfg.get_or("comm.fsdp_passes", d.fsdp_passes)?,
        fsdp_overlap: cfg.get_or("comm.fsdp_overlap", d.fsdp_overlap)?,
    };
    let gpus = cfg.get_or("cluster.gpus", 8)?;
    let d = ClusterSpec::new(gpus, cfg.get_or("cluster.gpus_per_node", gpus.min(8))?);
    let cluster = ClusterSpec {
        intra_bw: cfg.get_or("cluster.intra_bw", d.intra_bw)?,
        inter_bw: cfg.get_or("cluster.inter_bw", d.inter_bw)?,
        gpu_memory: cfg.get_or("cluster.gpu_memory", d.gpu_memory)?,
        host_bw: cfg.get_or("cluster.host_bw", d.host_bw)?,
        gpu_flops: cfg.get_or("cluster.gpu_flops", d.gpu_flops)?,
        host_memory: cfg.get_or("cluster.host_memory", d.host_memory)?,
        ..d
    };
    let sc = Scenario { shape, coeffs, comm, cluster };
    sc.validate()?;
    Ok(sc)
}

pub fn row(rank: usize, r: &PlanReport) -> String {
    format!(
        "{rank:>4} {:>4} {:>5} {:>7} {:>4} {:>10.4} {:>9.4} {:>8.2} {:>7}",
        r.config.dp,
        r.config.fsdp,
        r.config.ulysses,
        r.config.ring,
        r.step_s,
        r.comm_fraction,
        r.activation_bytes / 1e9,
        r.global_batch_multiple
    )
}

pub const HEADER: &str = "rank   dp  fsdp ulysses ring     step_s comm_frac   act_GB batch_x";

pub fn run(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<Exit> {
    cfg.check_keys("plan", KEYS)?;
    let sc = scenario(cfg)?;
    let objective: Objective = cfg.text("plan.objective", "min_step_time").parse()?;
    let top: usize = cfg.get_or("plan.top", 10)?;
    let focus = match cfg.list_or::<u64>("plan.layout", vec![])? {
        v if v.is_empty() => None,
        v if v.len() == 4 => Some(ParallelConfig::new(v[0], v[1], v[2], v[3])),
        v => return Err(CliError::input(format!("plan.layout: expected dp,fsdp,ulysses,ring, got {} values", v.len()))),
    };
    cfg.write_effective()?;
    let ranked = search(&sc, objective)?;
    writeln!(out, "objective={objective} gpus={} feasible={}", sc.cluster.gpus, ranked.len())?;
    writeln!(out, "{HEADER}")?;
    let shown = if top == 0 { ranked.len() } else { top.min(ranked.len()) };
    for (i, r) in ranked.iter().take(shown).enumerate() {
        writeln!(out, "{}", row(i + 1, r))?;
    }
    if let Some(c) = focus {
        let r = plan(&sc, &c)?;
        writeln!(
            out,
            "layout {c} feasible={} global_batch={}x step_s={:.4} comm_frac={:.4} act_GB={:.2} state_GB={:.2}",
            r.feasible,
            r.global_batch_multiple,
            r.step_s,
            r.comm_fraction,
            r.activation_bytes / 1e9,
            r.state_bytes / 1e9
        )?;
        for w in r.reasons.iter().chain(&r.warnings) {
            writeln!(out, "  note: {w}")?;
        }
    }
    if cfg.get_or("plan.json", true)? {
        let json = serde_json::json!({ "scenario": sc, "objective": objective, "ranked": ranked });
        let text = serde_json::to_string_pretty(&json).map_err(|e| CliError::input(e.to_string()))?;
        std::fs::write(cfg.out_path("plan.json"), text + "\n")?;
    }
    Ok(Exit::Ok)
}
