use super::contexts;
use crate::config::{parse_shape, RunConfig};
use crate::error::{CliResult, Exit};
use crate::models::{dit_or_fresh, key_set};
use std::io::Write;
use vidflow_core::cache::{
    cached_euler_integrate, dit_forward_ops, op_savings, relative_error, CacheSchedule, StepOps, DEFAULT_HEAD,
    DEFAULT_TAIL,
};
use vidflow_core::dit::DitConfig;
use vidflow_core::flow::GuidanceConfig;
use vidflow_core::rng;

const KEYS: &[&str] = &[
    "checkpoint",
    "bench.steps",
    "bench.guidance",
    "bench.head",
    "bench.tail",
    "bench.k_attn",
    "bench.k_cfg",
    "bench.latent_shape",
    "bench.prompt",
];
const NOISE_STREAM: u64 = 0x6263;

pub fn run(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<Exit> {
    cfg.check_keys("cache-bench", &key_set(&[KEYS, DitConfig::KEYS], vec![]))?;
    let dit = dit_or_fresh(cfg, "checkpoint")?;
    let c = dit.config.latent_channels;
    let steps = super::at_least(cfg, "bench.steps", 50, 1)?;
    let scale: f64 = cfg.get_or("bench.guidance", 4.0)?;
    let [f, h, w] = parse_shape(cfg, "bench.latent_shape", [2, 4, 4])?;
    let head = cfg.get_or("bench.head", DEFAULT_HEAD)?;
    let tail = cfg.get_or("bench.tail", DEFAULT_TAIL)?;
    let k_attn: Vec<usize> = cfg.list_or("bench.k_attn", vec![1, 2, 4])?;
    let k_cfg: Vec<usize> = cfg.list_or("bench.k_cfg", vec![1, 2, 4])?;
    let (ctx, null) = contexts(cfg, "bench.prompt", dit.config.text_dim);
    let guidance = GuidanceConfig::new(scale, null)?;
    let schedules = k_attn
        .iter()
        .flat_map(|&ka| k_cfg.iter().map(move |&kc| (ka, kc)))
        .map(|(ka, kc)| CacheSchedule::new(steps, ka, kc, head, tail))
        .collect::<vidflow_core::Result<Vec<_>>>()?;
    cfg.write_effective()?;

    let x0 = rng::noise(cfg.seed, NOISE_STREAM, 0, &[1, c, f, h, w]);
    let reference = cached_euler_integrate(&dit, x0.clone(), Some(&ctx), Some(&guidance), &CacheSchedule::disabled(steps)?)?;
    let (attn, other) = dit_forward_ops(&dit.config, f, h, w, ctx.dim(1));
    let guided = scale != 1.0;
    let ops = StepOps {
        cond_attn: attn,
        cond_other: other,
        uncond_attn: if guided { attn } else { 0.0 },
        uncond_other: if guided { other } else { 0.0 },
    };
    writeln!(out, "steps={steps} guidance={scale} head={head} tail={tail} latent={c}x{f}x{h}x{w}")?;
    writeln!(out, "k_attn k_cfg  rel_error op_ratio")?;
    for s in &schedules {
        let run = cached_euler_integrate(&dit, x0.clone(), Some(&ctx), Some(&guidance), s)?;
        let err = relative_error(&run.sample, &reference.sample)?;
        writeln!(out, "{:>6} {:>5} {:>10.3e} {:>8.4}", s.k_attn, s.k_cfg, err, op_savings(s, &ops))?;
    }
    Ok(Exit::Ok)
}
