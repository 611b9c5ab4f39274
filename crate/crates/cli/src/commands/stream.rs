use super::contexts;
use crate::config::{parse_shape, RunConfig};
use crate::error::{CliError, CliResult, Exit};
use crate::models::{dit_or_fresh, key_set, write_tensor};
use vidflow_core::dit::DitConfig;
use std::io::Write;
use vidflow_core::streamer::{manifest_line, DenoiseQueue, SlotEvaluation, StreamConfig};

const KEYS: &[&str] = &[
    "checkpoint",
    "stream.window",
    "stream.emit",
    "stream.substeps",
    "stream.horizon",
    "stream.reintroduce",
    "stream.evaluation",
    "stream.token_shape",
    "stream.prompt",
];

pub fn run(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<Exit> {
    cfg.check_keys("stream", &key_set(&[KEYS, DitConfig::KEYS], vec![]))?;
    let dit = dit_or_fresh(cfg, "checkpoint")?;
    if dit.config.cond_channels != 0 {
        return Err(CliError::input("stream needs an unconditioned DiT (dit.cond_channels=0)"));
    }
    let c = dit.config.latent_channels;
    let [h, w] = parse_shape(cfg, "stream.token_shape", [2, 2])?;
    let window = super::at_least(cfg, "stream.window", 4, 1)?;
    let emit: u64 = cfg.get_or("stream.emit", 8)?;
    let mut sc = StreamConfig::new(window, [c, h, w], cfg.seed);
    sc.substeps = super::at_least(cfg, "stream.substeps", 1, 1)?;
    sc.context_horizon = cfg.get_or("stream.horizon", 0)?;
    sc.reintroduce_emitted = cfg.get_or("stream.reintroduce", sc.context_horizon > 0)?;
    sc.evaluation = cfg.get_or("stream.evaluation", SlotEvaluation::Joint)?;
    let mut queue = DenoiseQueue::new(sc)?;
    let (ctx, _) = contexts(cfg, "stream.prompt", dit.config.text_dim);
    cfg.write_effective()?;

    let tokens = cfg.out_path("tokens");
    std::fs::create_dir_all(&tokens)?;
    let mut manifest = String::new();
    let mut emitted = 0u64;
    let mut discarded = 0u64;
    while emitted < emit {
        match queue.step(&dit, Some(&ctx))? {
            Some(slot) => {
                let name = format!("tokens/token_{:05}.wvt", slot.index);
                write_tensor(&cfg.out_path(&name), &slot.token)?;
                manifest.push_str(&manifest_line(queue.steps_taken(), &name, &queue.level_histogram()));
                manifest.push('\n');
                emitted += 1;
            }
            None => discarded += 1,
        }
    }
    std::fs::write(cfg.out_path("manifest.txt"), &manifest)?;
    writeln!(
        out,
        "window={window} steps={} warmup_discarded={discarded} emitted={emitted} manifest=manifest.txt",
        queue.steps_taken()
    )?;
    Ok(Exit::Ok)
}
