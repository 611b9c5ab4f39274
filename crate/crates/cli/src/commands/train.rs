//! Toy DiT training. Every batch is a pure function of `(seed, step)`, so a
//! run resumed from its checkpoints retraces the uninterrupted run exactly.

use super::contexts;
use crate::config::{parse_shape, RunConfig};
use crate::error::{CliError, CliResult, Exit};
use crate::models::{key_set, load_dit, save_dit, vae_keys, vae_or_fresh};
use rand::Rng as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use vidflow_core::checkpoint::{read_checkpoint, write_checkpoint};
use vidflow_core::conditioning::{build_guidance, build_mask, encode_condition, ConditionTask};
use vidflow_core::dit::{Dit, DitConfig};
use vidflow_core::flow::{log_line, train_step, FlowBatch, FlowSample, MixtureTarget, TimestepSampler};
use vidflow_core::vae::train::synthetic_video;
use vidflow_core::vae::Vae;
use vidflow_core::{rng, AdamW, AdamWConfig, Tensor};

const KEYS: &[&str] = &[
    "data.kind",
    "data.seed",
    "data.scale",
    "data.std",
    "data.weight",
    "data.latent_shape",
    "data.clips",
    "data.frames",
    "data.size",
    "train.steps",
    "train.batch",
    "train.lr",
    "train.schedule",
    "train.null_prob",
    "train.prompt",
    "train.threshold",
    "train.window",
    "train.log_every",
    "train.task",
    "train.resume",
    "train.stop_after",
    "latent.scale",
];
pub const OPTIM_MAGIC: &[u8; 4] = b"WOPT";
const OPTIM_VERSION: u32 = 1;

const DATA_STREAM: u64 = 0x6461;
const TIME_STREAM: u64 = 0x7469;
const CLIP_STREAM: u64 = 0x636c;

/// Clean training latents plus, for conditioned training, each clip's
/// condition latent and folded mask.
enum Data {
    Mixture(MixtureTarget),
    Clips {
        vae: Box<Vae>,
        frames: usize,
        size: usize,
        /// Distinct clips cycled through; 0 draws a fresh clip per sample.
        pool: usize,
        scale: f32,
        cache: Vec<ClipLatent>,
        task: Option<ConditionTask>,
    },
}

#[derive(Clone)]
struct ClipLatent {
    z: Tensor,
    cond: Option<(Tensor, Tensor)>,
}

/// Signs of the two mixture means, fixed by `data.seed`.
pub fn mixture_target(cfg: &RunConfig, latent: [usize; 4]) -> CliResult<MixtureTarget> {
    let scale: f32 = cfg.get_or("data.scale", 0.5)?;
    let std: f64 = cfg.get_or("data.std", 0.05)?;
    let weight: f64 = cfg.get_or("data.weight", 0.5)?;
    let mut r = rng::seeded(cfg.get_or("data.seed", 0u64)?);
    let n: usize = latent.iter().product();
    let signs: Vec<f32> = (0..n).map(|_| if r.random::<bool>() { scale } else { -scale }).collect();
    let a = Tensor::new(latent.to_vec(), signs)?;
    let b = a.scale(-1.0);
    Ok(MixtureTarget::new([a, b], std, weight)?)
}

/// Posterior mean of `clip` times `scale`, with its condition latent scaled alike.
fn clip_latent(vae: &Vae, clip: &Tensor, task: Option<&ConditionTask>, scale: f32) -> CliResult<ClipLatent> {
    let z = vae.encode_full(clip)?.mean.scale(scale);
    let cond = match task {
        None => None,
        Some(task) => {
            let (h, w) = (clip.dim(2), clip.dim(3));
            let provided = task
                .indices()
                .iter()
                .map(|&i| Ok(clip.narrow(1, i, 1)?.into_reshape(&[3, h, w])?))
                .collect::<CliResult<Vec<_>>>()?;
            let z_c = encode_condition(&build_guidance(task, &provided, h, w)?, vae)?.scale(scale);
            let s = vae.config.temporal_stride();
            let m = build_mask(task, z.dim(2), z.dim(3), s)?.folded;
            Some((z_c, m))
        }
    };
    Ok(ClipLatent { z, cond })
}

/// Multiplier from VAE latents to the DiT's working scale (`latent.scale`).
pub fn latent_scale(cfg: &RunConfig) -> CliResult<f32> {
    let s: f32 = cfg.get_or("latent.scale", 1.0)?;
    if !(s > 0.0 && s.is_finite()) {
        return Err(CliError::input(format!("latent.scale must be finite and > 0, got {s}")));
    }
    Ok(s)
}

/// The `idx`-th clip of the pool, or of the endless stream when the pool is 0.
pub fn training_clip(seed: u64, idx: u64, frames: usize, size: usize) -> Tensor {
    synthetic_video(&mut rng::seeded(rng::derive_seed(seed, CLIP_STREAM, idx)), frames, size)
}

impl Data {
    fn from_config(cfg: &RunConfig, dit: &DitConfig) -> CliResult<Self> {
        let c = dit.latent_channels;
        match cfg.text("data.kind", "mixture").as_str() {
            "mixture" => {
                if dit.cond_channels != 0 {
                    return Err(CliError::input("mixture data trains an unconditioned DiT; set dit.cond_channels=0"));
                }
                let [f, h, w] = parse_shape(cfg, "data.latent_shape", [1, 2, 2])?;
                Ok(Data::Mixture(mixture_target(cfg, [c, f, h, w])?))
            }
            "clip" => {
                let vae = vae_or_fresh(cfg)?;
                if vae.config.latent_channels != c {
                    return Err(CliError::input(format!(
                        "VAE latent channels {} differ from dit.latent_channels {c}",
                        vae.config.latent_channels
                    )));
                }
                let frames = cfg.get_or("data.frames", 5)?;
                let size = cfg.get_or("data.size", 16)?;
                let s = vae.config.temporal_stride();
                let task = match cfg.text("train.task", "none").as_str() {
                    "none" => None,
                    "i2v" => Some(ConditionTask::image_to_video(frames)?),
                    "first_last" => Some(ConditionTask::first_last(frames)?),
                    o => return Err(CliError::input(format!("train.task must be none, i2v or first_last, got {o:?}"))),
                };
                let want = if task.is_some() { c + s } else { 0 };
                if dit.cond_channels != want {
                    return Err(CliError::input(format!(
                        "train.task={} needs dit.cond_channels={want}, got {}",
                        cfg.text("train.task", "none"),
                        dit.cond_channels
                    )));
                }
                vae.config.latent_shape(&[3, frames, size, size])?;
                let pool: usize = cfg.get_or("data.clips", 0)?;
                let scale = latent_scale(cfg)?;
                let cache = (0..pool)
                    .map(|i| clip_latent(&vae, &training_clip(cfg.seed, i as u64, frames, size), task.as_ref(), scale))
                    .collect::<CliResult<Vec<_>>>()?;
                Ok(Data::Clips { vae: Box::new(vae), frames, size, pool, scale, cache, task })
            }
            o => Err(CliError::input(format!("data.kind must be mixture or clip, got {o:?}"))),
        }
    }

    fn draw(&self, seed: u64, step: u64, item: usize, r: &mut rng::Rng) -> CliResult<ClipLatent> {
        match self {
            Data::Mixture(m) => Ok(ClipLatent { z: m.sample(r), cond: None }),
            Data::Clips { vae, frames, size, pool, scale, cache, task } => {
                if *pool > 0 {
                    Ok(cache[r.random_range(0..*pool)].clone())
                } else {
                    let idx = rng::derive_seed(step, 0, item as u64);
                    clip_latent(vae, &training_clip(seed, idx, *frames, *size), task.as_ref(), *scale)
                }
            }
        }
    }
}

struct Recipe {
    steps: u64,
    batch: usize,
    lr: f64,
    null_prob: f64,
    threshold: f64,
    window: usize,
    log_every: u64,
    cosine: bool,
    /// Stop (checkpointing) before this step; models an interrupted run.
    stop_after: u64,
}

impl Recipe {
    /// Cosine decay from the peak to a tenth of it over the full budget.
    fn lr_at(&self, step: u64) -> f64 {
        if !self.cosine || self.steps <= 1 {
            return self.lr;
        }
        let p = step as f64 / (self.steps - 1) as f64;
        self.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
    }
}

fn batch_for(cfg: &RunConfig, data: &Data, rc: &Recipe, step: u64, ctx: &Tensor, null: &Tensor) -> CliResult<FlowBatch> {
    let mut r = rng::seeded(rng::derive_seed(cfg.seed, DATA_STREAM, step));
    let mut times = TimestepSampler::standard(rng::derive_seed(cfg.seed, TIME_STREAM, step));
    let mut samples = Vec::with_capacity(rc.batch);
    let mut rows = Vec::with_capacity(rc.batch);
    for i in 0..rc.batch {
        let item = data.draw(cfg.seed, step, i, &mut r)?;
        let x0 = Tensor::randn(item.z.shape(), &mut r);
        let mut s = FlowSample::new(x0, item.z, times.sample())?;
        if let Some((z_c, m)) = &item.cond {
            s.xt = Tensor::cat(&[&s.xt, z_c, m], 0)?;
        }
        samples.push(s);
        if rc.null_prob > 0.0 {
            rows.push(if r.random::<f64>() < rc.null_prob { null } else { ctx });
        }
    }
    // Without prompt dropout every item shares one context row.
    let ctx = if rows.is_empty() { ctx.clone() } else { Tensor::cat(&rows, 0)? };
    Ok(FlowBatch::from_samples(&samples, Some(ctx))?)
}

pub fn save_optimizer(path: &Path, opt: &AdamW) -> CliResult<()> {
    let (step, m, v) = opt.state();
    let names: Vec<String> = (0..m.len()).flat_map(|i| [format!("m.{i}"), format!("v.{i}")]).collect();
    let records: Vec<(&str, &Tensor)> = names
        .iter()
        .zip(m.iter().zip(v).flat_map(|(a, b)| [a, b]))
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, OPTIM_MAGIC, OPTIM_VERSION, &format!("step={step}\n"), &records)?;
    w.flush()?;
    Ok(())
}

pub fn load_optimizer(path: &Path, params: usize) -> CliResult<AdamW> {
    let f = File::open(path).map_err(|e| CliError::input(format!("optimizer state {}: {e}", path.display())))?;
    let ck = read_checkpoint(&mut BufReader::new(f), OPTIM_MAGIC)?;
    let step: u64 = vidflow_core::KvMap::parse(&ck.config)?.require("step")?;
    if ck.version != OPTIM_VERSION || ck.records.len() != 2 * params {
        return Err(CliError::input(format!("{}: optimizer state does not match the model", path.display())));
    }
    let (mut m, mut v) = (Vec::with_capacity(params), Vec::with_capacity(params));
    for (i, (_, t)) in ck.records.into_iter().enumerate() {
        if i % 2 == 0 { m.push(t) } else { v.push(t) }
    }
    Ok(AdamW::from_state(AdamWConfig::default(), step, m, v))
}

/// Mean of the last `window` losses.
pub fn final_loss(losses: &[f64], window: usize) -> f64 {
    let tail = &losses[losses.len().saturating_sub(window.max(1))..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

fn parse_log(text: &str) -> Vec<f64> {
    text.lines()
        .filter_map(|l| l.split_whitespace().find_map(|f| f.strip_prefix("loss=")))
        .filter_map(|v| v.parse().ok())
        .collect()
}

pub fn run(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<Exit> {
    cfg.check_keys("train-toy", &key_set(&[KEYS, DitConfig::KEYS], vae_keys()))?;
    let rc = Recipe {
        steps: cfg.get_or("train.steps", 2000)?,
        batch: super::at_least(cfg, "train.batch", 64, 1)?,
        lr: cfg.get_or("train.lr", 2e-3)?,
        null_prob: cfg.get_or("train.null_prob", 0.0)?,
        threshold: cfg.get_or("train.threshold", 0.1)?,
        window: super::at_least(cfg, "train.window", 50, 1)?,
        log_every: cfg.get_or("train.log_every", 100)?,
        cosine: match cfg.text("train.schedule", "cosine").as_str() {
            "cosine" => true,
            "constant" => false,
            o => return Err(CliError::input(format!("train.schedule must be cosine or constant, got {o:?}"))),
        },
        stop_after: 0,
    };
    let rc = Recipe { stop_after: cfg.get_or("train.stop_after", rc.steps)?.min(rc.steps), ..rc };
    if !(rc.lr >= 0.0 && rc.lr.is_finite()) || !(0.0..=1.0).contains(&rc.null_prob) {
        return Err(CliError::input("train.lr must be finite and >= 0, train.null_prob in [0, 1]"));
    }
    let resume: bool = cfg.get_or("train.resume", false)?;
    let (ckpt, optim, log) = (cfg.out_path("dit.ckpt"), cfg.out_path("optim.ckpt"), cfg.out_path("loss.log"));
    let (mut dit, mut opt, mut losses) = if resume {
        let dit = load_dit(&ckpt)?;
        let opt = load_optimizer(&optim, dit.params.len())?;
        let losses = parse_log(&std::fs::read_to_string(&log)?);
        if losses.len() as u64 != opt.steps_taken() {
            return Err(CliError::input("loss.log and optimizer state disagree on the step count"));
        }
        (dit, opt, losses)
    } else {
        let dit = Dit::new(DitConfig::from_kv(&cfg.kv)?, cfg.seed)?;
        let opt = AdamW::new(&dit.params, AdamWConfig::default());
        (dit, opt, Vec::new())
    };
    if resume && dit.config != DitConfig::from_kv(&cfg.kv)? {
        return Err(CliError::input("checkpoint architecture differs from the dit.* configuration"));
    }
    let data = Data::from_config(cfg, &dit.config)?;
    let (ctx, null) = contexts(cfg, "train.prompt", dit.config.text_dim);
    cfg.write_effective()?;

    let mut log_text = String::new();
    for l in std::fs::read_to_string(&log).ok().filter(|_| resume).iter().flat_map(|t| t.lines()) {
        log_text.push_str(l);
        log_text.push('\n');
    }
    let start = opt.steps_taken();
    let mut result = Ok(());
    for step in start..rc.stop_after {
        let batch = batch_for(cfg, &data, &rc, step, &ctx, &null)?;
        match train_step(&mut dit, &mut opt, &batch, rc.lr_at(step)) {
            Ok(s) => {
                let line = log_line(&s);
                if rc.log_every > 0 && (step % rc.log_every == 0 || step + 1 == rc.steps) {
                    writeln!(out, "{line}")?;
                }
                log_text.push_str(&line);
                log_text.push('\n');
                losses.push(s.loss);
            }
            Err(e) => {
                result = Err(e);
                break;
            }
        }
    }
    std::fs::write(&log, &log_text)?;
    if let Err(e) = result {
        writeln!(out, "diverged: {e}")?;
        return Err(e.into());
    }
    save_dit(&ckpt, &dit)?;
    save_optimizer(&optim, &opt)?;
    let last = final_loss(&losses, rc.window);
    let ok = !losses.is_empty() && last < rc.threshold;
    writeln!(
        out,
        "steps={} final_loss={last:.6} threshold={} {}",
        losses.len(),
        rc.threshold,
        if ok { "PASS" } else { "FAIL" }
    )?;
    Ok(if ok { Exit::Ok } else { Exit::NotMet })
}

