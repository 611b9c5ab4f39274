use super::contexts;
use crate::config::{parse_shape, RunConfig};
use crate::error::{CliError, CliResult, Exit};
use crate::models::{load_dit, load_vae, write_tensor, Conditioned};
use crate::ppm;
use super::train::latent_scale;
use std::io::Write;
use vidflow_core::conditioning::{build_guidance, build_mask, encode_condition, TaskFile};
use vidflow_core::flow::{euler_sample, GuidanceConfig, VelocityField};
use vidflow_core::dit::Dit;
use vidflow_core::vae::Vae;
use vidflow_core::{rng, Tensor};

const KEYS: &[&str] = &[
    "checkpoint",
    "vae.checkpoint",
    "latent.scale",
    "gen.steps",
    "gen.guidance",
    "gen.samples",
    "gen.latent_shape",
    "gen.task",
    "gen.prompt",
];
const SAMPLE_STREAM: u64 = 0x6765;

enum Field<'a> {
    Plain(&'a Dit),
    Conditioned(Conditioned<'a>),
}

impl VelocityField for Field<'_> {
    fn velocity(&self, x: &Tensor, t: f64, ctx: Option<&Tensor>) -> vidflow_core::Result<Tensor> {
        match self {
            Field::Plain(d) => d.velocity(x, t, ctx),
            Field::Conditioned(c) => c.velocity(x, t, ctx),
        }
    }
}

/// Condition latent and folded mask for a task file, plus its latent grid.
fn task_condition(task: &TaskFile, vae: &Vae, scale: f32) -> CliResult<(Tensor, Tensor, [usize; 4])> {
    let frames = task.read_frames()?;
    let (h, w) = (frames[0].dim(1), frames[0].dim(2));
    let video = [3, task.task.frames(), h, w];
    let latent = vae.config.latent_shape(&video)?;
    let z_c = encode_condition(&build_guidance(&task.task, &frames, h, w)?, vae)?.scale(scale);
    let mask = build_mask(&task.task, latent[2], latent[3], vae.config.temporal_stride())?.folded;
    Ok((z_c, mask, latent))
}

pub fn run(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<Exit> {
    cfg.check_keys("generate", KEYS)?;
    let ckpt = cfg.path("checkpoint").ok_or_else(|| CliError::input("generate needs checkpoint=<path to a WDIT file>"))?;
    let dit = load_dit(&ckpt)?;
    let vae = cfg.path("vae.checkpoint").map(|p| load_vae(&p)).transpose()?;
    let steps = super::at_least(cfg, "gen.steps", 50, 1)?;
    let scale: f64 = cfg.get_or("gen.guidance", 1.0)?;
    let n = super::at_least(cfg, "gen.samples", 1, 1)?;
    let c = dit.config.latent_channels;
    let zscale = latent_scale(cfg)?;

    let task = cfg.path("gen.task").map(|p| TaskFile::load(&p)).transpose()?;
    let (field, latent) = match &task {
        Some(t) => {
            let vae = vae.as_ref().ok_or_else(|| CliError::input("gen.task needs vae.checkpoint to encode its frames"))?;
            let (z_c, mask, latent) = task_condition(t, vae, zscale)?;
            let want = c + vae.config.temporal_stride();
            if dit.config.cond_channels != want || latent[0] != c {
                return Err(CliError::input(format!(
                    "a {} task needs a DiT with {want} condition channels and {} latent channels",
                    t.task.kind(),
                    latent[0]
                )));
            }
            (Field::Conditioned(Conditioned { dit: &dit, z_c, mask }), latent)
        }
        None => {
            if dit.config.cond_channels != 0 {
                return Err(CliError::input("this DiT expects condition channels; pass gen.task"));
            }
            let [f, h, w] = parse_shape(cfg, "gen.latent_shape", [1, 2, 2])?;
            (Field::Plain(&dit), [c, f, h, w])
        }
    };
    let (ctx, null) = contexts(cfg, "gen.prompt", dit.config.text_dim);
    let guidance = (scale != 1.0).then(|| GuidanceConfig::new(scale, null)).transpose()?;
    cfg.write_effective()?;

    let shape = [1, latent[0], latent[1], latent[2], latent[3]];
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let seed = rng::derive_seed(cfg.seed, SAMPLE_STREAM, i as u64);
        let x = euler_sample(&field, Some(&ctx), steps, guidance.as_ref(), &shape, seed)?;
        // Samples live at the DiT's scale; files hold VAE-space latents.
        let x = x.into_reshape(&latent)?.scale(1.0 / zscale);
        if !x.all_finite() {
            return Err(vidflow_core::Error::NonFinite { step: steps, value: f64::NAN }.into());
        }
        writeln!(out, "sample={i} latent={latent:?} mean={:.6} abs_max={:.6}", x.mean(), x.abs_max())?;
        samples.push(x);
    }
    let stacked = Tensor::stack(&samples.iter().collect::<Vec<_>>())?;
    write_tensor(&cfg.out_path("latents.wvt"), &stacked)?;
    writeln!(out, "wrote latents.wvt shape={:?}", stacked.shape())?;
    if let Some(vae) = &vae {
        for (i, z) in samples.iter().enumerate() {
            let video = vae.decode_full(z)?;
            write_tensor(&cfg.out_path(format!("sample{i}.wvt")), &video)?;
            let names = ppm::write_video(&cfg.out, &format!("sample{i}"), &video)?;
            writeln!(out, "sample={i} frames={} files=sample{i}.wvt,sample{i}_*.ppm", names.len())?;
        }
    }
    Ok(Exit::Ok)
}
