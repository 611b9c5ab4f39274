//! Desk-scale training recipe: fit the per-image model, inflate it, then
//! fine-tune the causal video model on short clips.

use super::{inflate_2d_to_3d, vae_loss_graph, Vae, VaeConfig};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::params::{AdamW, AdamWConfig};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeTrainConfig {
    pub image_steps: usize,
    pub video_steps: usize,
    /// Peak learning rate; each stage decays it to zero on a cosine.
    pub lr: f64,
    pub batch: usize,
    /// Clip length `1 + T` used in the video stage.
    pub frames: usize,
    pub size: usize,
    /// Reparameterized posterior samples during training (otherwise the mean).
    pub sample_posterior: bool,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            image_steps: 1500,
            video_steps: 500,
            lr: 1e-4,
            batch: 4,
            frames: 5,
            size: 16,
            sample_posterior: true,
            seed: 0,
        }
    }
}

/// Smooth synthetic clip in `[-1, 1]`: a colored linear gradient drifting over time.
pub fn synthetic_video<R: Rng + ?Sized>(rng: &mut R, frames: usize, size: usize) -> Tensor {
    let base: Vec<f32> = (0..3).map(|_| rng.random_range(-0.6..0.6)).collect();
    let gx: Vec<f32> = (0..3).map(|_| rng.random_range(-0.4..0.4)).collect();
    let gy: Vec<f32> = (0..3).map(|_| rng.random_range(-0.4..0.4)).collect();
    let vx: f32 = rng.random_range(-0.1..0.1);
    let vy: f32 = rng.random_range(-0.1..0.1);
    let s = size as f32;
    Tensor::from_fn(&[3, frames, size, size], |i| {
        let x = (i % size) as f32 / s - 0.5;
        let y = ((i / size) % size) as f32 / s - 0.5;
        let t = ((i / (size * size)) % frames) as f32;
        let c = i / (size * size * frames);
        (base[c] + gx[c] * (x - vx * t) + gy[c] * (y - vy * t)).clamp(-1.0, 1.0)
    })
}

pub fn constant_video(color: [f32; 3], frames: usize, size: usize) -> Tensor {
    Tensor::from_fn(&[3, frames, size, size], |i| color[i / (size * size * frames)])
}

/// One optimizer step on a batch of videos; returns the mean loss.
pub fn train_step(
    vae: &mut Vae,
    opt: &mut AdamW,
    batch: &[Tensor],
    lr: f64,
    sample_seed: Option<u64>,
) -> Result<f64> {
    let mut total: Option<Vec<(crate::params::ParamId, Tensor)>> = None;
    let mut loss_sum = 0.0;
    for (bi, video) in batch.iter().enumerate() {
        let mut g = Graph::new();
        let x = g.input(video.clone());
        let (mean, logvar) = vae.encode_graph(&mut g, &vae.params, x)?;
        let z = match sample_seed {
            Some(seed) => {
                let eps = g.input(Tensor::randn(
                    g.shape(mean),
                    &mut rng::seeded(rng::derive_seed(seed, 1, bi as u64)),
                ));
                let half = g.scale(logvar, 0.5);
                let std = g.exp(half);
                let noise = g.mul(std, eps)?;
                g.add(mean, noise)?
            }
            None => mean,
        };
        let recon = vae.decode_graph(&mut g, &vae.params, z)?;
        let loss = vae_loss_graph(&mut g, recon, x, mean, logvar)?;
        let lv = g.value(loss).data()[0] as f64;
        if !lv.is_finite() {
            return Err(Error::NonFinite {
                step: opt.steps_taken() as usize,
                value: lv,
            });
        }
        loss_sum += lv;
        let mut grads = g.backward(loss)?;
        let pg = g.param_grads(&mut grads);
        match total.as_mut() {
            None => total = Some(pg),
            Some(acc) => {
                for ((_, a), (_, b)) in acc.iter_mut().zip(&pg) {
                    a.add_assign(b)?;
                }
            }
        }
    }
    let n = batch.len() as f32;
    let grads: Vec<_> = total
        .unwrap_or_default()
        .into_iter()
        .map(|(id, g)| (id, g.scale(1.0 / n)))
        .collect();
    opt.step(&mut vae.params, &grads, lr)?;
    Ok(loss_sum / batch.len() as f64)
}

/// Mean absolute reconstruction error through the posterior mean.
pub fn mean_l1(vae: &Vae, videos: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    for v in videos {
        let p = vae.encode_full(v)?;
        let r = vae.decode_full(&p.mean)?;
        total += r.sub(v)?.data().iter().map(|x| x.abs() as f64).sum::<f64>() / v.numel() as f64;
    }
    Ok(total / videos.len() as f64)
}

pub struct RecipeReport {
    pub image_losses: Vec<f64>,
    pub video_losses: Vec<f64>,
}

pub fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    peak * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos())
}

/// Image stage, inflation, then video stage.
pub fn toy_recipe(config: &VaeConfig, tc: &VaeTrainConfig) -> Result<(Vae, RecipeReport)> {
    let mut data_rng = rng::seeded(rng::derive_seed(tc.seed, 7, 0));
    let mut image = Vae::new(config.image_counterpart(), tc.seed)?;
    let mut opt = AdamW::new(&image.params, AdamWConfig { weight_decay: 0.0, ..Default::default() });
    let mut image_losses = Vec::with_capacity(tc.image_steps);
    for step in 0..tc.image_steps {
        let batch: Vec<Tensor> = (0..tc.batch)
            .map(|_| synthetic_video(&mut data_rng, 1, tc.size))
            .collect();
        let seed = tc.sample_posterior.then(|| rng::derive_seed(tc.seed, 2, step as u64));
        let lr = cosine_lr(tc.lr, step, tc.image_steps);
        image_losses.push(train_step(&mut image, &mut opt, &batch, lr, seed)?);
    }

    let mut video = inflate_2d_to_3d(&image, config)?;
    let mut opt = AdamW::new(&video.params, AdamWConfig { weight_decay: 0.0, ..Default::default() });
    let mut video_losses = Vec::with_capacity(tc.video_steps);
    for step in 0..tc.video_steps {
        let batch: Vec<Tensor> = (0..tc.batch)
            .map(|_| synthetic_video(&mut data_rng, tc.frames, tc.size))
            .collect();
        let seed = tc.sample_posterior.then(|| rng::derive_seed(tc.seed, 3, step as u64));
        let lr = cosine_lr(tc.lr, step, tc.video_steps);
        video_losses.push(train_step(&mut video, &mut opt, &batch, lr, seed)?);
    }
    Ok((
        video,
        RecipeReport {
            image_losses,
            video_losses,
        },
    ))
}
