//! Causal 3D video autoencoder.
//!
//! Videos are `(3, 1 + T, H, W)`; latents are `(c, 1 + T/s, H/p, W/p)` with
//! temporal stride `s` and spatial stride `p`. The first frame is compressed
//! only spatially, which is what lets a single image share the video model.

mod inflate;
mod layers;
mod stream;
pub mod train;

pub use inflate::inflate_2d_to_3d;
pub use layers::SlotKind;
pub use stream::{ChunkStreamState, StreamDirection};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::error::{ensure, Error, Result};
use crate::kv::{join_list, KvMap};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use layers::{Decoder, Encoder, Pass};
use std::io::{Read, Write};

pub const VAE_MAGIC: &[u8; 4] = b"WVAE";
pub const VAE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub in_channels: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
    /// Channel multiplier per resolution level; one more entry than stages.
    pub channel_mult: Vec<usize>,
    /// Whether each spatial down stage also halves time; the count of `true`
    /// entries fixes the temporal stride.
    pub temporal_downsample: Vec<bool>,
    /// Temporal kernel of the causal convolutions (1 gives a per-frame image model).
    pub temporal_kernel: usize,
    pub res_blocks: usize,
    pub decoder_upsample_channel_halving: bool,
    pub norm_eps: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl VaeConfig {
    /// Desk-scale model: 4x temporal and 4x spatial compression.
    pub fn toy() -> Self {
        Self {
            in_channels: 3,
            latent_channels: 16,
            base_channels: 8,
            channel_mult: vec![1, 2, 2],
            temporal_downsample: vec![true, true],
            temporal_kernel: 3,
            res_blocks: 1,
            decoder_upsample_channel_halving: true,
            norm_eps: 1e-6,
        }
    }

    /// Full 4x8x8 layout (three down stages, time halved in the last two).
    pub fn full_layout(base_channels: usize) -> Self {
        Self {
            in_channels: 3,
            latent_channels: 16,
            base_channels,
            channel_mult: vec![1, 2, 4, 4],
            temporal_downsample: vec![false, true, true],
            temporal_kernel: 3,
            res_blocks: 2,
            decoder_upsample_channel_halving: true,
            norm_eps: 1e-6,
        }
    }

    /// Same layout with no temporal extent: the per-image model that seeds inflation.
    pub fn image_counterpart(&self) -> Self {
        Self {
            temporal_downsample: vec![false; self.temporal_downsample.len()],
            temporal_kernel: 1,
            ..self.clone()
        }
    }

    pub fn num_down_stages(&self) -> usize {
        self.temporal_downsample.len()
    }

    pub fn temporal_stride(&self) -> usize {
        1 << self.temporal_downsample.iter().filter(|&&t| t).count()
    }

    pub fn spatial_stride(&self) -> usize {
        1 << self.num_down_stages()
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.channel_mult.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let op = "VaeConfig";
        ensure!(self.latent_channels >= 1, Error::invalid(op, "latent_channels must be >= 1"));
        ensure!(self.in_channels >= 1, Error::invalid(op, "in_channels must be >= 1"));
        ensure!(self.base_channels >= 1, Error::invalid(op, "base_channels must be >= 1"));
        ensure!(
            self.channel_mult.len() == self.num_down_stages() + 1,
            Error::invalid(op, "channel_mult needs one entry per level (stages + 1)")
        );
        ensure!(
            self.channel_mult.iter().all(|&m| m >= 1),
            Error::invalid(op, "channel multipliers must be >= 1")
        );
        ensure!(
            self.temporal_kernel >= 1 && self.temporal_kernel % 2 == 1,
            Error::invalid(op, "temporal_kernel must be odd and >= 1")
        );
        ensure!(
            self.temporal_kernel > 1 || self.temporal_stride() == 1,
            Error::invalid(op, "temporal downsampling needs a temporal kernel > 1")
        );
        ensure!(self.res_blocks >= 1, Error::invalid(op, "res_blocks must be >= 1"));
        if self.decoder_upsample_channel_halving {
            ensure!(
                self.stage_channels()[1..].iter().all(|c| c % 2 == 0),
                Error::invalid(op, "channel halving needs even channel counts")
            );
        }
        ensure!(self.norm_eps > 0.0, Error::invalid(op, "norm_eps must be > 0"));
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("in_channels", self.in_channels);
        m.set("latent_channels", self.latent_channels);
        m.set("base_channels", self.base_channels);
        m.set("channel_mult", join_list(&self.channel_mult));
        m.set("temporal_downsample", join_list(&self.temporal_downsample));
        m.set("temporal_kernel", self.temporal_kernel);
        m.set("res_blocks", self.res_blocks);
        m.set("decoder_upsample_channel_halving", self.decoder_upsample_channel_halving);
        m.set("norm_eps", self.norm_eps);
        m
    }

    /// Missing keys fall back to the toy defaults.
    /// Every key `from_kv` reads, relative to the section.
    pub const KEYS: &'static [&'static str] = &[
        "in_channels",
        "latent_channels",
        "base_channels",
        "channel_mult",
        "temporal_downsample",
        "temporal_kernel",
        "res_blocks",
        "decoder_upsample_channel_halving",
        "norm_eps",
    ];

    pub fn from_kv(m: &KvMap) -> Result<Self> {
        let d = Self::toy();
        let c = Self {
            in_channels: m.get_or("in_channels", d.in_channels)?,
            latent_channels: m.get_or("latent_channels", d.latent_channels)?,
            base_channels: m.get_or("base_channels", d.base_channels)?,
            channel_mult: m.get_list("channel_mult")?.unwrap_or(d.channel_mult),
            temporal_downsample: m.get_list("temporal_downsample")?.unwrap_or(d.temporal_downsample),
            temporal_kernel: m.get_or("temporal_kernel", d.temporal_kernel)?,
            res_blocks: m.get_or("res_blocks", d.res_blocks)?,
            decoder_upsample_channel_halving: m
                .get_or("decoder_upsample_channel_halving", d.decoder_upsample_channel_halving)?,
            norm_eps: m.get_or("norm_eps", d.norm_eps)?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Latent shape for a video shape, validating the divisibility contract.
    pub fn latent_shape(&self, video: &[usize]) -> Result<[usize; 4]> {
        ensure!(video.len() == 4, Error::shape("encode", "rank", 4, video.len()));
        ensure!(
            video[0] == self.in_channels,
            Error::shape("encode", "axis 0 (channels)", self.in_channels, video[0])
        );
        let s = self.temporal_stride();
        ensure!(
            (video[1] - 1) % s == 0,
            Error::shape("encode", "axis 1 (frames)", format!("1 + multiple of {s}"), video[1])
        );
        let p = self.spatial_stride();
        ensure!(
            video[2] % p == 0,
            Error::shape("encode", "axis 2 (height)", format!("multiple of {p}"), video[2])
        );
        ensure!(
            video[3] % p == 0,
            Error::shape("encode", "axis 3 (width)", format!("multiple of {p}"), video[3])
        );
        Ok([self.latent_channels, 1 + (video[1] - 1) / s, video[2] / p, video[3] / p])
    }

    pub fn video_shape(&self, latent: &[usize]) -> Result<[usize; 4]> {
        ensure!(latent.len() == 4, Error::shape("decode", "rank", 4, latent.len()));
        ensure!(
            latent[0] == self.latent_channels,
            Error::shape("decode", "axis 0 (channels)", self.latent_channels, latent[0])
        );
        let p = self.spatial_stride();
        Ok([
            self.in_channels,
            1 + (latent[1] - 1) * self.temporal_stride(),
            latent[2] * p,
            latent[3] * p,
        ])
    }
}

/// Chunk sizes for streaming: one frame, then `s` frames per latent frame.
pub fn plan_chunks(frame_count: usize, s: usize) -> Result<Vec<usize>> {
    ensure!(s >= 1, Error::invalid("plan_chunks", "temporal stride must be >= 1"));
    ensure!(
        frame_count >= 1 && (frame_count - 1) % s == 0,
        Error::invalid(
            "plan_chunks",
            format!("frame count {frame_count} is not 1 + a multiple of {s}")
        )
    );
    let mut plan = vec![1];
    plan.extend(std::iter::repeat_n(s, (frame_count - 1) / s));
    Ok(plan)
}

/// Diagonal Gaussian posterior over latents.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior<T: Scalar = f32> {
    pub mean: Tensor<T>,
    pub logvar: Tensor<T>,
}

impl Posterior {
    /// `mean + exp(logvar / 2) * eps` with `eps` drawn from `seed`.
    pub fn sample(&self, seed: u64) -> Tensor {
        let eps: Tensor = Tensor::randn(self.mean.shape(), &mut rng::seeded(seed));
        let mut out = self.mean.clone();
        for ((o, &lv), &e) in out.data_mut().iter_mut().zip(self.logvar.data()).zip(eps.data()) {
            *o += (0.5 * lv).exp() * e;
        }
        out
    }
}

/// Encoder/decoder layout plus parameters.
#[derive(Debug, Clone)]
pub struct Vae {
    pub config: VaeConfig,
    pub params: ParamStore,
    enc: Encoder,
    dec: Decoder,
}

impl Vae {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (enc, dec) = layers::build(&config, &mut params, &mut rng::seeded(seed))?;
        Ok(Self {
            config,
            params,
            enc,
            dec,
        })
    }

    pub fn eps<T: Scalar>(&self) -> T {
        T::f(self.config.norm_eps)
    }

    /// Encoder graph; returns `(mean, logvar)` nodes.
    pub fn encode_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        video: Var,
    ) -> Result<(Var, Var)> {
        self.config.latent_shape(g.shape(video))?;
        let h = self.enc.forward(g, ps, video, &mut Pass::Full, self.eps())?;
        split_moments(g, h, self.config.latent_channels)
    }

    pub fn decode_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        latent: Var,
    ) -> Result<Var> {
        self.config.video_shape(g.shape(latent))?;
        self.dec.forward(g, ps, latent, &mut Pass::Full, self.eps())
    }

    pub fn encode_full(&self, video: &Tensor) -> Result<Posterior> {
        let mut g = Graph::inference();
        let x = g.input(video.clone());
        let (m, lv) = self.encode_graph(&mut g, &self.params, x)?;
        Ok(Posterior {
            mean: g.value(m).clone(),
            logvar: g.value(lv).clone(),
        })
    }

    pub fn decode_full(&self, latent: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let z = g.input(latent.clone());
        let y = self.decode_graph(&mut g, &self.params, z)?;
        Ok(g.value(y).clone())
    }

    pub(crate) fn encoder(&self) -> &Encoder {
        &self.enc
    }

    pub(crate) fn decoder(&self) -> &Decoder {
        &self.dec
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut kv = self.config.to_kv();
        kv.set("kl_reduction", "per_element_mean");
        let records: Vec<(&str, &Tensor)> = self.params.iter().map(|(_, n, t)| (n, t)).collect();
        write_checkpoint(w, VAE_MAGIC, VAE_VERSION, &kv.serialize(), &records)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let ck = read_checkpoint(r, VAE_MAGIC)?;
        ensure!(
            ck.version == VAE_VERSION,
            Error::Format(format!("unsupported VAE checkpoint version {}", ck.version))
        );
        let config = VaeConfig::from_kv(&KvMap::parse(&ck.config)?)?;
        let mut vae = Vae::new(config, 0)?;
        let mut loaded = ParamStore::new();
        for (name, t) in ck.records {
            loaded.add(name, t)?;
        }
        vae.params.load_from(&loaded)?;
        Ok(vae)
    }
}

fn split_moments<T: Scalar>(g: &mut Graph<T>, h: Var, c: usize) -> Result<(Var, Var)> {
    let mean = g.narrow(h, 0, 0, c)?;
    let logvar = g.narrow(h, 0, c, c)?;
    Ok((mean, logvar))
}

pub const L1_WEIGHT: f64 = 3.0;
pub const KL_WEIGHT: f64 = 3e-6;

/// `3 * mean|recon - target| + 3e-6 * mean_elem KL(N(mean, exp(logvar)) || N(0, 1))`.
pub fn vae_loss(recon: &Tensor, target: &Tensor, mean: &Tensor, logvar: &Tensor) -> Result<f64> {
    recon.expect_same_shape("vae_loss", target)?;
    mean.expect_same_shape("vae_loss", logvar)?;
    let l1 = recon
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / recon.numel() as f64;
    Ok(L1_WEIGHT * l1 + KL_WEIGHT * kl_mean(mean, logvar))
}

/// Per-element mean of the Gaussian KL against the standard normal.
pub fn kl_mean(mean: &Tensor, logvar: &Tensor) -> f64 {
    mean.data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum::<f64>()
        / mean.numel() as f64
}

/// Differentiable form of [`vae_loss`].
pub fn vae_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    recon: Var,
    target: Var,
    mean: Var,
    logvar: Var,
) -> Result<Var> {
    let d = g.sub(recon, target)?;
    let a = g.abs(d);
    let l1 = g.mean_all(a);
    let m2 = g.square(mean);
    let e = g.exp(logvar);
    let s = g.add(m2, e)?;
    let s = g.sub(s, logvar)?;
    let s = g.add_scalar(s, -T::one());
    let kl = g.mean_all(s);
    let l1 = g.scale(l1, T::f(L1_WEIGHT));
    let kl = g.scale(kl, T::f(0.5 * KL_WEIGHT));
    g.add(l1, kl)
}
