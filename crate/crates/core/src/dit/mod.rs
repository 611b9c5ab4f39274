//! Diffusion transformer over patchified video latents.
//!
//! Input `(B, c + c_cond, F, H, W)` latents become `(B, L, D)` tokens with
//! `L = F·(H/2)·(W/2)`. Each block runs modulated full self-attention over
//! all `L` tokens, cross-attention to the text context, and a modulated
//! feed-forward, each behind a residual gated by the block's modulation.

mod adaln;
mod patch;
pub mod rope;

pub use adaln::{shared_adaln, AdaLnSharing, ModulationParams, GROUPS};
pub use patch::{patchify, patchify_graph, token_count, unpatchify, unpatchify_graph, PATCH};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{read_checkpoint, write_checkpoint};
use crate::error::{ensure, Error, Result};
use crate::flow::FlowModel;
use crate::kv::KvMap;
use crate::params::{init_fan_in, ParamId, ParamStore};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use std::io::{Read, Write};

pub const DIT_MAGIC: &[u8; 4] = b"WDIT";
pub const DIT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RopeMode {
    /// Rotary encoding factorized over (frame, row, column).
    Factorized3d,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DitConfig {
    /// Channels of the noisy latent, also the output channels.
    pub latent_channels: usize,
    /// Extra conditioning channels appended to the input (0 for none).
    pub cond_channels: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub text_len: usize,
    pub text_dim: usize,
    /// Width of the sinusoidal time features.
    pub time_dim: usize,
    pub rope: RopeMode,
    pub sharing: AdaLnSharing,
    pub norm_eps: f64,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl DitConfig {
    pub fn toy() -> Self {
        Self {
            latent_channels: 16,
            cond_channels: 0,
            depth: 4,
            dim: 64,
            heads: 4,
            ffn_dim: 256,
            text_len: 512,
            text_dim: 32,
            time_dim: 64,
            rope: RopeMode::Factorized3d,
            sharing: AdaLnSharing::Full,
            norm_eps: 1e-6,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn in_channels(&self) -> usize {
        self.latent_channels + self.cond_channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("dit_config", m));
        if self.latent_channels == 0 || self.depth == 0 || self.dim == 0 || self.heads == 0 {
            return bad("latent_channels, depth, dim and heads must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.rope == RopeMode::Factorized3d && self.head_dim() % 2 != 0 {
            return bad(format!("rotary encoding needs an even head width, got {}", self.head_dim()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return bad(format!("time_dim must be even and positive, got {}", self.time_dim));
        }
        if self.ffn_dim == 0 || self.text_dim == 0 || self.text_len == 0 {
            return bad("ffn_dim, text_dim and text_len must be positive".into());
        }
        if !(self.norm_eps > 0.0) {
            return bad(format!("norm_eps must be > 0, got {}", self.norm_eps));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("dit.latent_channels", self.latent_channels);
        kv.set("dit.cond_channels", self.cond_channels);
        kv.set("dit.depth", self.depth);
        kv.set("dit.dim", self.dim);
        kv.set("dit.heads", self.heads);
        kv.set("dit.ffn_dim", self.ffn_dim);
        kv.set("dit.text_len", self.text_len);
        kv.set("dit.text_dim", self.text_dim);
        kv.set("dit.time_dim", self.time_dim);
        kv.set(
            "dit.rope",
            match self.rope {
                RopeMode::Factorized3d => "3d",
                RopeMode::None => "none",
            },
        );
        kv.set("dit.sharing", self.sharing);
        kv.set("dit.norm_eps", self.norm_eps);
        kv
    }

    /// Missing keys keep the toy defaults.
    /// Every key `from_kv` reads.
    pub const KEYS: &'static [&'static str] = &[
        "dit.latent_channels",
        "dit.cond_channels",
        "dit.depth",
        "dit.dim",
        "dit.heads",
        "dit.ffn_dim",
        "dit.text_len",
        "dit.text_dim",
        "dit.time_dim",
        "dit.rope",
        "dit.sharing",
        "dit.norm_eps",
    ];

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::toy();
        let rope = match kv.raw("dit.rope") {
            None | Some("3d") => RopeMode::Factorized3d,
            Some("none") => RopeMode::None,
            Some(o) => return Err(Error::invalid("dit_config", format!("dit.rope must be 3d or none, got {o:?}"))),
        };
        let c = Self {
            latent_channels: kv.get_or("dit.latent_channels", d.latent_channels)?,
            cond_channels: kv.get_or("dit.cond_channels", d.cond_channels)?,
            depth: kv.get_or("dit.depth", d.depth)?,
            dim: kv.get_or("dit.dim", d.dim)?,
            heads: kv.get_or("dit.heads", d.heads)?,
            ffn_dim: kv.get_or("dit.ffn_dim", d.ffn_dim)?,
            text_len: kv.get_or("dit.text_len", d.text_len)?,
            text_dim: kv.get_or("dit.text_dim", d.text_dim)?,
            time_dim: kv.get_or("dit.time_dim", d.time_dim)?,
            rope,
            sharing: kv.get_or("dit.sharing", d.sharing)?,
            norm_eps: kv.get_or("dit.norm_eps", d.norm_eps)?,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Exact parameter total for `config` with the given modulation sharing.
pub fn param_count(config: &DitConfig, sharing: AdaLnSharing) -> u64 {
    let d = config.dim as u64;
    let lin = |i: u64, o: u64| i * o + o;
    let patch = lin(4 * config.latent_channels as u64, d) + 4 * config.cond_channels as u64 * d;
    let time = lin(config.time_dim as u64, d) + lin(d, d);
    let mlps = sharing.mlp_count(config.depth) as u64 * lin(d, GROUPS as u64 * d);
    let f = config.ffn_dim as u64;
    let t = config.text_dim as u64;
    let block = GROUPS as u64 * d       // modulation bias
        + 4 * lin(d, d)                 // self-attention q, k, v, o
        + d + 2 * lin(d, d) + 2 * lin(t, d) // cross-attention gain, q, o, k, v
        + lin(d, f) + lin(f, d);
    let head = 2 * d + lin(d, 4 * config.latent_channels as u64);
    patch + time + mlps + config.depth as u64 * block + head
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteKind {
    SelfAttn,
    CrossAttn,
}

/// An attention call site inside the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttnSite {
    pub block: usize,
    pub kind: SiteKind,
}

/// Intercepts attention outputs (after the output projection). `compute`
/// evaluates the site; a hook may call it or return a stored tensor instead.
pub trait AttentionHook<T: Scalar = f32> {
    fn attend(
        &mut self,
        site: AttnSite,
        compute: &mut dyn FnMut() -> Result<Tensor<T>>,
    ) -> Result<Tensor<T>>;
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct BlockIds {
    mod_bias: ParamId,
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    cross_gain: ParamId,
    cq: Lin,
    ck: Lin,
    cv: Lin,
    co: Lin,
    fc1: Lin,
    fc2: Lin,
}

#[derive(Debug, Clone)]
struct Ids {
    patch: Lin,
    cond: Option<ParamId>,
    t1: Lin,
    t2: Lin,
    mlps: Vec<Lin>,
    blocks: Vec<BlockIds>,
    head_mod: ParamId,
    head: Lin,
}

#[derive(Debug, Clone)]
pub struct Dit<T: Scalar = f32> {
    pub config: DitConfig,
    pub params: ParamStore<T>,
    ids: Ids,
}

struct Builder<'a, T: Scalar> {
    ps: &'a mut ParamStore<T>,
    rng: &'a mut rng::Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn lin(&mut self, name: &str, i: usize, o: usize, bias: bool) -> Result<Lin> {
        let w = self.ps.add(format!("{name}.w"), init_fan_in(&[o, i], i, self.rng))?;
        let b = if bias {
            Some(self.ps.add(format!("{name}.b"), Tensor::zeros(&[o]))?)
        } else {
            None
        };
        Ok(Lin { w, b })
    }
}

/// Shapes and per-call tensors shared by every block in one forward pass.
struct Pass<'a, T: Scalar> {
    batch: usize,
    frames: usize,
    tokens_per_frame: usize,
    rope: Option<&'a (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Dit<T> {
    pub fn new(config: DitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let mut ps = ParamStore::new();
        let mut b = Builder { ps: &mut ps, rng: &mut r };
        let (d, c) = (config.dim, config.latent_channels);
        let patch = b.lin("patch", 4 * c, d, true)?;
        let cond = if config.cond_channels > 0 {
            // zero-initialized: new conditioning inputs start with no effect
            Some(b.ps.add("cond.w", Tensor::zeros(&[d, 4 * config.cond_channels]))?)
        } else {
            None
        };
        let t1 = b.lin("time.l1", config.time_dim, d, true)?;
        let t2 = b.lin("time.l2", d, d, true)?;
        let mlps = (0..config.sharing.mlp_count(config.depth))
            .map(|j| b.lin(&format!("adaln.mlp{j}"), d, GROUPS * d, true))
            .collect::<Result<Vec<_>>>()?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("blocks.{i}");
            blocks.push(BlockIds {
                mod_bias: b.ps.add(format!("{p}.mod_bias"), Tensor::zeros(&[GROUPS * d]))?,
                q: b.lin(&format!("{p}.self.q"), d, d, true)?,
                k: b.lin(&format!("{p}.self.k"), d, d, true)?,
                v: b.lin(&format!("{p}.self.v"), d, d, true)?,
                o: b.lin(&format!("{p}.self.o"), d, d, true)?,
                cross_gain: b.ps.add(format!("{p}.cross.norm.gain"), Tensor::ones(&[d]))?,
                cq: b.lin(&format!("{p}.cross.q"), d, d, true)?,
                ck: b.lin(&format!("{p}.cross.k"), config.text_dim, d, true)?,
                cv: b.lin(&format!("{p}.cross.v"), config.text_dim, d, true)?,
                co: b.lin(&format!("{p}.cross.o"), d, d, true)?,
                fc1: b.lin(&format!("{p}.ffn.fc1"), d, config.ffn_dim, true)?,
                fc2: b.lin(&format!("{p}.ffn.fc2"), config.ffn_dim, d, true)?,
            });
        }
        let head_mod = b.ps.add("head.mod", Tensor::zeros(&[2, d]))?;
        let head = b.lin("head", d, 4 * c, true)?;
        Ok(Self {
            config,
            params: ps,
            ids: Ids {
                patch,
                cond,
                t1,
                t2,
                mlps,
                blocks,
                head_mod,
                head,
            },
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Dit<U> {
        Dit {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    /// Index of the modulation MLP used by `block`.
    pub fn mlp_of(&self, block: usize) -> usize {
        self.config.sharing.assignment(self.config.depth)[block]
    }

    pub fn mlp_param_ids(&self, mlp: usize) -> (ParamId, ParamId) {
        let l = self.ids.mlps[mlp];
        (l.w, l.b.expect("modulation MLP has a bias"))
    }

    pub fn block_bias_id(&self, block: usize) -> ParamId {
        self.ids.blocks[block].mod_bias
    }

    /// `[cos(1000 t f_i), sin(1000 t f_i)]` with geometric `f_i`, one row per time.
    pub fn time_features(&self, t: &[f64]) -> Tensor<T> {
        let half = self.config.time_dim / 2;
        Tensor::from_fn(&[t.len(), 2 * half], |i| {
            let (row, col) = (i / (2 * half), i % (2 * half));
            let k = col % half;
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            let a = 1000.0 * t[row] * freq;
            T::f(if col < half { a.cos() } else { a.sin() })
        })
    }

    fn lin(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var, l: Lin) -> Result<Var> {
        let w = g.param(ps, l.w);
        let b = l.b.map(|b| g.param(ps, b));
        g.linear(x, w, b)
    }

    /// Time embedding `(N, D)` for `N` times.
    fn embed_time(&self, g: &mut Graph<T>, ps: &ParamStore<T>, t: &[f64]) -> Result<Var> {
        let f = g.input(self.time_features(t));
        let h = self.lin(g, ps, f, self.ids.t1)?;
        let h = g.silu(h);
        self.lin(g, ps, h, self.ids.t2)
    }

    /// `(N, 6D)` modulation of `block` for time embedding `e (N, D)`.
    fn modulation_graph(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        silu_e: Var,
        block: usize,
    ) -> Result<Var> {
        let m = self.lin(g, ps, silu_e, self.ids.mlps[self.mlp_of(block)])?;
        let n = g.shape(m)[0];
        let bias = g.param(ps, self.ids.blocks[block].mod_bias);
        let bias = g.reshape(bias, &[1, GROUPS * self.config.dim])?;
        let bias = g.expand(bias, &[n, GROUPS * self.config.dim])?;
        g.add(m, bias)
    }

    /// Modulation parameters of `block` at the given times.
    pub fn modulation(&self, block: usize, t: &[f64]) -> Result<ModulationParams> {
        ensure!(
            block < self.config.depth,
            Error::invalid("modulation", format!("block {block} out of range"))
        );
        let mut g = Graph::inference();
        let e = self.embed_time(&mut g, &self.params, t)?;
        let se = g.silu(e);
        let m = self.modulation_graph(&mut g, &self.params, se, block)?;
        ModulationParams::split(&g.value(m).cast())
    }

    /// Repeat per-frame rows `(B·F, K)` over each frame's tokens: `(B, L, K)`.
    fn per_token(&self, g: &mut Graph<T>, v: Var, pass: &Pass<'_, T>) -> Result<Var> {
        let k = g.shape(v)[1];
        let (b, f, p) = (pass.batch, pass.frames, pass.tokens_per_frame);
        let r = g.reshape(v, &[b, f, 1, k])?;
        let r = g.expand(r, &[b, f, p, k])?;
        g.reshape(r, &[b, f * p, k])
    }

    fn modulate(&self, g: &mut Graph<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let eps = T::f(self.config.norm_eps);
        let h = g.rms_norm(x, None, eps, 2)?;
        let hs = g.mul(h, scale)?;
        let h = g.add(h, hs)?;
        g.add(h, shift)
    }

    fn to_heads(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (h, dh) = (self.config.heads, self.config.head_dim());
        let r = g.reshape(x, &[s[0], s[1], h, dh])?;
        let p = g.permute(r, &[0, 2, 1, 3])?;
        g.reshape(p, &[s[0] * h, s[1], dh])
    }

    fn from_heads(&self, g: &mut Graph<T>, x: Var, batch: usize) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let h = self.config.heads;
        let r = g.reshape(x, &[batch, h, s[1], s[2]])?;
        let p = g.permute(r, &[0, 2, 1, 3])?;
        g.reshape(p, &[batch, s[1], h * s[2]])
    }

    fn self_attention(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        ids: &BlockIds,
        h: Var,
        pass: &Pass<'_, T>,
    ) -> Result<Var> {
        let q = self.lin(g, ps, h, ids.q)?;
        let k = self.lin(g, ps, h, ids.k)?;
        let v = self.lin(g, ps, h, ids.v)?;
        let (mut q, mut k, v) = (self.to_heads(g, q)?, self.to_heads(g, k)?, self.to_heads(g, v)?);
        if let Some((cos, sin)) = pass.rope {
            q = g.rope(q, cos, sin)?;
            k = g.rope(k, cos, sin)?;
        }
        let a = g.attention(q, k, v)?;
        let a = self.from_heads(g, a, pass.batch)?;
        self.lin(g, ps, a, ids.o)
    }

    fn cross_attention(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        ids: &BlockIds,
        h: Var,
        ctx: Var,
        batch: usize,
    ) -> Result<Var> {
        let mut q = self.lin(g, ps, h, ids.cq)?;
        let k = self.lin(g, ps, ctx, ids.ck)?;
        let v = self.lin(g, ps, ctx, ids.cv)?;
        // A shared context serves every item's queries in one pass: softmax
        // runs per query row, so folding the batch into the query axis is exact.
        let qs = g.shape(q).to_vec();
        let shared = g.shape(k)[0] != batch;
        if shared {
            q = g.reshape(q, &[1, qs[0] * qs[1], qs[2]])?;
        }
        let (q, k, v) = (self.to_heads(g, q)?, self.to_heads(g, k)?, self.to_heads(g, v)?);
        let a = g.attention(q, k, v)?;
        let mut a = self.from_heads(g, a, if shared { 1 } else { batch })?;
        if shared {
            a = g.reshape(a, &qs)?;
        }
        self.lin(g, ps, a, ids.co)
    }

    /// Run `compute` directly or through the hook.
    fn site(
        g: &mut Graph<T>,
        hook: &mut Option<&mut dyn AttentionHook<T>>,
        site: AttnSite,
        compute: impl FnOnce(&mut Graph<T>) -> Result<Var>,
    ) -> Result<Var> {
        match hook {
            None => compute(g),
            Some(h) => {
                let mut once = Some(compute);
                let mut run = || -> Result<Tensor<T>> {
                    let f = once
                        .take()
                        .ok_or_else(|| Error::Cache(format!("site {site:?} computed twice")))?;
                    let v = f(g)?;
                    Ok(g.value(v).clone())
                };
                let out = h.attend(site, &mut run)?;
                Ok(g.input(out))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn block_graph(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        i: usize,
        x: Var,
        m: Var,
        ctx: Option<Var>,
        pass: &Pass<'_, T>,
        hook: &mut Option<&mut dyn AttentionHook<T>>,
    ) -> Result<Var> {
        let ids = &self.ids.blocks[i];
        let d = self.config.dim;
        let mut part = Vec::with_capacity(GROUPS);
        for k in 0..GROUPS {
            part.push(g.narrow(m, 2, k * d, d)?);
        }
        let h = self.modulate(g, x, part[0], part[1])?;
        let a = Self::site(g, hook, AttnSite { block: i, kind: SiteKind::SelfAttn }, |g| {
            self.self_attention(g, ps, ids, h, pass)
        })?;
        let a = g.mul(a, part[2])?;
        let mut x = g.add(x, a)?;
        if let Some(ctx) = ctx {
            let gain = g.param(ps, ids.cross_gain);
            let h = g.rms_norm(x, Some(gain), T::f(self.config.norm_eps), 2)?;
            let c = Self::site(g, hook, AttnSite { block: i, kind: SiteKind::CrossAttn }, |g| {
                self.cross_attention(g, ps, ids, h, ctx, pass.batch)
            })?;
            let c = g.mul(c, part[2])?;
            x = g.add(x, c)?;
        }
        let h = self.modulate(g, x, part[3], part[4])?;
        let h = self.lin(g, ps, h, ids.fc1)?;
        let h = g.silu(h);
        let h = self.lin(g, ps, h, ids.fc2)?;
        let h = g.mul(h, part[5])?;
        g.add(x, h)
    }

    fn check_ctx(&self, g: &Graph<T>, ctx: Option<Var>, batch: usize) -> Result<()> {
        if let Some(c) = ctx {
            let s = g.shape(c);
            ensure!(
                s.len() == 3 && s[2] == self.config.text_dim && (s[0] == batch || s[0] == 1),
                Error::shape(
                    "dit_forward",
                    "text context",
                    format!("(B or 1, len, {})", self.config.text_dim),
                    format!("{s:?}")
                )
            );
        }
        Ok(())
    }

    /// Full network with one time per (batch item, latent frame), row-major.
    pub fn forward_frames(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        t: &[f64],
        ctx: Option<Var>,
        mut hook: Option<&mut dyn AttentionHook<T>>,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        ensure!(
            s.len() == 5,
            Error::shape("dit_forward", "rank", "5 (B, C, frames, H, W)", s.len())
        );
        let cin = self.config.in_channels();
        ensure!(
            s[1] == cin,
            Error::shape("dit_forward", "axis 1 (channels)", cin, s[1])
        );
        let (b, f, hh, ww) = (s[0], s[2], s[3], s[4]);
        let l = token_count(f, hh, ww)?;
        ensure!(
            t.len() == b * f,
            Error::shape("dit_forward", "times (batch x frames)", b * f, t.len())
        );
        self.check_ctx(g, ctx, b)?;
        let c = self.config.latent_channels;
        let tables;
        let pass = Pass {
            batch: b,
            frames: f,
            tokens_per_frame: l / f,
            rope: match self.config.rope {
                RopeMode::Factorized3d => {
                    tables = rope::tables::<T>(self.config.head_dim(), [f, hh / 2, ww / 2])?;
                    Some(&tables)
                }
                RopeMode::None => None,
            },
        };

        let (xl, xc) = if self.config.cond_channels > 0 {
            (g.narrow(x, 1, 0, c)?, Some(g.narrow(x, 1, c, self.config.cond_channels)?))
        } else {
            (x, None)
        };
        let p = patchify_graph(g, xl)?;
        let mut h = self.lin(g, ps, p, self.ids.patch)?;
        if let (Some(xc), Some(w)) = (xc, self.ids.cond) {
            let pc = patchify_graph(g, xc)?;
            let w = g.param(ps, w);
            let hc = g.linear(pc, w, None)?;
            h = g.add(h, hc)?;
        }

        let e = self.embed_time(g, ps, t)?;
        let se = g.silu(e);
        for i in 0..self.config.depth {
            let m = self.modulation_graph(g, ps, se, i)?;
            let m = self.per_token(g, m, &pass)?;
            h = self.block_graph(g, ps, i, h, m, ctx, &pass, &mut hook)?;
        }

        let d = self.config.dim;
        let hm = g.param(ps, self.ids.head_mod);
        let hm = g.reshape(hm, &[1, 2 * d])?;
        let hm = g.expand(hm, &[b * f, 2 * d])?;
        let ee = g.cat(&[e, e], 1)?;
        let hm = g.add(hm, ee)?;
        let hm = self.per_token(g, hm, &pass)?;
        let shift = g.narrow(hm, 2, 0, d)?;
        let scale = g.narrow(hm, 2, d, d)?;
        let h = self.modulate(g, h, shift, scale)?;
        let out = self.lin(g, ps, h, self.ids.head)?;
        unpatchify_graph(g, out, c, f, hh, ww)
    }

    /// One block on explicit tokens `(B, L, D)` laid out on a `(f, h/2, w/2)`
    /// grid, with per-item modulation `(B, D)` groups.
    pub fn block_forward(
        &self,
        block: usize,
        tokens: &Tensor<T>,
        grid: [usize; 3],
        ctx: Option<&Tensor<T>>,
        m: &ModulationParams,
    ) -> Result<Tensor<T>> {
        ensure!(
            block < self.config.depth,
            Error::invalid("dit_block", format!("block {block} out of range"))
        );
        tokens.expect_rank("dit_block", 3)?;
        let (b, l, d) = (tokens.dim(0), tokens.dim(1), tokens.dim(2));
        ensure!(d == self.config.dim, Error::shape("dit_block", "axis 2 (features)", self.config.dim, d));
        ensure!(
            l == grid.iter().product::<usize>(),
            Error::shape("dit_block", "axis 1 (tokens)", grid.iter().product::<usize>(), l)
        );
        for t in m.groups() {
            ensure!(
                t.shape() == [b, d],
                Error::shape("dit_block", "modulation", format!("[{b}, {d}]"), format!("{:?}", t.shape()))
            );
        }
        let mut g = Graph::inference();
        let x = g.input(tokens.clone());
        let cv = ctx.map(|c| g.input(c.clone()));
        self.check_ctx(&g, cv, b)?;
        let tables;
        let pass = Pass {
            batch: b,
            frames: 1,
            tokens_per_frame: l,
            rope: match self.config.rope {
                RopeMode::Factorized3d => {
                    tables = rope::tables::<T>(self.config.head_dim(), grid)?;
                    Some(&tables)
                }
                RopeMode::None => None,
            },
        };
        let mv = g.input(m.concat()?.cast());
        let mv = self.per_token(&mut g, mv, &pass)?;
        let y = self.block_graph(&mut g, &self.params, block, x, mv, cv, &pass, &mut None)?;
        Ok(g.value(y).clone())
    }
}

impl<T: Scalar> FlowModel<T> for Dit<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn forward_graph(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        xt: Var,
        t: &[f64],
        ctx: Option<Var>,
    ) -> Result<Var> {
        let s = g.shape(xt).to_vec();
        ensure!(
            s.len() == 5,
            Error::shape("dit_forward", "rank", "5 (B, C, frames, H, W)", s.len())
        );
        ensure!(t.len() == s[0], Error::shape("dit_forward", "times", s[0], t.len()));
        let per_frame: Vec<f64> = t.iter().flat_map(|&v| std::iter::repeat_n(v, s[2])).collect();
        self.forward_frames(g, ps, xt, &per_frame, ctx, None)
    }
}

impl Dit {
    /// Inference with an attention hook and one time per (item, frame).
    pub fn velocity_frames(
        &self,
        x: &Tensor,
        t: &[f64],
        ctx: Option<&Tensor>,
        hook: Option<&mut dyn AttentionHook>,
    ) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let cv = ctx.map(|c| g.input(c.clone()));
        let v = self.forward_frames(&mut g, &self.params, xv, t, cv, hook)?;
        Ok(g.value(v).clone())
    }

    pub fn velocity_hooked(
        &self,
        x: &Tensor,
        t: f64,
        ctx: Option<&Tensor>,
        hook: Option<&mut dyn AttentionHook>,
    ) -> Result<Tensor> {
        ensure!(
            x.rank() == 5,
            Error::shape("dit_forward", "rank", "5 (B, C, frames, H, W)", x.rank())
        );
        let times = vec![t; x.dim(0) * x.dim(2)];
        self.velocity_frames(x, &times, ctx, hook)
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let records: Vec<(&str, &Tensor)> = self.params.iter().map(|(_, n, t)| (n, t)).collect();
        write_checkpoint(w, DIT_MAGIC, DIT_VERSION, &self.config.to_kv().serialize(), &records)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let ck = read_checkpoint(r, DIT_MAGIC)?;
        ensure!(
            ck.version == DIT_VERSION,
            Error::Format(format!("unsupported WDIT version {}", ck.version))
        );
        let config = DitConfig::from_kv(&KvMap::parse(&ck.config)?)?;
        let mut dit = Dit::new(config, 0)?;
        ensure!(
            ck.records.len() == dit.params.len(),
            Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                ck.records.len(),
                dit.params.len()
            ))
        );
        for (name, t) in ck.records {
            let id = dit
                .params
                .id(&name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name:?}")))?;
            dit.params
                .set(id, t)
                .map_err(|e| Error::Format(format!("tensor {name:?}: {e}")))?;
        }
        Ok(dit)
    }
}
