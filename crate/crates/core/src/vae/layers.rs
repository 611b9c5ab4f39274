//! Encoder and decoder layers. Every temporal operator is causal, so the same
//! code serves whole-sequence passes and chunked streaming; only the source of
//! the past frames differs (zero padding vs. a per-layer frame cache).

use super::VaeConfig;
use crate::autograd::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::params::{init_fan_in, ParamId, ParamStore};
use crate::tensor::{Padding3d, Scalar, Tensor};
use rand::Rng;

/// What a cache slot belongs to; used to check the cache-size contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotKind {
    /// Stride-1 causal convolution caching `kt - 1` frames.
    Causal { kt: usize },
    /// Stride-2 temporal downsampling caching one frame.
    TimeDown,
}

/// Per-layer frame caches walked in a fixed order once per chunk.
#[derive(Debug, Clone)]
pub(crate) struct Cursor<T: Scalar> {
    pub slots: Vec<(SlotKind, Option<Tensor<T>>)>,
    pub pos: usize,
    pub chunk: usize,
}

impl<T: Scalar> Cursor<T> {
    pub fn new() -> Self {
        Self {
            slots: Vec::new(),
            pos: 0,
            chunk: 0,
        }
    }

    pub fn begin_chunk(&mut self) {
        self.pos = 0;
    }

    pub fn end_chunk(&mut self) {
        self.chunk += 1;
    }

    fn next(&mut self, kind: SlotKind) -> &mut Option<Tensor<T>> {
        if self.pos == self.slots.len() {
            self.slots.push((kind, None));
        }
        let slot = &mut self.slots[self.pos];
        debug_assert_eq!(slot.0, kind, "cache slots visited out of order");
        self.pos += 1;
        &mut slot.1
    }
}

pub(crate) enum Pass<'a, T: Scalar> {
    Full,
    Stream(&'a mut Cursor<T>),
}

/// Last `k` frames of a `(C, T, H, W)` tensor, zero-extended on the past side
/// when fewer than `k` exist.
fn tail_frames<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let t = x.dim(1);
    if t >= k {
        return x.narrow(1, t - k, k);
    }
    let pad = Tensor::zeros(&[x.dim(0), k - t, x.dim(2), x.dim(3)]);
    Tensor::cat(&[&pad, x], 1)
}

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub kt: usize,
    pub stride_hw: usize,
    pub pad_hw: [(usize, usize); 2],
}

impl Conv {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        pass: &mut Pass<'_, T>,
    ) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let stride = [1, self.stride_hw, self.stride_hw];
        let pad = |t| Padding3d {
            t,
            h: self.pad_hw[0],
            w: self.pad_hw[1],
        };
        match pass {
            Pass::Stream(cur) if self.kt > 1 => {
                let k = self.kt - 1;
                let slot = cur.next(SlotKind::Causal { kt: self.kt });
                let cache = match slot.take() {
                    Some(c) => c,
                    None => {
                        let s = g.shape(x);
                        Tensor::zeros(&[s[0], k, s[2], s[3]])
                    }
                };
                let cv = g.input(cache);
                let xc = g.cat(&[cv, x], 1)?;
                *slot = Some(tail_frames(g.value(xc), k)?);
                g.conv3d(xc, w, Some(b), stride, pad((0, 0)))
            }
            _ => g.conv3d(x, w, Some(b), stride, pad((self.kt - 1, 0))),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    pub n1: ParamId,
    pub c1: Conv,
    pub n2: ParamId,
    pub c2: Conv,
    pub shortcut: Option<Conv>,
}

impl ResBlock {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        pass: &mut Pass<'_, T>,
        eps: T,
    ) -> Result<Var> {
        let h = norm_silu(g, ps, x, self.n1, eps)?;
        let h = self.c1.forward(g, ps, h, pass)?;
        let h = norm_silu(g, ps, h, self.n2, eps)?;
        let h = self.c2.forward(g, ps, h, pass)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(g, ps, x, pass)?,
            None => x,
        };
        g.add(h, s)
    }
}

pub(crate) fn norm_silu<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    x: Var,
    gain: ParamId,
    eps: T,
) -> Result<Var> {
    let gv = g.param(ps, gain);
    let n = g.rms_norm(x, Some(gv), eps, 0)?;
    Ok(g.silu(n))
}

/// Halves the frame count after the first: frame 0 passes through, later
/// windows of three frames advance by two.
#[derive(Debug, Clone)]
pub(crate) struct TimeDown {
    pub w: ParamId,
    pub b: ParamId,
}

impl TimeDown {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        pass: &mut Pass<'_, T>,
    ) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let frames = g.shape(x)[1];
        let conv = |g: &mut Graph<T>, v: Var| g.conv3d(v, w, Some(b), [2, 1, 1], Padding3d::default());
        match pass {
            Pass::Full => {
                ensure!(
                    frames % 2 == 1,
                    Error::shape("time_down", "axis 1 (frames)", "odd count", frames)
                );
                if frames == 1 {
                    return Ok(x);
                }
                let first = g.narrow(x, 1, 0, 1)?;
                let rest = conv(g, x)?;
                g.cat(&[first, rest], 1)
            }
            Pass::Stream(cur) => {
                let chunk = cur.chunk;
                let slot = cur.next(SlotKind::TimeDown);
                if chunk == 0 {
                    ensure!(
                        frames == 1,
                        Error::shape("time_down", "axis 1 (frames)", 1, frames)
                    );
                    *slot = Some(g.value(x).clone());
                    return Ok(x);
                }
                ensure!(
                    frames % 2 == 0,
                    Error::shape("time_down", "axis 1 (frames)", "even count", frames)
                );
                let prev = slot
                    .take()
                    .ok_or_else(|| Error::Cache("temporal downsample cache missing".into()))?;
                *slot = Some(tail_frames(g.value(x), 1)?);
                let pv = g.input(prev);
                let xc = g.cat(&[pv, x], 1)?;
                conv(g, xc)
            }
        }
    }
}

/// Doubles the frame count after the first: a causal conv to `2C` channels
/// whose halves become consecutive output frames.
#[derive(Debug, Clone)]
pub(crate) struct TimeUp {
    pub conv: Conv,
}

impl TimeUp {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        pass: &mut Pass<'_, T>,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        match pass {
            Pass::Full => {
                if s[1] == 1 {
                    return Ok(x);
                }
                let first = g.narrow(x, 1, 0, 1)?;
                let rest = g.narrow(x, 1, 1, s[1] - 1)?;
                let y = self.conv.forward(g, ps, rest, pass)?;
                let y = interleave(g, y)?;
                g.cat(&[first, y], 1)
            }
            Pass::Stream(cur) => {
                if cur.chunk == 0 {
                    ensure!(s[1] == 1, Error::shape("time_up", "axis 1 (frames)", 1, s[1]));
                    let slot = cur.next(SlotKind::Causal { kt: self.conv.kt });
                    *slot = Some(Tensor::zeros(&[s[0], self.conv.kt - 1, s[2], s[3]]));
                    return Ok(x);
                }
                let y = self.conv.forward(g, ps, x, pass)?;
                interleave(g, y)
            }
        }
    }
}

/// `(2C, n, H, W)` → `(C, 2n, H, W)` with output frame `2k + j` taken from half `j`.
fn interleave<T: Scalar>(g: &mut Graph<T>, y: Var) -> Result<Var> {
    let s = g.shape(y).to_vec();
    let c = s[0] / 2;
    let r = g.reshape(y, &[2, c, s[1], s[2], s[3]])?;
    let p = g.permute(r, &[1, 2, 0, 3, 4])?;
    g.reshape(p, &[c, 2 * s[1], s[2], s[3]])
}

#[derive(Debug, Clone)]
pub(crate) struct EncStage {
    pub res: Vec<ResBlock>,
    pub down: Conv,
    pub time: Option<TimeDown>,
}

#[derive(Debug, Clone)]
pub(crate) struct DecStage {
    pub res: Vec<ResBlock>,
    pub time: Option<TimeUp>,
    pub up: Conv,
}

#[derive(Debug, Clone)]
pub(crate) struct Encoder {
    pub conv_in: Conv,
    pub stages: Vec<EncStage>,
    pub mid: ResBlock,
    pub head_norm: ParamId,
    pub head: Conv,
}

#[derive(Debug, Clone)]
pub(crate) struct Decoder {
    pub conv_in: Conv,
    pub mid: ResBlock,
    /// Ordered from the coarsest level down.
    pub stages: Vec<DecStage>,
    pub final_res: ResBlock,
    pub head_norm: ParamId,
    pub head: Conv,
}

impl Encoder {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        pass: &mut Pass<'_, T>,
        eps: T,
    ) -> Result<Var> {
        let mut h = self.conv_in.forward(g, ps, x, pass)?;
        for st in &self.stages {
            for r in &st.res {
                h = r.forward(g, ps, h, pass, eps)?;
            }
            h = st.down.forward(g, ps, h, pass)?;
            if let Some(t) = &st.time {
                h = t.forward(g, ps, h, pass)?;
            }
        }
        h = self.mid.forward(g, ps, h, pass, eps)?;
        let h = norm_silu(g, ps, h, self.head_norm, eps)?;
        self.head.forward(g, ps, h, pass)
    }
}

impl Decoder {
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        z: Var,
        pass: &mut Pass<'_, T>,
        eps: T,
    ) -> Result<Var> {
        let mut h = self.conv_in.forward(g, ps, z, pass)?;
        h = self.mid.forward(g, ps, h, pass, eps)?;
        for st in &self.stages {
            for r in &st.res {
                h = r.forward(g, ps, h, pass, eps)?;
            }
            if let Some(t) = &st.time {
                h = t.forward(g, ps, h, pass)?;
            }
            h = g.upsample2x(h)?;
            h = st.up.forward(g, ps, h, pass)?;
        }
        h = self.final_res.forward(g, ps, h, pass, eps)?;
        let h = norm_silu(g, ps, h, self.head_norm, eps)?;
        self.head.forward(g, ps, h, pass)
    }
}

struct Builder<'a, R: Rng> {
    ps: &'a mut ParamStore,
    rng: &'a mut R,
    kt: usize,
}

impl<R: Rng> Builder<'_, R> {
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: [usize; 3],
        stride_hw: usize,
        pad_hw: [(usize, usize); 2],
    ) -> Result<Conv> {
        let w = init_fan_in(&[cout, cin, k[0], k[1], k[2]], cin * k.iter().product::<usize>(), self.rng);
        Ok(Conv {
            w: self.ps.add(format!("{name}.w"), w)?,
            b: self.ps.add(format!("{name}.b"), Tensor::zeros(&[cout]))?,
            kt: k[0],
            stride_hw,
            pad_hw,
        })
    }

    /// Causal `kt x 3 x 3` conv with same spatial padding.
    fn conv3(&mut self, name: &str, cin: usize, cout: usize) -> Result<Conv> {
        let kt = self.kt;
        self.conv(name, cin, cout, [kt, 3, 3], 1, [(1, 1), (1, 1)])
    }

    /// Zero-initialized, so a fresh residual block is its shortcut.
    fn zero_conv3(&mut self, name: &str, cin: usize, cout: usize) -> Result<Conv> {
        let c = self.conv3(name, cin, cout)?;
        let z = Tensor::zeros(self.ps.get(c.w).shape());
        self.ps.set(c.w, z)?;
        Ok(c)
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<ParamId> {
        self.ps.add(format!("{name}.gain"), Tensor::ones(&[c]))
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize) -> Result<ResBlock> {
        Ok(ResBlock {
            n1: self.norm(&format!("{name}.norm1"), cin)?,
            c1: self.conv3(&format!("{name}.conv1"), cin, cout)?,
            n2: self.norm(&format!("{name}.norm2"), cout)?,
            c2: self.zero_conv3(&format!("{name}.conv2"), cout, cout)?,
            shortcut: if cin != cout {
                Some(self.conv(&format!("{name}.shortcut"), cin, cout, [1, 1, 1], 1, [(0, 0), (0, 0)])?)
            } else {
                None
            },
        })
    }
}

const INITIAL_LOGVAR: f32 = -6.0;

pub(crate) fn build<R: Rng>(
    cfg: &VaeConfig,
    ps: &mut ParamStore,
    rng: &mut R,
) -> Result<(Encoder, Decoder)> {
    let ch = cfg.stage_channels();
    let n = cfg.num_down_stages();
    let c = cfg.latent_channels;
    let mut b = Builder {
        ps,
        rng,
        kt: cfg.temporal_kernel,
    };

    let conv_in = b.conv3("enc.conv_in", cfg.in_channels, ch[0])?;
    let mut stages = Vec::with_capacity(n);
    let mut cur = ch[0];
    for i in 0..n {
        let mut res = Vec::new();
        for j in 0..cfg.res_blocks {
            res.push(b.res(&format!("enc.down{i}.res{j}"), cur, ch[i + 1])?);
            cur = ch[i + 1];
        }
        let down = b.conv(&format!("enc.down{i}.spatial"), cur, cur, [1, 3, 3], 2, [(0, 1), (0, 1)])?;
        let time = if cfg.temporal_downsample[i] {
            let conv = b.conv(&format!("enc.down{i}.time"), cur, cur, [3, 1, 1], 1, [(0, 0), (0, 0)])?;
            Some(TimeDown { w: conv.w, b: conv.b })
        } else {
            None
        };
        stages.push(EncStage { res, down, time });
    }
    let mid = b.res("enc.mid", cur, cur)?;
    let head_norm = b.norm("enc.head.norm", cur)?;
    let head = b.conv3("enc.head.conv", cur, 2 * c)?;
    // Fresh posteriors start narrow (std ~0.05) rather than unit width.
    let bias = Tensor::from_fn(&[2 * c], |i| if i < c { 0.0 } else { INITIAL_LOGVAR });
    b.ps.set(head.b, bias)?;
    let enc = Encoder {
        conv_in,
        stages,
        mid,
        head_norm,
        head,
    };

    let mut cur = ch[n];
    let conv_in = b.conv3("dec.conv_in", c, cur)?;
    let mid = b.res("dec.mid", cur, cur)?;
    let mut stages = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let mut res = Vec::new();
        for j in 0..cfg.res_blocks {
            res.push(b.res(&format!("dec.up{i}.res{j}"), cur, ch[i + 1])?);
            cur = ch[i + 1];
        }
        let time = if cfg.temporal_downsample[i] {
            let conv = b.conv(&format!("dec.up{i}.time"), cur, 2 * cur, [3, 1, 1], 1, [(0, 0), (0, 0)])?;
            Some(TimeUp { conv })
        } else {
            None
        };
        let out = if cfg.decoder_upsample_channel_halving { cur / 2 } else { cur };
        let up = b.conv(&format!("dec.up{i}.spatial"), cur, out, [1, 3, 3], 1, [(1, 1), (1, 1)])?;
        cur = out;
        stages.push(DecStage { res, time, up });
    }
    let final_res = b.res("dec.final", cur, ch[0])?;
    let head_norm = b.norm("dec.head.norm", ch[0])?;
    let head = b.conv3("dec.head.conv", ch[0], cfg.in_channels)?;
    let dec = Decoder {
        conv_in,
        mid,
        stages,
        final_res,
        head_norm,
        head,
    };
    Ok((enc, dec))
}
