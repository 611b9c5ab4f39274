use super::scalar::{gemm, Mat};
use super::{Scalar, Tensor};
use crate::error::{ensure, Error, Result};

/// Geometry of a 3D convolution over `(channels, frames, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
    /// Temporal padding only on the past side (`kt - 1` frames).
    pub causal: bool,
    /// Spatial zero padding `(before, after)` for height and width.
    pub pad_hw: [(usize, usize); 2],
}

impl ConvSpec {
    /// Causal kernel with symmetric "same" spatial padding.
    pub fn causal(in_channels: usize, out_channels: usize, kernel: [usize; 3]) -> Self {
        Self {
            kernel,
            stride: [1, 1, 1],
            in_channels,
            out_channels,
            causal: true,
            pad_hw: [(kernel[1] / 2, kernel[1] / 2), (kernel[2] / 2, kernel[2] / 2)],
        }
    }

    pub fn with_stride(mut self, stride: [usize; 3]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_pad_hw(mut self, pad_hw: [(usize, usize); 2]) -> Self {
        self.pad_hw = pad_hw;
        self
    }

    pub fn padding(&self) -> Padding3d {
        let kt = self.kernel[0];
        let t = if self.causal {
            (kt - 1, 0)
        } else {
            ((kt - 1) / 2, (kt - 1) / 2)
        };
        Padding3d {
            t,
            h: self.pad_hw[0],
            w: self.pad_hw[1],
        }
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.kernel.iter().all(|&k| k >= 1),
            Error::invalid("ConvSpec", format!("kernel {:?} has a zero extent", self.kernel))
        );
        ensure!(
            self.stride.iter().all(|&s| s >= 1),
            Error::invalid("ConvSpec", format!("stride {:?} has a zero extent", self.stride))
        );
        ensure!(
            self.in_channels >= 1 && self.out_channels >= 1,
            Error::invalid("ConvSpec", "channel counts must be >= 1")
        );
        Ok(())
    }

    /// Output extents for an input of `(frames, height, width)`.
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let p = self.padding();
        Ok([
            out_len("conv3d", "axis 1 (frames)", input[0], p.t, self.kernel[0], self.stride[0])?,
            out_len("conv3d", "axis 2 (height)", input[1], p.h, self.kernel[1], self.stride[1])?,
            out_len("conv3d", "axis 3 (width)", input[2], p.w, self.kernel[2], self.stride[2])?,
        ])
    }
}

/// Zero padding `(before, after)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding3d {
    pub t: (usize, usize),
    pub h: (usize, usize),
    pub w: (usize, usize),
}

fn out_len(
    op: &'static str,
    axis: &str,
    len: usize,
    pad: (usize, usize),
    k: usize,
    stride: usize,
) -> Result<usize> {
    let padded = len + pad.0 + pad.1;
    ensure!(
        padded >= k,
        Error::shape(op, axis, format!(">= {k} after padding"), padded)
    );
    Ok((padded - k) / stride + 1)
}

/// 3D convolution of `input (C, T, H, W)` with `weights (O, C, kt, kh, kw)`.
pub fn conv3d<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    spec.validate()?;
    input.expect_rank("conv3d", 4)?;
    ensure!(
        input.dim(0) == spec.in_channels,
        Error::shape("conv3d", "axis 0 (channels)", spec.in_channels, input.dim(0))
    );
    let ws = spec.weight_shape();
    ensure!(
        weights.shape() == ws,
        Error::shape("conv3d", "weights", format!("{ws:?}"), format!("{:?}", weights.shape()))
    );
    ensure!(
        bias.shape() == [spec.out_channels],
        Error::shape("conv3d", "bias", spec.out_channels, format!("{:?}", bias.shape()))
    );
    conv3d_padded(input, weights, Some(bias), spec.stride, spec.padding())
}

struct ConvGeom {
    c: usize,
    ti: usize,
    hi: usize,
    wi: usize,
    o: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    to: usize,
    ho: usize,
    wo: usize,
    stride: [usize; 3],
    pad: Padding3d,
}

impl ConvGeom {
    fn new<T: Scalar>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        stride: [usize; 3],
        pad: Padding3d,
    ) -> Result<Self> {
        x.expect_rank("conv3d", 4)?;
        w.expect_rank("conv3d", 5)?;
        let s = x.shape();
        let k = w.shape();
        ensure!(
            k[1] == s[0],
            Error::shape("conv3d", "axis 0 (channels)", k[1], s[0])
        );
        ensure!(
            stride.iter().all(|&v| v >= 1),
            Error::invalid("conv3d", "stride must be >= 1")
        );
        Ok(Self {
            c: s[0],
            ti: s[1],
            hi: s[2],
            wi: s[3],
            o: k[0],
            kt: k[2],
            kh: k[3],
            kw: k[4],
            to: out_len("conv3d", "axis 1 (frames)", s[1], pad.t, k[2], stride[0])?,
            ho: out_len("conv3d", "axis 2 (height)", s[2], pad.h, k[3], stride[1])?,
            wo: out_len("conv3d", "axis 3 (width)", s[3], pad.w, k[4], stride[2])?,
            stride,
            pad,
        })
    }

    fn k2(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn n2(&self) -> usize {
        self.ho * self.wo
    }

    /// Source frame for output frame `t_out` at temporal tap `tau`, if not padding.
    fn src_frame(&self, t_out: usize, tau: usize) -> Option<usize> {
        let t = (t_out * self.stride[0] + tau) as isize - self.pad.t.0 as isize;
        (t >= 0 && (t as usize) < self.ti).then_some(t as usize)
    }

    /// `(K2, N2)` patch matrix of one input frame.
    fn im2col<T: Scalar>(&self, x: &[T], frame: usize) -> Vec<T> {
        let (k2, n2) = (self.k2(), self.n2());
        let mut col = vec![T::zero(); k2 * n2];
        let plane = self.hi * self.wi;
        for ci in 0..self.c {
            let src = &x[(ci * self.ti + frame) * plane..(ci * self.ti + frame + 1) * plane];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ci * self.kh + i) * self.kw + j) * n2;
                    for oy in 0..self.ho {
                        let y = (oy * self.stride[1] + i) as isize - self.pad.h.0 as isize;
                        if y < 0 || y as usize >= self.hi {
                            continue;
                        }
                        let yoff = y as usize * self.wi;
                        for ox in 0..self.wo {
                            let xx = (ox * self.stride[2] + j) as isize - self.pad.w.0 as isize;
                            if xx >= 0 && (xx as usize) < self.wi {
                                col[row + oy * self.wo + ox] = src[yoff + xx as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Scalar>(&self, col: &[T], gx: &mut [T], frame: usize) {
        let n2 = self.n2();
        let plane = self.hi * self.wi;
        for ci in 0..self.c {
            let base = (ci * self.ti + frame) * plane;
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((ci * self.kh + i) * self.kw + j) * n2;
                    for oy in 0..self.ho {
                        let y = (oy * self.stride[1] + i) as isize - self.pad.h.0 as isize;
                        if y < 0 || y as usize >= self.hi {
                            continue;
                        }
                        let yoff = base + y as usize * self.wi;
                        for ox in 0..self.wo {
                            let xx = (ox * self.stride[2] + j) as isize - self.pad.w.0 as isize;
                            if xx >= 0 && (xx as usize) < self.wi {
                                gx[yoff + xx as usize] += col[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Weight slice of temporal tap `tau` as a contiguous `(O, K2)` matrix.
    fn tap<T: Scalar>(&self, w: &[T], tau: usize) -> Vec<T> {
        let k2 = self.k2();
        let spatial = self.kh * self.kw;
        let mut out = Vec::with_capacity(self.o * k2);
        for o in 0..self.o {
            for ci in 0..self.c {
                let base = ((o * self.c + ci) * self.kt + tau) * spatial;
                out.extend_from_slice(&w[base..base + spatial]);
            }
        }
        out
    }
}

/// Convolution with explicit per-axis zero padding.
///
/// Each output frame accumulates one matrix product per temporal tap whose
/// source frame lies inside the input; taps landing in padding are skipped.
pub fn conv3d_padded<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: [usize; 3],
    pad: Padding3d,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weights, stride, pad)?;
    if let Some(b) = bias {
        ensure!(
            b.shape() == [g.o],
            Error::shape("conv3d", "bias", g.o, format!("{:?}", b.shape()))
        );
    }
    let (k2, n2) = (g.k2(), g.n2());
    let frame_stride = n2;
    let chan_stride = g.to * n2;
    let mut out = vec![T::zero(); g.o * chan_stride];
    if let Some(b) = bias {
        for (o, &bv) in b.data().iter().enumerate() {
            out[o * chan_stride..(o + 1) * chan_stride].fill(bv);
        }
    }
    let taps: Vec<Vec<T>> = (0..g.kt).map(|tau| g.tap(weights.data(), tau)).collect();
    let mut cols: Vec<Option<Vec<T>>> = (0..g.ti).map(|_| None).collect();
    for t_out in 0..g.to {
        for (tau, tap) in taps.iter().enumerate() {
            let Some(src) = g.src_frame(t_out, tau) else {
                continue;
            };
            if cols[src].is_none() {
                cols[src] = Some(g.im2col(input.data(), src));
            }
            let col = cols[src].as_ref().unwrap();
            gemm(
                g.o,
                k2,
                n2,
                Mat::rows(tap, 0, k2),
                Mat::rows(col, 0, n2),
                T::one(),
                &mut out,
                t_out * frame_stride,
                chan_stride,
                1,
            );
        }
        // frames no later output can reach
        let first_needed = ((t_out + 1) * g.stride[0]) as isize - g.pad.t.0 as isize;
        for f in 0..first_needed.clamp(0, g.ti as isize) as usize {
            cols[f] = None;
        }
    }
    Tensor::new(vec![g.o, g.to, g.ho, g.wo], out)
}

/// Gradients of [`conv3d_padded`] with respect to input, weights and bias.
pub(crate) fn conv3d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: [usize; 3],
    pad: Padding3d,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(input, weights, stride, pad)?;
    ensure!(
        grad_out.shape() == [g.o, g.to, g.ho, g.wo],
        Error::shape("conv3d_backward", "grad", format!("{:?}", [g.o, g.to, g.ho, g.wo]), format!("{:?}", grad_out.shape()))
    );
    let (k2, n2) = (g.k2(), g.n2());
    let chan_stride = g.to * n2;
    let go = grad_out.data();

    let mut gb = vec![T::zero(); g.o];
    for (o, slot) in gb.iter_mut().enumerate() {
        *slot = go[o * chan_stride..(o + 1) * chan_stride].iter().copied().sum();
    }

    let taps: Vec<Vec<T>> = (0..g.kt).map(|tau| g.tap(weights.data(), tau)).collect();
    let mut gtaps: Vec<Vec<T>> = (0..g.kt).map(|_| vec![T::zero(); g.o * k2]).collect();
    let mut gcols: Vec<Option<Vec<T>>> = (0..g.ti).map(|_| None).collect();
    let mut gx = need_input.then(|| vec![T::zero(); input.numel()]);

    for src in 0..g.ti {
        let col = g.im2col(input.data(), src);
        for t_out in 0..g.to {
            for tau in 0..g.kt {
                if g.src_frame(t_out, tau) != Some(src) {
                    continue;
                }
                // dW_tau += G_t (O x N2) * col^T (N2 x K2)
                gemm(
                    g.o,
                    n2,
                    k2,
                    Mat::with_strides(go, t_out * n2, chan_stride, 1),
                    Mat::transposed(&col, 0, n2),
                    T::one(),
                    &mut gtaps[tau],
                    0,
                    k2,
                    1,
                );
                if gx.is_some() {
                    let gcol = gcols[src].get_or_insert_with(|| vec![T::zero(); k2 * n2]);
                    // dcol += W_tau^T (K2 x O) * G_t (O x N2)
                    gemm(
                        k2,
                        g.o,
                        n2,
                        Mat::transposed(&taps[tau], 0, k2),
                        Mat::with_strides(go, t_out * n2, chan_stride, 1),
                        T::one(),
                        gcol,
                        0,
                        n2,
                        1,
                    );
                }
            }
        }
        if let (Some(gx), Some(gcol)) = (gx.as_mut(), gcols[src].take()) {
            g.col2im(&gcol, gx, src);
        }
    }

    let spatial = g.kh * g.kw;
    let mut gw = vec![T::zero(); weights.numel()];
    for (tau, gt) in gtaps.iter().enumerate() {
        for o in 0..g.o {
            for ci in 0..g.c {
                let dst = ((o * g.c + ci) * g.kt + tau) * spatial;
                let src = (o * k2) + ci * spatial;
                gw[dst..dst + spatial].copy_from_slice(&gt[src..src + spatial]);
            }
        }
    }
    Ok((
        gx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
        Tensor::new(weights.shape().to_vec(), gw)?,
        Tensor::new(vec![g.o], gb)?,
    ))
}

/// Split `shape` around `axis` into `(outer, channels, inner)`.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    ensure!(
        axis < shape.len(),
        Error::invalid(op, format!("axis {axis} out of range for rank {}", shape.len()))
    );
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// RMS normalization over `axis`: `y_c = x_c / sqrt(mean_c(x^2) + eps) * gain_c`.
///
/// Statistics are per position; nothing is pooled across frames.
pub fn rms_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: Option<&Tensor<T>>,
    eps: T,
    axis: usize,
) -> Result<Tensor<T>> {
    ensure!(
        eps > T::zero(),
        Error::invalid("rms_norm", format!("eps must be > 0, got {eps}"))
    );
    let (outer, ch, inner) = split_axis("rms_norm", x.shape(), axis)?;
    if let Some(g) = gain {
        ensure!(
            g.shape() == [ch],
            Error::shape("rms_norm", format!("gain (axis {axis})"), ch, format!("{:?}", g.shape()))
        );
    }
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    let inv_c = T::one() / T::f(ch as f64);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * ch * inner + i;
            let ms: T = (0..ch).map(|c| xd[base + c * inner] * xd[base + c * inner]).sum::<T>()
                * inv_c;
            let r = (ms + eps).sqrt();
            for c in 0..ch {
                let g = gain.map_or(T::one(), |g| g.data()[c]);
                y[base + c * inner] = xd[base + c * inner] / r * g;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

pub(crate) fn rms_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: Option<&Tensor<T>>,
    eps: T,
    axis: usize,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let (outer, ch, inner) = split_axis("rms_norm", x.shape(), axis)?;
    let xd = x.data();
    let gyd = gy.data();
    let mut gx = vec![T::zero(); xd.len()];
    let mut gg = gain.map(|_| vec![T::zero(); ch]);
    let inv_c = T::one() / T::f(ch as f64);
    let mut a = vec![T::zero(); ch];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * ch * inner + i;
            let ms: T = (0..ch).map(|c| xd[base + c * inner] * xd[base + c * inner]).sum::<T>()
                * inv_c;
            let r = (ms + eps).sqrt();
            let mut dot = T::zero();
            for c in 0..ch {
                let idx = base + c * inner;
                let g = gain.map_or(T::one(), |g| g.data()[c]);
                if let Some(gg) = gg.as_mut() {
                    gg[c] += gyd[idx] * xd[idx] / r;
                }
                a[c] = gyd[idx] * g;
                dot += a[c] * xd[idx];
            }
            let k = dot * inv_c / (r * r * r);
            for c in 0..ch {
                let idx = base + c * inner;
                gx[idx] = a[c] / r - xd[idx] * k;
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        gg.map(|d| Tensor::new(vec![ch], d)).transpose()?,
    ))
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v / (T::one() + (-v).exp()))
}

/// Numerically stable softmax over each row of a `rows x cols` buffer, in place.
pub fn softmax_rows<T: Scalar>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v = *v / s;
        }
    }
}

/// `a (m, k) x b (k, n)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_rank("matmul", 2)?;
    b.expect_rank("matmul", 2)?;
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    ensure!(
        b.dim(0) == k,
        Error::shape("matmul", "inner dimension", k, b.dim(0))
    );
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, Mat::rows(a.data(), 0, k), Mat::rows(b.data(), 0, n), T::zero(), &mut out, 0, n, 1);
    Tensor::new(vec![m, n], out)
}

/// Affine map over the last axis: `y = x W^T + b` with `W (out, in)`.
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    weight.expect_rank("linear", 2)?;
    let (out_f, in_f) = (weight.dim(0), weight.dim(1));
    let last = *x.shape().last().unwrap();
    ensure!(
        last == in_f,
        Error::shape("linear", format!("axis {} (features)", x.rank() - 1), in_f, last)
    );
    if let Some(b) = bias {
        ensure!(
            b.shape() == [out_f],
            Error::shape("linear", "bias", out_f, format!("{:?}", b.shape()))
        );
    }
    let rows = x.numel() / in_f;
    let mut out = vec![T::zero(); rows * out_f];
    if let Some(b) = bias {
        for row in out.chunks_mut(out_f) {
            row.copy_from_slice(b.data());
        }
    }
    gemm(
        rows,
        in_f,
        out_f,
        Mat::rows(x.data(), 0, in_f),
        Mat::transposed(weight.data(), 0, in_f),
        T::one(),
        &mut out,
        0,
        out_f,
        1,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;
    Tensor::new(shape, out)
}

/// Returns `(dx, dW, db)`.
pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (out_f, in_f) = (weight.dim(0), weight.dim(1));
    let rows = x.numel() / in_f;
    let mut gx = vec![T::zero(); x.numel()];
    gemm(rows, out_f, in_f, Mat::rows(gy.data(), 0, out_f), Mat::rows(weight.data(), 0, in_f), T::zero(), &mut gx, 0, in_f, 1);
    let mut gw = vec![T::zero(); weight.numel()];
    gemm(out_f, rows, in_f, Mat::transposed(gy.data(), 0, out_f), Mat::rows(x.data(), 0, in_f), T::zero(), &mut gw, 0, in_f, 1);
    let mut gb = vec![T::zero(); out_f];
    for row in gy.data().chunks(out_f) {
        for (a, &b) in gb.iter_mut().zip(row) {
            *a += b;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
        Tensor::new(vec![out_f], gb)?,
    ))
}

/// Softmax probabilities saved by the batched attention forward pass.
pub(crate) struct AttentionSaved<T: Scalar> {
    pub probs: Vec<T>,
}

fn attention_dims<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    q.expect_rank("attention", 3)?;
    k.expect_rank("attention", 3)?;
    v.expect_rank("attention", 3)?;
    let (n, l, d) = (q.dim(0), q.dim(1), q.dim(2));
    let s = k.dim(1);
    ensure!(k.dim(0) == n, Error::shape("attention", "key batch", n, k.dim(0)));
    ensure!(v.dim(0) == n, Error::shape("attention", "value batch", n, v.dim(0)));
    ensure!(k.dim(2) == d, Error::shape("attention", "key axis 2 (head dim)", d, k.dim(2)));
    ensure!(v.dim(1) == s, Error::shape("attention", "value axis 1 (keys)", s, v.dim(1)));
    Ok((n, l, s, d, v.dim(2)))
}

/// `softmax(q k^T / sqrt(d)) v` independently for each leading batch index.
///
/// Shapes: `q (N, L, d)`, `k (N, S, d)`, `v (N, S, dv)` → `(N, L, dv)`.
pub fn attention_batched<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    Ok(attention_forward(q, k, v)?.0)
}

pub(crate) fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, AttentionSaved<T>)> {
    let (n, l, s, d, dv) = attention_dims(q, k, v)?;
    let scale = T::one() / T::f(d as f64).sqrt();
    let mut probs = vec![T::zero(); n * l * s];
    let mut out = vec![T::zero(); n * l * dv];
    for b in 0..n {
        let p = &mut probs[b * l * s..(b + 1) * l * s];
        gemm(l, d, s, Mat::rows(q.data(), b * l * d, d), Mat::transposed(k.data(), b * s * d, d), T::zero(), p, 0, s, 1);
        for x in p.iter_mut() {
            *x *= scale;
        }
        softmax_rows(p, s);
        gemm(l, s, dv, Mat::rows(&probs, b * l * s, s), Mat::rows(v.data(), b * s * dv, dv), T::zero(), &mut out, b * l * dv, dv, 1);
    }
    Ok((Tensor::new(vec![n, l, dv], out)?, AttentionSaved { probs }))
}

/// Returns `(dq, dk, dv)`.
pub(crate) fn attention_batched_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    saved: &AttentionSaved<T>,
    gout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, l, s, d, dv) = attention_dims(q, k, v)?;
    let scale = T::one() / T::f(d as f64).sqrt();
    let mut gq = vec![T::zero(); q.numel()];
    let mut gk = vec![T::zero(); k.numel()];
    let mut gv = vec![T::zero(); v.numel()];
    let mut dp = vec![T::zero(); l * s];
    for b in 0..n {
        let p = &saved.probs[b * l * s..(b + 1) * l * s];
        // dV = P^T dO
        gemm(s, l, dv, Mat::transposed(p, 0, s), Mat::rows(gout.data(), b * l * dv, dv), T::zero(), &mut gv, b * s * dv, dv, 1);
        // dP = dO V^T
        gemm(l, dv, s, Mat::rows(gout.data(), b * l * dv, dv), Mat::transposed(v.data(), b * s * dv, dv), T::zero(), &mut dp, 0, s, 1);
        // dS = P * (dP - rowsum(dP * P)), folded with the logit scale
        for r in 0..l {
            let row_p = &p[r * s..(r + 1) * s];
            let row_d = &mut dp[r * s..(r + 1) * s];
            let dot: T = row_p.iter().zip(row_d.iter()).map(|(&a, &b)| a * b).sum();
            for (dd, &pp) in row_d.iter_mut().zip(row_p) {
                *dd = pp * (*dd - dot) * scale;
            }
        }
        gemm(l, s, d, Mat::rows(&dp, 0, s), Mat::rows(k.data(), b * s * d, d), T::zero(), &mut gq, b * l * d, d, 1);
        gemm(s, l, d, Mat::transposed(&dp, 0, s), Mat::rows(q.data(), b * l * d, d), T::zero(), &mut gk, b * s * d, d, 1);
    }
    Ok((
        Tensor::new(q.shape().to_vec(), gq)?,
        Tensor::new(k.shape().to_vec(), gk)?,
        Tensor::new(v.shape().to_vec(), gv)?,
    ))
}

/// Single-head attention: `q (L, d)`, `k (S, d)`, `v (S, dv)` → `(L, dv)`.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    q.expect_rank("attention", 2)?;
    k.expect_rank("attention", 2)?;
    v.expect_rank("attention", 2)?;
    let lift = |t: &Tensor<T>| t.reshape(&[1, t.dim(0), t.dim(1)]);
    let out = attention_batched(&lift(q)?, &lift(k)?, &lift(v)?)?;
    out.into_reshape(&[q.dim(0), v.dim(1)])
}

/// Softmax weight matrix `(L, S)` that [`attention`] applies to `v`.
pub fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    q.expect_rank("attention", 2)?;
    k.expect_rank("attention", 2)?;
    let d = q.dim(1);
    ensure!(k.dim(1) == d, Error::shape("attention", "key axis 1 (head dim)", d, k.dim(1)));
    let kt = k.permute(&[1, 0])?;
    let mut logits = matmul(q, &kt)?;
    let scale = T::one() / T::f(d as f64).sqrt();
    let s = k.dim(0);
    for x in logits.data_mut() {
        *x *= scale;
    }
    softmax_rows(logits.data_mut(), s);
    Ok(logits)
}
