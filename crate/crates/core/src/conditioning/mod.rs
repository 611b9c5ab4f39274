//! Mask-guided frame conditioning and concept decoupling.
//!
//! Frame counts here are total pixel frames `F = 1 + T`; the latent track has
//! `1 + (F - 1) / s` frames. Provided frames sit at their indices in a
//! zero-filled guidance video, a binary mask marks them, and the conditioned
//! model input stacks `[z_t; z_c; m]` along channels (`2c + s`).

mod task;

pub use task::TaskFile;

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;
use crate::vae::Vae;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    ImageToVideo,
    FirstLast,
    Continuation,
    Interpolation,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::ImageToVideo,
        TaskKind::FirstLast,
        TaskKind::Continuation,
        TaskKind::Interpolation,
    ];
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::ImageToVideo => "i2v",
            TaskKind::FirstLast => "first_last",
            TaskKind::Continuation => "continuation",
            TaskKind::Interpolation => "interpolation",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "i2v" | "image_to_video" => Ok(TaskKind::ImageToVideo),
            "first_last" => Ok(TaskKind::FirstLast),
            "continuation" => Ok(TaskKind::Continuation),
            "interpolation" => Ok(TaskKind::Interpolation),
            _ => Err(Error::invalid("task kind", format!("unknown kind {s:?}"))),
        }
    }
}

/// Which of `frames` pixel frames are given; indices are sorted and unique.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionTask {
    kind: TaskKind,
    indices: Vec<usize>,
    frames: usize,
}

impl ConditionTask {
    pub fn new(kind: TaskKind, indices: Vec<usize>, frames: usize) -> Result<Self> {
        ensure!(frames >= 1, Error::invalid("condition task", "frame count must be >= 1"));
        ensure!(
            indices.windows(2).all(|w| w[0] < w[1]),
            Error::invalid("condition task", format!("indices {indices:?} are not sorted and unique"))
        );
        if let Some(&bad) = indices.iter().find(|&&i| i >= frames) {
            return Err(Error::invalid(
                "condition task",
                format!("index {bad} out of range for {frames} frames"),
            ));
        }
        let ok = match kind {
            TaskKind::ImageToVideo => indices == [0],
            TaskKind::FirstLast => frames >= 2 && indices == [0, frames - 1],
            TaskKind::Continuation => !indices.is_empty() && indices.iter().enumerate().all(|(i, &j)| i == j),
            TaskKind::Interpolation => true,
        };
        ensure!(
            ok,
            Error::invalid(
                "condition task",
                format!("indices {indices:?} do not fit a {kind} task over {frames} frames")
            )
        );
        Ok(Self { kind, indices, frames })
    }

    pub fn image_to_video(frames: usize) -> Result<Self> {
        Self::new(TaskKind::ImageToVideo, vec![0], frames)
    }

    pub fn first_last(frames: usize) -> Result<Self> {
        Self::new(TaskKind::FirstLast, vec![0, frames.saturating_sub(1)], frames)
    }

    /// The first `k` frames are given.
    pub fn continuation(k: usize, frames: usize) -> Result<Self> {
        Self::new(TaskKind::Continuation, (0..k).collect(), frames)
    }

    pub fn interpolation(indices: Vec<usize>, frames: usize) -> Result<Self> {
        Self::new(TaskKind::Interpolation, indices, frames)
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn is_provided(&self, frame: usize) -> bool {
        self.indices.binary_search(&frame).is_ok()
    }
}

/// `(3, F, H, W)` video holding each provided `(3, H, W)` frame at its index,
/// zeros elsewhere.
pub fn build_guidance(task: &ConditionTask, provided: &[Tensor], height: usize, width: usize) -> Result<Tensor> {
    ensure!(
        provided.len() == task.indices.len(),
        Error::invalid(
            "build_guidance",
            format!("{} frames given for {} indices", provided.len(), task.indices.len())
        )
    );
    let plane = height * width;
    let f = task.frames;
    let mut out = Tensor::zeros(&[3, f, height, width]);
    for (frame, &idx) in provided.iter().zip(&task.indices) {
        let want = [3, height, width];
        ensure!(
            frame.shape() == want,
            Error::shape("build_guidance", format!("frame {idx}"), format!("{want:?}"), format!("{:?}", frame.shape()))
        );
        for c in 0..3 {
            let dst = (c * f + idx) * plane;
            out.data_mut()[dst..dst + plane].copy_from_slice(&frame.data()[c * plane..(c + 1) * plane]);
        }
    }
    Ok(out)
}

/// Binary frame mask in both layouts: `full` is `(1, F, h, w)`, `folded` is
/// `(s, t_lat, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTensor {
    pub full: Tensor,
    pub folded: Tensor,
}

pub fn latent_frames(frames: usize, s: usize) -> Result<usize> {
    ensure!(s >= 1, Error::invalid("mask", "temporal stride must be >= 1"));
    ensure!(
        frames >= 1 && (frames - 1) % s == 0,
        Error::invalid("mask", format!("frame count {frames} is not 1 + a multiple of {s}"))
    );
    Ok(1 + (frames - 1) / s)
}

/// Ones at provided frames, built directly at the latent grid `(h, w)`.
pub fn build_mask(task: &ConditionTask, h: usize, w: usize, s: usize) -> Result<MaskTensor> {
    latent_frames(task.frames, s)?;
    let plane = h * w;
    let full = Tensor::from_fn(&[1, task.frames, h, w], |i| {
        if task.is_provided(i / plane) {
            1.0
        } else {
            0.0
        }
    });
    let folded = fold_mask(&full, s)?;
    Ok(MaskTensor { full, folded })
}

/// `(1, F, h, w)` to `(s, t_lat, h, w)`. Latent frame 0 carries mask frame 0
/// in all `s` slots; latent frame `j > 0` carries frames `1 + s(j-1) ..= s j`
/// in slot order.
pub fn fold_mask(mask: &Tensor, s: usize) -> Result<Tensor> {
    mask.expect_rank("fold_mask", 4)?;
    ensure!(mask.dim(0) == 1, Error::shape("fold_mask", "axis 0 (channels)", 1, mask.dim(0)));
    let f = mask.dim(1);
    let t = latent_frames(f, s)?;
    let plane = mask.dim(2) * mask.dim(3);
    let src = mask.data();
    Ok(Tensor::from_fn(&[s, t, mask.dim(2), mask.dim(3)], |i| {
        let p = i % plane;
        let j = (i / plane) % t;
        let slot = i / (plane * t);
        let frame = if j == 0 { 0 } else { 1 + s * (j - 1) + slot };
        src[frame * plane + p]
    }))
}

/// Inverse of [`fold_mask`]; frame 0 is read from slot 0 of latent frame 0.
pub fn unfold_mask(folded: &Tensor) -> Result<Tensor> {
    folded.expect_rank("unfold_mask", 4)?;
    let (s, t) = (folded.dim(0), folded.dim(1));
    let plane = folded.dim(2) * folded.dim(3);
    let f = 1 + s * (t - 1);
    let src = folded.data();
    Ok(Tensor::from_fn(&[1, f, folded.dim(2), folded.dim(3)], |i| {
        let p = i % plane;
        let frame = i / plane;
        let (slot, j) = if frame == 0 { (0, 0) } else { ((frame - 1) % s, 1 + (frame - 1) / s) };
        src[(slot * t + j) * plane + p]
    }))
}

/// Condition latent: the posterior mean of the guidance video.
pub fn encode_condition(guidance: &Tensor, vae: &Vae) -> Result<Tensor> {
    Ok(vae.encode_full(guidance)?.mean)
}

/// `[z_t; z_c; m]` along channels, giving `2c + s` channels.
pub fn assemble_input(z_t: &Tensor, z_c: &Tensor, m: &Tensor) -> Result<Tensor> {
    for (name, x) in [("z_t", z_t), ("z_c", z_c), ("m", m)] {
        x.expect_rank("assemble_input", 4)?;
        ensure!(
            x.shape()[1..] == z_t.shape()[1..],
            Error::shape(
                "assemble_input",
                format!("axes 1-3 of {name}"),
                format!("{:?}", &z_t.shape()[1..]),
                format!("{:?}", &x.shape()[1..])
            )
        );
    }
    ensure!(
        z_c.dim(0) == z_t.dim(0),
        Error::shape("assemble_input", "axis 0 (channels) of z_c", z_t.dim(0), z_c.dim(0))
    );
    Tensor::cat(&[z_t, z_c, m], 0)
}

/// Splits an assembled input back into `(z_t, z_c, m)`.
pub fn split_input(x: &Tensor, c: usize, s: usize) -> Result<(Tensor, Tensor, Tensor)> {
    x.expect_rank("split_input", 4)?;
    ensure!(x.dim(0) == 2 * c + s, Error::shape("split_input", "axis 0 (channels)", 2 * c + s, x.dim(0)));
    Ok((x.narrow(0, 0, c)?, x.narrow(0, c, c)?, x.narrow(0, 2 * c, s)?))
}

/// Channel count of an assembled input.
pub fn conditioned_channels(latent_channels: usize, s: usize) -> usize {
    2 * latent_channels + s
}

/// `(F·M, F·(1−M))`: the region to regenerate and the region to keep. `M`
/// has one channel (broadcast) or as many as `F`.
pub fn concept_decouple(frames: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
    frames.expect_rank("concept_decouple", 4)?;
    mask.expect_rank("concept_decouple", 4)?;
    ensure!(
        frames.shape()[1..] == mask.shape()[1..],
        Error::shape(
            "concept_decouple",
            "axes 1-3 (frames, height, width)",
            format!("{:?}", &frames.shape()[1..]),
            format!("{:?}", &mask.shape()[1..])
        )
    );
    let n = mask.numel();
    let per_channel = match mask.dim(0) {
        1 => n,
        c if c == frames.dim(0) => frames.numel(),
        c => return Err(Error::shape("concept_decouple", "axis 0 of mask", format!("1 or {}", frames.dim(0)), c)),
    };
    let (fd, md) = (frames.data(), mask.data());
    let mut fc = frames.clone();
    let mut fk = frames.clone();
    for (i, &x) in fd.iter().enumerate() {
        let m = md[i % per_channel];
        // Binary masks keep the split exact: one side gets x, the other 0.
        fc.data_mut()[i] = x * m;
        fk.data_mut()[i] = x * (1.0 - m);
    }
    Ok((fc, fk))
}

/// Appends a global embedding `(B, D)` as one extra context token to
/// `(B, L, D)` text context.
pub fn append_global_context(text: &Tensor, global: &Tensor) -> Result<Tensor> {
    text.expect_rank("append_global_context", 3)?;
    global.expect_rank("append_global_context", 2)?;
    ensure!(
        global.dim(0) == text.dim(0) && global.dim(1) == text.dim(2),
        Error::shape(
            "append_global_context",
            "global embedding",
            format!("[{}, {}]", text.dim(0), text.dim(2)),
            format!("{:?}", global.shape())
        )
    );
    let g = global.reshape(&[global.dim(0), 1, global.dim(1)])?;
    Tensor::cat(&[text, &g], 1)
}
