//! ASCII portable-pixmap (P3) frames.

use crate::error::{CliError, CliResult};
use std::fmt::Write as _;
use std::path::Path;
use vidflow_core::Tensor;

/// `[-1, 1]` to `0..=255`, clamped.
pub fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// P3 text for a `(3, H, W)` frame.
pub fn encode_p3(frame: &Tensor) -> CliResult<String> {
    let [3, h, w] = *frame.shape() else {
        return Err(CliError::input(format!("P3 export needs a (3, H, W) frame, got {:?}", frame.shape())));
    };
    let plane = h * w;
    let d = frame.data();
    let mut s = format!("P3\n{w} {h}\n255\n");
    for y in 0..h {
        let row: Vec<String> = (0..w)
            .map(|x| {
                let p = y * w + x;
                format!("{} {} {}", to_byte(d[p]), to_byte(d[plane + p]), to_byte(d[2 * plane + p]))
            })
            .collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    Ok(s)
}

/// Writes each frame of a `(3, T, H, W)` video as `<stem>_<t>.ppm`; returns the file names.
pub fn write_video(dir: &Path, stem: &str, video: &Tensor) -> CliResult<Vec<String>> {
    let [3, t, h, w] = *video.shape() else {
        return Err(CliError::input(format!("P3 export needs a (3, T, H, W) video, got {:?}", video.shape())));
    };
    let mut names = Vec::with_capacity(t);
    for f in 0..t {
        let frame = frame_of(video, f)?;
        let name = format!("{stem}_{f:03}.ppm");
        std::fs::write(dir.join(&name), encode_p3(&frame)?)?;
        names.push(name);
    }
    debug_assert_eq!(video.numel(), 3 * t * h * w);
    Ok(names)
}

/// Frame `f` of a `(3, T, H, W)` video as `(3, H, W)`.
pub fn frame_of(video: &Tensor, f: usize) -> CliResult<Tensor> {
    let [c, _, h, w] = *video.shape() else {
        return Err(CliError::input("expected a (C, T, H, W) video"));
    };
    Ok(video.narrow(1, f, 1)?.reshape(&[c, h, w])?)
}
