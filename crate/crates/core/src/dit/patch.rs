//! `(1, 2, 2)` patch rearrangement between latent grids and token rows.
//!
//! Tokens are ordered frame-major, then patch row, then patch column; each
//! token's features are ordered `(channel, dy, dx)`.

use crate::autograd::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PATCH: [usize; 3] = [1, 2, 2];

/// Token count for a latent grid `(frames, h, w)`; odd `h` or `w` is rejected.
pub fn token_count(frames: usize, h: usize, w: usize) -> Result<usize> {
    ensure!(
        h % PATCH[1] == 0,
        Error::shape("patchify", "axis 2 (height)", "an even size", h)
    );
    ensure!(
        w % PATCH[2] == 0,
        Error::shape("patchify", "axis 3 (width)", "an even size", w)
    );
    Ok(frames * (h / PATCH[1]) * (w / PATCH[2]))
}

fn grid(op: &'static str, shape: &[usize]) -> Result<[usize; 5]> {
    ensure!(
        shape.len() == 5,
        Error::shape(op, "rank", "5 (B, C, frames, H, W)", shape.len())
    );
    token_count(shape[2], shape[3], shape[4])?;
    Ok([shape[0], shape[1], shape[2], shape[3], shape[4]])
}

/// `(B, C, F, H, W)` → `(B, L, 4C)`.
pub fn patchify_graph<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let [b, c, f, h, w] = grid("patchify", g.shape(x))?;
    let r = g.reshape(x, &[b, c, f, h / 2, 2, w / 2, 2])?;
    let p = g.permute(r, &[0, 2, 3, 5, 1, 4, 6])?;
    g.reshape(p, &[b, f * (h / 2) * (w / 2), c * 4])
}

/// `(B, L, 4C)` → `(B, C, F, H, W)` for the given latent grid.
pub fn unpatchify_graph<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    channels: usize,
    frames: usize,
    h: usize,
    w: usize,
) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let l = token_count(frames, h, w)?;
    ensure!(
        s.len() == 3 && s[1] == l && s[2] == channels * 4,
        Error::shape("unpatchify", "tokens", format!("(B, {l}, {})", channels * 4), format!("{s:?}"))
    );
    let r = g.reshape(tokens, &[s[0], frames, h / 2, w / 2, channels, 2, 2])?;
    let p = g.permute(r, &[0, 4, 1, 2, 5, 3, 6])?;
    g.reshape(p, &[s[0], channels, frames, h, w])
}

/// Unbatched `(C, F, H, W)` → `(L, 4C)`.
pub fn patchify(latent: &Tensor) -> Result<Tensor> {
    latent.expect_rank("patchify", 4)?;
    let mut shape = vec![1];
    shape.extend_from_slice(latent.shape());
    let mut g = Graph::inference();
    let x = g.input(latent.reshape(&shape)?);
    let t = patchify_graph(&mut g, x)?;
    let v = g.value(t);
    v.reshape(&v.shape()[1..])
}

/// `(L, 4C)` → `(C, F, H, W)` with `target = [C, F, H, W]`.
pub fn unpatchify(tokens: &Tensor, target: [usize; 4]) -> Result<Tensor> {
    tokens.expect_rank("unpatchify", 2)?;
    let mut g = Graph::inference();
    let x = g.input(tokens.reshape(&[1, tokens.dim(0), tokens.dim(1)])?);
    let [c, f, h, w] = target;
    let y = unpatchify_graph(&mut g, x, c, f, h, w)?;
    g.value(y).reshape(&target)
}
