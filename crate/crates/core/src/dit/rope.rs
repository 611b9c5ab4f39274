//! Rotary position tables factorized over the (frame, row, column) token grid.

use crate::error::{ensure, Error, Result};
use crate::tensor::{Scalar, Tensor};

const BASE: f64 = 10_000.0;

/// Rotation pairs given to the (frame, row, column) axes for a head width.
/// Rows and columns get a third of the pairs each and frames the rest.
pub fn axis_pairs(head_dim: usize) -> [usize; 3] {
    let pairs = head_dim / 2;
    let hw = pairs / 3;
    [pairs - 2 * hw, hw, hw]
}

/// `(cos, sin)` tables of shape `(L, head_dim / 2)` for a `(f, h, w)` token grid.
pub fn tables<T: Scalar>(head_dim: usize, grid: [usize; 3]) -> Result<(Tensor<T>, Tensor<T>)> {
    ensure!(
        head_dim % 2 == 0 && head_dim >= 2,
        Error::invalid("rope", format!("head width must be even, got {head_dim}"))
    );
    let split = axis_pairs(head_dim);
    let pairs = head_dim / 2;
    let l = grid.iter().product::<usize>();
    let mut angles = vec![0.0f64; l * pairs];
    for pos in 0..l {
        let coord = [pos / (grid[1] * grid[2]), (pos / grid[2]) % grid[1], pos % grid[2]];
        let mut k = 0;
        for (axis, &n) in split.iter().enumerate() {
            for i in 0..n {
                let freq = BASE.powf(-(i as f64) / n as f64);
                angles[pos * pairs + k] = coord[axis] as f64 * freq;
                k += 1;
            }
        }
    }
    let cos = Tensor::new(vec![l, pairs], angles.iter().map(|a| T::f(a.cos())).collect())?;
    let sin = Tensor::new(vec![l, pairs], angles.iter().map(|a| T::f(a.sin())).collect())?;
    Ok((cos, sin))
}
