//! Time-conditioned modulation. One SiLU → Linear MLP maps the time embedding
//! to six width-`D` vectors; each block adds its own learned bias.

use crate::error::{ensure, Error, Result};
use crate::tensor::{linear, silu, Tensor};
use std::fmt;
use std::str::FromStr;

pub const GROUPS: usize = 6;

/// Which blocks share a modulation MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdaLnSharing {
    /// One MLP for every block.
    Full,
    /// The first `depth / 2` blocks share one MLP; each later block has its own.
    Half,
    /// One MLP per block.
    None,
}

impl AdaLnSharing {
    pub const ALL: [AdaLnSharing; 3] = [AdaLnSharing::Full, AdaLnSharing::Half, AdaLnSharing::None];

    /// MLP index used by each block.
    pub fn assignment(self, depth: usize) -> Vec<usize> {
        match self {
            AdaLnSharing::Full => vec![0; depth],
            AdaLnSharing::None => (0..depth).collect(),
            AdaLnSharing::Half => {
                let shared = depth / 2;
                let first_own = usize::from(shared > 0);
                (0..depth)
                    .map(|i| if i < shared { 0 } else { first_own + i - shared })
                    .collect()
            }
        }
    }

    pub fn mlp_count(self, depth: usize) -> usize {
        self.assignment(depth).into_iter().max().map_or(0, |m| m + 1)
    }
}

impl fmt::Display for AdaLnSharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdaLnSharing::Full => "full",
            AdaLnSharing::Half => "half",
            AdaLnSharing::None => "none",
        })
    }
}

impl FromStr for AdaLnSharing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AdaLnSharing::Full),
            "half" => Ok(AdaLnSharing::Half),
            "none" => Ok(AdaLnSharing::None),
            _ => Err(Error::invalid("adaln_sharing", format!("unknown mode {s:?} (full, half, none)"))),
        }
    }
}

/// The six modulation vectors, each `(N, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationParams {
    pub shift_attn: Tensor,
    pub scale_attn: Tensor,
    pub gate_attn: Tensor,
    pub shift_mlp: Tensor,
    pub scale_mlp: Tensor,
    pub gate_mlp: Tensor,
}

impl ModulationParams {
    /// Split `(N, 6D)` into the six groups.
    pub fn split(all: &Tensor) -> Result<Self> {
        all.expect_rank("modulation", 2)?;
        ensure!(
            all.dim(1) % GROUPS == 0,
            Error::shape("modulation", "axis 1 (features)", "a multiple of 6", all.dim(1))
        );
        let d = all.dim(1) / GROUPS;
        let part = |k: usize| all.narrow(1, k * d, d);
        Ok(Self {
            shift_attn: part(0)?,
            scale_attn: part(1)?,
            gate_attn: part(2)?,
            shift_mlp: part(3)?,
            scale_mlp: part(4)?,
            gate_mlp: part(5)?,
        })
    }

    /// `(N, 6D)` in group order.
    pub fn concat(&self) -> Result<Tensor> {
        Tensor::cat(
            &[
                &self.shift_attn,
                &self.scale_attn,
                &self.gate_attn,
                &self.shift_mlp,
                &self.scale_mlp,
                &self.gate_mlp,
            ],
            1,
        )
    }

    pub fn groups(&self) -> [&Tensor; GROUPS] {
        [
            &self.shift_attn,
            &self.scale_attn,
            &self.gate_attn,
            &self.shift_mlp,
            &self.scale_mlp,
            &self.gate_mlp,
        ]
    }
}

/// `Linear(SiLU(e)) + block_bias` for `e (N, D)`, `weight (6D, D)`, `mlp_bias (6D)`, `block_bias (6D)`.
pub fn shared_adaln(
    time_embedding: &Tensor,
    weight: &Tensor,
    mlp_bias: &Tensor,
    block_bias: &Tensor,
) -> Result<ModulationParams> {
    time_embedding.expect_rank("shared_adaln", 2)?;
    let d = time_embedding.dim(1);
    ensure!(
        weight.shape() == [GROUPS * d, d],
        Error::shape("shared_adaln", "mlp weight", format!("[{}, {d}]", GROUPS * d), format!("{:?}", weight.shape()))
    );
    ensure!(
        block_bias.shape() == [GROUPS * d],
        Error::shape("shared_adaln", "block bias", GROUPS * d, format!("{:?}", block_bias.shape()))
    );
    let mut m = linear(&silu(time_embedding), weight, Some(mlp_bias))?;
    let w = GROUPS * d;
    for row in m.data_mut().chunks_mut(w) {
        for (v, &b) in row.iter_mut().zip(block_bias.data()) {
            *v += b;
        }
    }
    ModulationParams::split(&m)
}
