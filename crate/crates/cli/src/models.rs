//! Checkpoint and tensor file plumbing shared by the commands.

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use vidflow_core::dit::{Dit, DitConfig};
use vidflow_core::flow::VelocityField;
use vidflow_core::tensor::{read_wvt, write_wvt};
use vidflow_core::vae::{Vae, VaeConfig};
use vidflow_core::{Result, Tensor};

fn open(path: &Path, what: &str) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::input(format!("{what} {}: {e}", path.display())))
}

fn located(path: &Path, e: vidflow_core::Error) -> CliError {
    let mut c = CliError::from(e);
    c.message = format!("{}: {}", path.display(), c.message);
    c
}

pub fn read_tensor(path: &Path) -> CliResult<Tensor> {
    read_wvt(&mut open(path, "tensor")?).map_err(|e| located(path, e))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_wvt(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_dit(path: &Path) -> CliResult<Dit> {
    Dit::load(&mut open(path, "DiT checkpoint")?).map_err(|e| located(path, e))
}

pub fn save_dit(path: &Path, dit: &Dit) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    dit.save(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_vae(path: &Path) -> CliResult<Vae> {
    Vae::load(&mut open(path, "VAE checkpoint")?).map_err(|e| located(path, e))
}

/// `checkpoint` when set, else a freshly initialized DiT from the `dit.` keys.
pub fn dit_or_fresh(cfg: &RunConfig, key: &str) -> CliResult<Dit> {
    match cfg.path(key) {
        Some(p) => load_dit(&p),
        None => Ok(Dit::new(DitConfig::from_kv(&cfg.kv)?, cfg.seed)?),
    }
}

/// Keys read by [`vae_or_fresh`].
pub fn vae_keys() -> Vec<String> {
    std::iter::once("vae.checkpoint".to_string()).chain(VaeConfig::KEYS.iter().map(|k| format!("vae.{k}"))).collect()
}

/// Joins fixed key lists with owned ones for [`RunConfig::check_keys`].
pub fn key_set(lists: &[&[&str]], owned: Vec<String>) -> Vec<String> {
    lists.iter().flat_map(|l| l.iter().map(|k| k.to_string())).chain(owned).collect()
}

/// `vae.checkpoint` when set, else a freshly initialized VAE from the `vae.` keys.
pub fn vae_or_fresh(cfg: &RunConfig) -> CliResult<Vae> {
    match cfg.path("vae.checkpoint") {
        Some(p) => load_vae(&p),
        None => {
            let mut section = cfg.kv.section("vae");
            section.remove("checkpoint");
            Ok(Vae::new(VaeConfig::from_kv(&section)?, cfg.seed)?)
        }
    }
}

/// A DiT whose input carries a fixed condition latent and mask alongside
/// the noisy latent, so it can be sampled like an unconditioned field.
pub struct Conditioned<'a> {
    pub dit: &'a Dit,
    /// `(C, F, H, W)`.
    pub z_c: Tensor,
    /// `(s, F, H, W)`.
    pub mask: Tensor,
}

impl Conditioned<'_> {
    /// `[x; z_c; m]` along channels for a batched `x (B, C, F, H, W)`.
    pub fn assemble(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.dim(0);
        let cond = Tensor::cat(&[&self.z_c, &self.mask], 0)?;
        let mut shape = vec![1];
        shape.extend_from_slice(cond.shape());
        let cond = cond.into_reshape(&shape)?;
        let parts: Vec<&Tensor> = std::iter::repeat_n(&cond, b).collect();
        let cond = Tensor::cat(&parts, 0)?;
        Tensor::cat(&[x, &cond], 1)
    }
}

impl VelocityField for Conditioned<'_> {
    fn velocity(&self, x: &Tensor, t: f64, ctx: Option<&Tensor>) -> Result<Tensor> {
        self.dit.velocity(&self.assemble(x)?, t, ctx)
    }
}
