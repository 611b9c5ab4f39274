use crate::config::RunConfig;
use crate::error::{CliError, CliResult, Exit};
use crate::models::{key_set, read_tensor, vae_keys, vae_or_fresh};
use std::io::Write;
use vidflow_core::tensor::read_wvt;
use vidflow_core::vae::train::synthetic_video;
use vidflow_core::vae::Vae;
use vidflow_core::{rng, Tensor};

const KEYS: &[&str] = &["check.fixtures", "check.random_cases", "check.random_frames", "check.size"];
pub const TOLERANCE: f64 = 1e-5;

/// Fixtures compiled into the binary: a 17-frame clip and a single image.
pub const BUNDLED: [(&str, &[u8]); 2] = [
    ("clip17", include_bytes!("../../fixtures/clip17.wvt")),
    ("image1", include_bytes!("../../fixtures/image1.wvt")),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseReport {
    pub encode_max_abs: f64,
    pub decode_max_abs: f64,
}

impl CaseReport {
    pub fn max_abs(&self) -> f64 {
        self.encode_max_abs.max(self.decode_max_abs)
    }
}

/// Streamed against full-pass encode, then decode of the full-pass latent.
pub fn check_case(vae: &Vae, video: &Tensor) -> CliResult<CaseReport> {
    let full = vae.encode_full(video)?;
    let streamed = vae.stream_encode(video)?;
    let encode = full.mean.max_abs_diff(&streamed.mean)?.max(full.logvar.max_abs_diff(&streamed.logvar)?);
    let decode = vae.decode_full(&full.mean)?.max_abs_diff(&vae.stream_decode(&full.mean)?)?;
    Ok(CaseReport { encode_max_abs: encode, decode_max_abs: decode })
}

fn cases(cfg: &RunConfig) -> CliResult<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    match cfg.kv.get_list::<String>("check.fixtures")? {
        Some(paths) => {
            for p in paths {
                let path = std::path::PathBuf::from(&p);
                let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or(p);
                out.push((name, read_tensor(&path)?));
            }
        }
        None => {
            for (name, bytes) in BUNDLED {
                out.push((name.to_string(), read_wvt(&mut &bytes[..])?));
            }
        }
    }
    let random: usize = cfg.get_or("check.random_cases", 0)?;
    let size: usize = super::at_least(cfg, "check.size", 16, 1)?;
    let lengths: Vec<usize> = cfg.list_or("check.random_frames", vec![5, 9, 17])?;
    if random > 0 && lengths.is_empty() {
        return Err(CliError::input("check.random_frames must list at least one length"));
    }
    for i in 0..random {
        let frames = lengths[i % lengths.len()];
        let mut r = rng::seeded(rng::derive_seed(cfg.seed, 0x7663, i as u64));
        out.push((format!("random{i}"), synthetic_video(&mut r, frames, size)));
    }
    Ok(out)
}

pub fn run(cfg: &RunConfig, out: &mut dyn Write) -> CliResult<Exit> {
    cfg.check_keys("vae-check", &key_set(&[KEYS], vae_keys()))?;
    let vae = vae_or_fresh(cfg)?;
    let cases = cases(cfg)?;
    cfg.write_effective()?;
    let mut report = String::new();
    let mut worst: f64 = 0.0;
    for (name, video) in &cases {
        let r = check_case(&vae, video)?;
        let ok = r.max_abs() <= TOLERANCE;
        worst = worst.max(r.max_abs());
        let line = format!(
            "case={name} frames={} encode_max_abs={:.3e} decode_max_abs={:.3e} max_abs={:.3e} {}",
            video.dim(1),
            r.encode_max_abs,
            r.decode_max_abs,
            r.max_abs(),
            if ok { "PASS" } else { "FAIL" }
        );
        writeln!(out, "{line}")?;
        report.push_str(&line);
        report.push('\n');
    }
    let pass = worst <= TOLERANCE;
    let summary = format!("cases={} worst_max_abs={worst:.3e} {}", cases.len(), if pass { "PASS" } else { "FAIL" });
    writeln!(out, "{summary}")?;
    report.push_str(&summary);
    report.push('\n');
    std::fs::write(cfg.out_path("vae_check.txt"), report)?;
    Ok(if pass { Exit::Ok } else { Exit::NotMet })
}
