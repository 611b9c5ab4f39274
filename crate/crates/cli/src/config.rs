//! Effective run configuration: the `--config` file, then `--set` overrides,
//! then `--seed`. Relative paths resolve against the working directory.

use crate::error::{CliError, CliResult};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use vidflow_core::KvMap;

pub const DEFAULT_OUT: &str = "out";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kv: KvMap,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn load(config: Option<&Path>, sets: &[String], seed: Option<u64>, out: Option<&Path>) -> CliResult<Self> {
        let mut kv = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
                KvMap::parse(&text).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?
            }
            None => KvMap::new(),
        };
        for s in sets {
            kv.set_override(s)?;
        }
        let seed = match seed {
            Some(s) => s,
            None => kv.get_or("seed", 0u64)?,
        };
        kv.set("seed", seed);
        let out = match out {
            Some(p) => p.to_path_buf(),
            None => PathBuf::from(kv.raw("out").unwrap_or(DEFAULT_OUT)),
        };
        Ok(Self { kv, seed, out })
    }

    pub fn from_kv(kv: KvMap, out: &Path) -> CliResult<Self> {
        let seed = kv.get_or("seed", 0u64)?;
        Ok(Self { kv, seed, out: out.to_path_buf() })
    }

    pub fn get_or<V: FromStr>(&self, key: &str, default: V) -> CliResult<V> {
        Ok(self.kv.get_or(key, default)?)
    }

    pub fn get<V: FromStr>(&self, key: &str) -> CliResult<Option<V>> {
        Ok(self.kv.get(key)?)
    }

    pub fn list_or<V: FromStr>(&self, key: &str, default: Vec<V>) -> CliResult<Vec<V>> {
        Ok(self.kv.get_list(key)?.unwrap_or(default))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.kv.raw(key).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    pub fn text(&self, key: &str, default: &str) -> String {
        self.kv.raw(key).unwrap_or(default).to_string()
    }

    /// Rejects keys outside `known` (besides `seed` and `out`).
    pub fn check_keys<S: AsRef<str>>(&self, command: &str, known: &[S]) -> CliResult<()> {
        for k in self.kv.keys() {
            let ok = k == "seed" || k == "out" || known.iter().any(|p| p.as_ref() == k);
            if !ok {
                return Err(CliError::input(format!("unknown config key {k:?} for {command}")));
            }
        }
        Ok(())
    }

    /// Writes the effective configuration (without `out`) as `run.cfg`.
    pub fn write_effective(&self) -> CliResult<()> {
        let mut kv = self.kv.clone();
        kv.remove("out");
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(self.out.join("run.cfg"), kv.serialize())?;
        Ok(())
    }

    pub fn out_path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.out.join(name)
    }
}

pub fn parse_shape<const N: usize>(cfg: &RunConfig, key: &str, default: [usize; N]) -> CliResult<[usize; N]> {
    let v: Vec<usize> = cfg.list_or(key, default.to_vec())?;
    let arr: [usize; N] = v
        .as_slice()
        .try_into()
        .map_err(|_| CliError::input(format!("{key}: expected {N} comma-separated sizes, got {}", v.len())))?;
    if arr.contains(&0) {
        return Err(CliError::input(format!("{key}: sizes must be >= 1")));
    }
    Ok(arr)
}
