//! Task descriptor files:
//!
//! ```text
//! kind=first_last
//! frames=17
//! indices=0,16
//! frame.0=start.wvt
//! frame.16=end.wvt
//! ```
//!
//! Frame paths are relative to the descriptor's directory; each file holds a
//! `(3, H, W)` or `(3, 1, H, W)` tensor. `indices` may be omitted for `i2v`
//! and `first_last`.

use super::{ConditionTask, TaskKind};
use crate::error::{ensure, Error, Result};
use crate::kv::{join_list, KvMap};
use crate::tensor::read_wvt;
use crate::tensor::Tensor;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskFile {
    pub task: ConditionTask,
    /// One path per provided index, in index order.
    pub frame_paths: Vec<PathBuf>,
}

impl TaskFile {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let kv = KvMap::parse(text)?;
        let kind: TaskKind = kv.require::<String>("kind")?.parse()?;
        let frames: usize = kv.require("frames")?;
        let indices = match kv.get_list::<usize>("indices")? {
            Some(ix) => ix,
            None => match kind {
                TaskKind::ImageToVideo => vec![0],
                TaskKind::FirstLast => vec![0, frames.saturating_sub(1)],
                _ => return Err(Error::Format(format!("{kind} task needs an indices list"))),
            },
        };
        let task = ConditionTask::new(kind, indices, frames)?;
        let frame_paths = task
            .indices()
            .iter()
            .map(|i| {
                kv.raw(&format!("frame.{i}"))
                    .map(|p| base.join(p))
                    .ok_or_else(|| Error::Format(format!("missing key frame.{i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { task, frame_paths })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Descriptor text with paths as given (relative paths stay relative).
    pub fn serialize(&self) -> String {
        let mut kv = KvMap::new();
        kv.set("kind", self.task.kind());
        kv.set("frames", self.task.frames());
        kv.set("indices", join_list(self.task.indices()));
        for (i, p) in self.task.indices().iter().zip(&self.frame_paths) {
            kv.set(format!("frame.{i}"), p.display());
        }
        kv.serialize()
    }

    /// Reads every referenced frame as `(3, H, W)`; all must share one size.
    pub fn read_frames(&self) -> Result<Vec<Tensor>> {
        let mut out: Vec<Tensor> = Vec::with_capacity(self.frame_paths.len());
        for p in &self.frame_paths {
            let t = read_wvt(&mut std::io::BufReader::new(std::fs::File::open(p)?))?;
            let t = match t.shape() {
                [3, h, w] => t.reshape(&[3, *h, *w])?,
                [3, 1, h, w] => t.reshape(&[3, *h, *w])?,
                s => return Err(Error::Format(format!("{}: expected a (3, H, W) frame, got {s:?}", p.display()))),
            };
            if let Some(first) = out.first() {
                ensure!(
                    first.shape() == t.shape(),
                    Error::Format(format!("{}: frame size {:?} differs from {:?}", p.display(), t.shape(), first.shape()))
                );
            }
            out.push(t);
        }
        Ok(out)
    }
}
