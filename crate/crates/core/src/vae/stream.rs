//! Chunked causal streaming. Each call processes one chunk (one latent frame)
//! and keeps only the per-layer frame caches between calls, so memory does
//! not grow with the total video length.

use super::layers::{Cursor, Pass, SlotKind};
use super::{plan_chunks, Posterior, Vae, VaeConfig};
use crate::autograd::Graph;
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamDirection {
    Encode,
    Decode,
}

#[derive(Debug, Clone)]
pub struct ChunkStreamState {
    config: VaeConfig,
    direction: StreamDirection,
    cursor: Cursor<f32>,
    frames_consumed: usize,
    /// `(H, W)` fixed by the first chunk.
    grid: Option<(usize, usize)>,
}

impl ChunkStreamState {
    pub fn new(config: &VaeConfig, direction: StreamDirection) -> Self {
        Self {
            config: config.clone(),
            direction,
            cursor: Cursor::new(),
            frames_consumed: 0,
            grid: None,
        }
    }

    pub fn chunk_index(&self) -> usize {
        self.cursor.chunk
    }

    /// Input frames consumed so far (pixel frames when encoding, latent frames when decoding).
    pub fn frames_consumed(&self) -> usize {
        self.frames_consumed
    }

    /// Frame count the next chunk must have.
    pub fn expected_chunk_frames(&self) -> usize {
        match (self.direction, self.cursor.chunk) {
            (StreamDirection::Decode, _) | (_, 0) => 1,
            _ => self.config.temporal_stride(),
        }
    }

    /// Cached frame count per layer, in layer order.
    pub fn cache_report(&self) -> Vec<(SlotKind, usize)> {
        self.cursor
            .slots
            .iter()
            .map(|(k, t)| (*k, t.as_ref().map_or(0, |t| t.dim(1))))
            .collect()
    }

    /// Bytes held by the frame caches.
    pub fn cache_bytes(&self) -> usize {
        self.cursor
            .slots
            .iter()
            .filter_map(|(_, t)| t.as_ref())
            .map(|t| t.numel() * 4)
            .sum()
    }

    fn check_chunk(&mut self, vae: &Vae, chunk: &Tensor, direction: StreamDirection) -> Result<()> {
        ensure!(
            vae.config == self.config,
            Error::invalid("stream", "model config differs from the stream's config")
        );
        ensure!(
            self.direction == direction,
            Error::invalid("stream", format!("state was created for {:?}", self.direction))
        );
        chunk.expect_rank("stream", 4)?;
        let channels = match direction {
            StreamDirection::Encode => self.config.in_channels,
            StreamDirection::Decode => self.config.latent_channels,
        };
        ensure!(
            chunk.dim(0) == channels,
            Error::shape("stream", "axis 0 (channels)", channels, chunk.dim(0))
        );
        let want = self.expected_chunk_frames();
        ensure!(
            chunk.dim(1) == want,
            Error::shape(
                "stream",
                format!("axis 1 (frames) of chunk {}", self.cursor.chunk),
                want,
                chunk.dim(1)
            )
        );
        let grid = (chunk.dim(2), chunk.dim(3));
        if direction == StreamDirection::Encode {
            let p = self.config.spatial_stride();
            ensure!(
                grid.0 % p == 0 && grid.1 % p == 0,
                Error::shape("stream", "axes 2-3 (height, width)", format!("multiples of {p}"), format!("{grid:?}"))
            );
        }
        if let Some(g) = self.grid {
            ensure!(
                g == grid,
                Error::shape("stream", "axes 2-3 (height, width)", format!("{g:?}"), format!("{grid:?}"))
            );
        }
        self.grid = Some(grid);
        Ok(())
    }

    /// Encode the next chunk; emits exactly one latent frame.
    pub fn encode_chunk(&mut self, vae: &Vae, chunk: &Tensor) -> Result<Posterior> {
        self.check_chunk(vae, chunk, StreamDirection::Encode)?;
        let mut g = Graph::inference();
        let x = g.input(chunk.clone());
        self.cursor.begin_chunk();
        let h = vae
            .encoder()
            .forward(&mut g, &vae.params, x, &mut Pass::Stream(&mut self.cursor), vae.eps())?;
        self.cursor.end_chunk();
        self.frames_consumed += chunk.dim(1);
        let c = self.config.latent_channels;
        let v = g.value(h);
        Ok(Posterior {
            mean: v.narrow(0, 0, c)?,
            logvar: v.narrow(0, c, c)?,
        })
    }

    /// Decode the next latent frame: 1 video frame first, then `s` per call.
    pub fn decode_chunk(&mut self, vae: &Vae, latent_frame: &Tensor) -> Result<Tensor> {
        self.check_chunk(vae, latent_frame, StreamDirection::Decode)?;
        let mut g = Graph::inference();
        let z = g.input(latent_frame.clone());
        self.cursor.begin_chunk();
        let y = vae
            .decoder()
            .forward(&mut g, &vae.params, z, &mut Pass::Stream(&mut self.cursor), vae.eps())?;
        self.cursor.end_chunk();
        self.frames_consumed += 1;
        Ok(g.value(y).clone())
    }
}

impl Vae {
    /// Encode by streaming chunks and concatenating the emitted latent frames.
    pub fn stream_encode(&self, video: &Tensor) -> Result<Posterior> {
        self.config.latent_shape(video.shape())?;
        let mut st = ChunkStreamState::new(&self.config, StreamDirection::Encode);
        let (mut means, mut logvars) = (Vec::new(), Vec::new());
        let mut start = 0;
        for n in plan_chunks(video.dim(1), self.config.temporal_stride())? {
            let p = st.encode_chunk(self, &video.narrow(1, start, n)?)?;
            means.push(p.mean);
            logvars.push(p.logvar);
            start += n;
        }
        Ok(Posterior {
            mean: Tensor::cat(&means.iter().collect::<Vec<_>>(), 1)?,
            logvar: Tensor::cat(&logvars.iter().collect::<Vec<_>>(), 1)?,
        })
    }

    pub fn stream_decode(&self, latent: &Tensor) -> Result<Tensor> {
        self.config.video_shape(latent.shape())?;
        let mut st = ChunkStreamState::new(&self.config, StreamDirection::Decode);
        let mut parts = Vec::new();
        for t in 0..latent.dim(1) {
            parts.push(st.decode_chunk(self, &latent.narrow(1, t, 1)?)?);
        }
        Tensor::cat(&parts.iter().collect::<Vec<_>>(), 1)
    }
}
