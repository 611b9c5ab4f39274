//! Stand-in text encoder: whitespace tokens hashed into a fixed table.

use vidflow_core::rng;
use vidflow_core::Tensor;

pub const CONTEXT_LEN: usize = 512;
pub const TABLE_SLOTS: usize = 4096;
/// The table never depends on a run's seed, so a prompt embeds identically everywhere.
const TABLE_SEED: u64 = 0x7465_7874;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct ToyTextEmbedder {
    table: Tensor,
    width: usize,
}

impl ToyTextEmbedder {
    pub fn new(width: usize) -> Self {
        let scale = 1.0 / (width as f32).sqrt();
        let table = rng::noise::<f32>(TABLE_SEED, 0, width as u64, &[TABLE_SLOTS, width]).map(|v| v * scale);
        Self { table, width }
    }

    pub fn slot(token: &str) -> usize {
        (fnv1a(token.as_bytes()) % TABLE_SLOTS as u64) as usize
    }

    /// `(1, 512, width)`: one row per token, truncated at 512 and zero-padded.
    pub fn embed(&self, prompt: &str) -> Tensor {
        let w = self.width;
        let mut out = Tensor::zeros(&[1, CONTEXT_LEN, w]);
        for (i, tok) in prompt.split_whitespace().take(CONTEXT_LEN).enumerate() {
            let s = Self::slot(tok);
            out.data_mut()[i * w..(i + 1) * w].copy_from_slice(&self.table.data()[s * w..(s + 1) * w]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn fixed_length_padding_and_repeats() {
        let e = ToyTextEmbedder::new(8);
        let t = e.embed("a red fox a");
        assert_eq!(t.shape(), &[1, 512, 8]);
        let row = |i: usize| &t.data()[i * 8..(i + 1) * 8];
        assert_eq!(row(0), row(3));
        assert_ne!(row(0), row(1));
        assert!(row(4).iter().all(|&v| v == 0.0));
        assert!(e.embed("").data().iter().all(|&v| v == 0.0));
        let long = vec!["w"; 600].join(" ");
        assert_eq!(e.embed(&long).shape(), &[1, 512, 8]);
        assert_eq!(ToyTextEmbedder::new(8).embed("a red fox a"), t);
    }
}
