//! Live-byte accounting for streamed decoding; kept in its own binary so the
//! counting allocator sees no other test's allocations.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};
use vidflow_core::rng::seeded;
use vidflow_core::tensor::Tensor;
use vidflow_core::vae::{ChunkStreamState, StreamDirection, Vae, VaeConfig};

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        LIVE.fetch_sub(layout.size(), Ordering::SeqCst);
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

/// Peak live bytes above the pre-stream baseline while decoding every frame
/// of `latent`; each decoded chunk is consumed and dropped.
fn decode_high_water(vae: &Vae, latent: &Tensor) -> usize {
    let frames: Vec<Tensor> = (0..latent.dim(1)).map(|t| latent.narrow(1, t, 1).unwrap()).collect();
    let mut checksum = 0.0f64;
    let base = LIVE.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let mut st = ChunkStreamState::new(&vae.config, StreamDirection::Decode);
    for f in &frames {
        checksum += st.decode_chunk(vae, f).unwrap().sum();
    }
    drop(st);
    assert!(checksum.is_finite());
    PEAK.load(Ordering::SeqCst) - base
}

#[test]
fn streamed_decode_high_water_does_not_grow_with_length() {
    let vae = Vae::new(VaeConfig::toy(), 4).unwrap();
    // The single-threaded path keeps the measurement free of pool start-up.
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().unwrap();
    let short = Tensor::randn(&[16, 1 + 16 / 4, 4, 4], &mut seeded(1));
    let long = Tensor::randn(&[16, 1 + 64 / 4, 4, 4], &mut seeded(2));
    // warm any lazily allocated state so both measurements start equal
    decode_high_water(&vae, &short);
    let a = decode_high_water(&vae, &short);
    let b = decode_high_water(&vae, &long);
    assert!(a > 0);
    assert_eq!(a, b, "T=16 peak {a} B, T=64 peak {b} B");
}
