use rand::Rng;
use vidflow_core::rng::seeded;
use vidflow_core::tensor::Tensor;
use vidflow_core::vae::{
    inflate_2d_to_3d, ChunkStreamState, SlotKind, StreamDirection, Vae, VaeConfig,
};

fn random_video(seed: u64, frames: usize, size: usize) -> Tensor {
    Tensor::uniform(&[3, frames, size, size], -1.0, 1.0, &mut seeded(seed))
}

#[test]
fn streamed_encode_and_decode_match_full_pass() {
    let cfg = VaeConfig::toy();
    for (case, t) in [4usize, 8, 16].into_iter().enumerate() {
        let vae = Vae::new(cfg.clone(), 100 + case as u64).unwrap();
        let video = random_video(case as u64, 1 + t, 16);
        let full = vae.encode_full(&video).unwrap();
        let streamed = vae.stream_encode(&video).unwrap();
        assert_eq!(full.mean.shape(), &[16, 1 + t / 4, 4, 4]);
        assert!(full.mean.max_abs_diff(&streamed.mean).unwrap() <= 1e-5);
        assert!(full.logvar.max_abs_diff(&streamed.logvar).unwrap() <= 1e-5);

        let latent = Tensor::randn(&[16, 1 + t / 4, 4, 4], &mut seeded(50 + case as u64));
        let dfull = vae.decode_full(&latent).unwrap();
        let dstream = vae.stream_decode(&latent).unwrap();
        assert_eq!(dfull.shape(), &[3, 1 + t, 16, 16]);
        assert!(dfull.max_abs_diff(&dstream).unwrap() <= 1e-5);
    }
}

#[test]
fn chunk_contract_and_cache_sizes() {
    let cfg = VaeConfig::toy();
    let vae = Vae::new(cfg.clone(), 3).unwrap();
    let video = random_video(9, 17, 16);
    let mut st = ChunkStreamState::new(&cfg, StreamDirection::Encode);
    let mut emitted = 0;
    let mut start = 0;
    for n in [1, 4, 4, 4, 4] {
        let chunk = video.narrow(1, start, n).unwrap();
        let p = st.encode_chunk(&vae, &chunk).unwrap();
        assert_eq!(p.mean.dim(1), 1);
        emitted += 1;
        start += n;
        for (kind, frames) in st.cache_report() {
            match kind {
                SlotKind::Causal { kt } => assert_eq!(frames, kt - 1),
                SlotKind::TimeDown => assert_eq!(frames, 1),
            }
        }
    }
    assert_eq!(emitted, 5);
    assert_eq!(st.frames_consumed(), 17);

    // First chunk alone equals the full pass of the first frame.
    let mut st = ChunkStreamState::new(&cfg, StreamDirection::Encode);
    let first = video.narrow(1, 0, 1).unwrap();
    let a = st.encode_chunk(&vae, &first).unwrap();
    assert_eq!(a, vae.encode_full(&first).unwrap());
    // Wrong-size chunk is rejected.
    let err = st.encode_chunk(&vae, &video.narrow(1, 1, 3).unwrap()).unwrap_err();
    assert!(err.to_string().contains("frames"), "{err}");

    let mut dec = ChunkStreamState::new(&cfg, StreamDirection::Decode);
    let z = Tensor::randn(&[16, 1, 4, 4], &mut seeded(1));
    assert_eq!(dec.decode_chunk(&vae, &z).unwrap().dim(1), 1);
    assert_eq!(dec.decode_chunk(&vae, &z).unwrap().dim(1), 4);
    assert!(dec.decode_chunk(&vae, &Tensor::zeros(&[16, 2, 4, 4])).is_err());
}

#[test]
fn encoder_is_temporally_causal() {
    let cfg = VaeConfig::toy();
    let vae = Vae::new(cfg, 11).unwrap();
    let mut rng = seeded(5);
    for _ in 0..4 {
        let video = random_video(rng.random(), 13, 16);
        let t = rng.random_range(0..12usize);
        let mut perturbed = video.clone();
        for c in 0..3 {
            for f in t + 1..13 {
                let base = (c * 13 + f) * 256;
                for v in &mut perturbed.data_mut()[base..base + 256] {
                    *v = rng.random_range(-1.0..1.0);
                }
            }
        }
        let a = vae.encode_full(&video).unwrap().mean;
        let b = vae.encode_full(&perturbed).unwrap().mean;
        // latent frame j sees pixel frames up to 4j
        let keep = t / 4 + 1;
        for c in 0..16 {
            for j in 0..keep {
                let base = (c * 4 + j) * 16;
                assert_eq!(&a.data()[base..base + 16], &b.data()[base..base + 16], "t={t} j={j}");
            }
        }
    }
}

#[test]
fn decoder_is_temporally_causal() {
    let vae = Vae::new(VaeConfig::toy(), 12).unwrap();
    let z = Tensor::randn(&[16, 4, 4, 4], &mut seeded(2));
    let mut z2 = z.clone();
    for c in 0..16 {
        let base = (c * 4 + 3) * 16;
        z2.data_mut()[base..base + 16].fill(5.0);
    }
    let a = vae.decode_full(&z).unwrap();
    let b = vae.decode_full(&z2).unwrap();
    // latent frames 0..=2 produce pixel frames 0..=8
    for c in 0..3 {
        let base = c * 13 * 256;
        assert_eq!(&a.data()[base..base + 9 * 256], &b.data()[base..base + 9 * 256]);
    }
}

#[test]
fn inflated_model_reproduces_image_model_on_single_frames() {
    let cfg = VaeConfig::toy();
    for draw in 0..3 {
        let image = Vae::new(cfg.image_counterpart(), 40 + draw).unwrap();
        let video = inflate_2d_to_3d(&image, &cfg).unwrap();
        let x = random_video(draw, 1, 16);
        let a = image.encode_full(&x).unwrap();
        let b = video.encode_full(&x).unwrap();
        assert_eq!(a.mean.max_abs_diff(&b.mean).unwrap(), 0.0);
        assert_eq!(a.logvar.max_abs_diff(&b.logvar).unwrap(), 0.0);
        let da = image.decode_full(&a.mean).unwrap();
        let db = video.decode_full(&a.mean).unwrap();
        assert_eq!(da.max_abs_diff(&db).unwrap(), 0.0);
    }
}

#[test]
fn full_layout_shapes_end_to_end() {
    let cfg = VaeConfig {
        base_channels: 2,
        res_blocks: 1,
        ..VaeConfig::full_layout(2)
    };
    let vae = Vae::new(cfg, 1).unwrap();
    let img = random_video(1, 1, 64);
    let z = vae.encode_full(&img).unwrap().mean;
    assert_eq!(z.shape(), &[16, 1, 8, 8]);
    assert_eq!(vae.decode_full(&z).unwrap().shape(), &[3, 1, 64, 64]);
    let clip = random_video(2, 17, 64);
    let z = vae.encode_full(&clip).unwrap().mean;
    assert_eq!(z.shape(), &[16, 5, 8, 8]);
    assert_eq!(vae.decode_full(&z).unwrap().shape(), &[3, 17, 64, 64]);
    assert!(vae.encode_full(&random_video(3, 16, 64)).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let vae = Vae::new(VaeConfig::toy(), 8).unwrap();
    let mut buf = Vec::new();
    vae.save(&mut buf).unwrap();
    assert_eq!(&buf[..4], b"WVAE");
    let back = Vae::load(&mut buf.as_slice()).unwrap();
    assert_eq!(back.config, vae.config);
    for ((_, n1, a), (_, n2, b)) in vae.params.iter().zip(back.params.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(a, b);
    }
    let mut bad = buf.clone();
    bad[1] = b'X';
    assert!(Vae::load(&mut bad.as_slice()).is_err());
}
