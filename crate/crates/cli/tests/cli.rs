use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use vidflow_cli::commands::train::training_clip;
use vidflow_core::tensor::{read_wvt, write_wvt};
use vidflow_core::vae::{Vae, VaeConfig};
use vidflow_core::Tensor;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn vidflow(cwd: &Path, args: &[&str]) -> Run {
    let o = Command::new(env!("CARGO_BIN_EXE_vidflow")).args(args).current_dir(cwd).output().unwrap();
    Run {
        code: o.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
    }
}

fn ok(cwd: &Path, args: &[&str]) -> Run {
    let r = vidflow(cwd, args);
    assert_eq!(r.code, 0, "vidflow {args:?} failed:\n{}\n{}", r.stdout, r.stderr);
    r
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cfg(name: &str) -> String {
    configs().join(name).display().to_string()
}

/// Every file under `dir` with its bytes, keyed by relative path.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, d: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn read(p: &Path) -> Tensor {
    read_wvt(&mut std::io::BufReader::new(std::fs::File::open(p).unwrap())).unwrap()
}

fn write(p: &Path, t: &Tensor) {
    write_wvt(&mut std::fs::File::create(p).unwrap(), t).unwrap();
}

fn save_vae(p: &Path, seed: u64) {
    let vae = Vae::new(VaeConfig::toy(), seed).unwrap();
    vae.save(&mut std::fs::File::create(p).unwrap()).unwrap();
}

fn losses(log: &Path) -> Vec<f64> {
    std::fs::read_to_string(log)
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().find_map(|f| f.strip_prefix("loss=")).unwrap().parse().unwrap())
        .collect()
}

const SHORT_TRAIN: &[&str] =
    &["--set", "train.threshold=10", "--set", "train.steps=30", "--set", "train.batch=8", "--set", "train.log_every=10"];

#[test]
fn every_command_is_byte_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    ok(r, &["train-toy", "--out", "model", "--seed", "3", "--set", "train.steps=20", "--set", "train.batch=8", "--set", "train.threshold=10"]);
    let ckpt = r.join("model/dit.ckpt").display().to_string();
    save_vae(&r.join("vae.ckpt"), 1);
    let cases: Vec<(&str, Vec<String>)> = vec![
        ("vae-check", vec!["--config".into(), cfg("vae_check.cfg")]),
        ("train-toy", SHORT_TRAIN.iter().map(|s| s.to_string()).collect()),
        (
            "generate",
            vec!["--set".into(), format!("checkpoint={ckpt}"), "--set".into(), "gen.samples=2".into(), "--set".into(), "gen.steps=8".into()],
        ),
        ("stream", vec!["--config".into(), cfg("stream.cfg"), "--set".into(), format!("checkpoint={ckpt}")]),
        ("plan", vec!["--config".into(), cfg("plan_128gpu.cfg")]),
        (
            "cache-bench",
            vec!["--config".into(), cfg("cache_bench.cfg"), "--set".into(), "bench.steps=12".into(), "--set".into(), format!("checkpoint={ckpt}")],
        ),
    ];
    for (cmd, extra) in cases {
        let mut outs = Vec::new();
        for run in ["a", "b"] {
            let out = format!("{cmd}-{run}");
            let mut args = vec![cmd, "--seed", "7", "--out", &out];
            args.extend(extra.iter().map(String::as_str));
            let res = ok(r, &args);
            outs.push((res.stdout, tree(&r.join(&out))));
        }
        assert_eq!(outs[0].0, outs[1].0, "{cmd}: stdout differs");
        assert!(!outs[0].1.is_empty() && outs[0].1.contains_key("run.cfg"), "{cmd}: no outputs");
        assert_eq!(outs[0].1, outs[1].1, "{cmd}: output files differ");
    }
}

#[test]
fn effective_config_reruns_identically() {
    let d = tempfile::tempdir().unwrap();
    let r = d.path();
    ok(r, &["stream", "--config", &cfg("stream.cfg"), "--seed", "11", "--set", "stream.emit=3", "--out", "a"]);
    let first = std::fs::read_to_string(r.join("a/run.cfg")).unwrap();
    ok(r, &["stream", "--config", "a/run.cfg", "--out", "b"]);
    assert_eq!(std::fs::read_to_string(r.join("b/run.cfg")).unwrap(), first);
    assert_eq!(tree(&r.join("a")), tree(&r.join("b")));
}

#[test]
fn default_training_config_meets_its_threshold() {
    let d = tempfile::tempdir().unwrap();
    let res = vidflow(d.path(), &["train-toy", "--config", &cfg("train_toy.cfg"), "--out", "t"]);
    println!("{}", res.stdout.lines().last().unwrap_or(""));
    assert_eq!(res.code, 0, "{}{}", res.stdout, res.stderr);
    let l = losses(&d.path().join("t/loss.log"));
    assert_eq!(l.len(), 2000);
    let tail = l[l.len() - 50..].iter().sum::<f64>() / 50.0;
    assert!(tail < 0.1, "final loss {tail}");
    assert!(d.path().join("t/dit.ckpt").exists() && d.path().join("t/optim.ckpt").exists());
}

#[test]
fn zero_learning_rate_leaves_the_loss_flat_and_fails() {
    let d = tempfile::tempdir().unwrap();
    let res = vidflow(d.path(), &["train-toy", "--out", "t", "--set", "train.steps=40", "--set", "train.batch=16", "--set", "train.lr=0"]);
    assert_eq!(res.code, 1, "{}{}", res.stdout, res.stderr);
    assert!(res.stdout.contains("FAIL"));
    let l = losses(&d.path().join("t/loss.log"));
    let (head, tail) = (l[..20].iter().sum::<f64>() / 20.0, l[20..].iter().sum::<f64>() / 20.0);
    assert!((head - tail).abs() / head < 0.1, "loss moved from {head} to {tail}");
}

#[test]
fn non_finite_loss_exits_with_divergence() {
    let d = tempfile::tempdir().unwrap();
    let res = vidflow(d.path(), &["train-toy", "--out", "t", "--set", "train.steps=5", "--set", "train.batch=4", "--set", "train.lr=1e30"]);
    assert_eq!(res.code, 4, "{}{}", res.stdout, res.stderr);
    assert!(res.stderr.contains("non-finite"));
}

#[test]
fn resumed_training_continues_the_curve_exactly() {
    let d = tempfile::tempdir().unwrap();
    let r = d.path();
    let base = ["--set", "train.steps=80", "--set", "train.batch=8", "--set", "train.log_every=0"];
    let mut whole = vec!["train-toy", "--out", "whole"];
    whole.extend(base);
    vidflow(r, &whole);
    let mut first = vec!["train-toy", "--out", "split", "--set", "train.stop_after=40"];
    first.extend(base);
    vidflow(r, &first);
    assert_eq!(losses(&r.join("split/loss.log")).len(), 40);
    let mut second = vec!["train-toy", "--out", "split", "--set", "train.resume=true"];
    second.extend(base);
    vidflow(r, &second);

    let (a, b) = (losses(&r.join("whole/loss.log")), losses(&r.join("split/loss.log")));
    assert_eq!(a, b);
    let before = b[30..40].iter().sum::<f64>() / 10.0;
    let after = b[40..50].iter().sum::<f64>() / 10.0;
    assert!((after - before).abs() / before < 0.1, "jump from {before} to {after}");
    assert_eq!(std::fs::read(r.join("whole/dit.ckpt")).unwrap(), std::fs::read(r.join("split/dit.ckpt")).unwrap());
    assert_eq!(std::fs::read(r.join("whole/optim.ckpt")).unwrap(), std::fs::read(r.join("split/optim.ckpt")).unwrap());
}

#[test]
fn bundled_fixtures_pass_and_corrupt_inputs_exit_3() {
    let d = tempfile::tempdir().unwrap();
    let r = d.path();
    let res = ok(r, &["vae-check", "--out", "v"]);
    let clip = res.stdout.lines().find(|l| l.starts_with("case=clip17")).unwrap();
    assert!(clip.contains("frames=17") && clip.ends_with("PASS"), "{clip}");
    let image = res.stdout.lines().find(|l| l.starts_with("case=image1")).unwrap();
    assert!(image.contains("frames=1") && image.ends_with("PASS"), "{image}");

    let good = std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/clip17.wvt")).unwrap();
    let mut bad = good.clone();
    bad[..4].copy_from_slice(b"XXXX");
    std::fs::write(r.join("bad.wvt"), &bad).unwrap();
    let res = vidflow(r, &["vae-check", "--out", "v", "--set", "check.fixtures=bad.wvt"]);
    assert_eq!(res.code, 3);
    assert!(res.stderr.contains("magic"), "{}", res.stderr);
    let res = vidflow(r, &["vae-check", "--out", "v", "--set", "check.fixtures=missing.wvt"]);
    assert_eq!(res.code, 3);

    save_vae(&r.join("vae.ckpt"), 0);
    let mut ck = std::fs::read(r.join("vae.ckpt")).unwrap();
    ck[0] = b'Z';
    std::fs::write(r.join("vae.ckpt"), &ck).unwrap();
    let res = vidflow(r, &["vae-check", "--out", "v", "--set", "vae.checkpoint=vae.ckpt"]);
    assert_eq!(res.code, 3);
    assert!(res.stderr.contains("magic"));
}

#[test]
fn bad_arguments_and_keys_exit_3() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(vidflow(d.path(), &["plan", "--bogus"]).code, 3);
    assert_eq!(vidflow(d.path(), &["plan", "--set", "model.layrs=3"]).code, 3);
    assert_eq!(vidflow(d.path(), &["plan", "--set", "model.layers=lots"]).code, 3);
    assert_eq!(vidflow(d.path(), &["stream", "--set", "dit.dimm=3"]).code, 3);
    assert_eq!(vidflow(d.path(), &["train-toy", "--set", "train.stepz=3"]).code, 3);
    assert_eq!(vidflow(d.path(), &["generate"]).code, 3);
    assert_eq!(vidflow(d.path(), &["generate", "--set", "checkpoint=nope.ckpt"]).code, 3);
    assert_eq!(vidflow(d.path(), &["train-toy", "--set", "train.batch=0"]).code, 3);
    assert_eq!(vidflow(d.path(), &["--config", "absent.cfg", "plan"]).code, 3);
    assert_eq!(vidflow(d.path(), &["--help"]).code, 0);
}

#[test]
fn generate_shapes_for_one_and_fifty_steps() {
    let d = tempfile::tempdir().unwrap();
    let r = d.path();
    ok(r, &["train-toy", "--out", "m", "--set", "train.steps=5", "--set", "train.batch=4", "--set", "train.threshold=10"]);
    save_vae(&r.join("vae.ckpt"), 2);
    for steps in [1, 50] {
        let out = format!("g{steps}");
        ok(
            r,
            &[
                "generate", "--out", &out, "--set", "checkpoint=m/dit.ckpt", "--set", &format!("gen.steps={steps}"),
                "--set", "gen.latent_shape=2,4,4", "--set", "gen.samples=2", "--set", "vae.checkpoint=vae.ckpt",
                "--set", "gen.guidance=3",
            ],
        );
        let z = read(&r.join(&out).join("latents.wvt"));
        assert_eq!(z.shape(), &[2, 16, 2, 4, 4]);
        assert!(z.all_finite());
        let v = read(&r.join(&out).join("sample1.wvt"));
        assert_eq!(v.shape(), &[3, 5, 16, 16]);
        let ppm = std::fs::read_to_string(r.join(&out).join("sample1_004.ppm")).unwrap();
        assert!(ppm.starts_with("P3\n16 16\n255\n"));
        assert_eq!(ppm.lines().count(), 3 + 16);
    }
}

/// The conditioning frame survives generation as well as the VAE itself
/// reconstructs it: the decoded first frame sits within the VAE's own
/// first-frame reconstruction error (plus the sampler's residual) of the
/// conditioning image, on a model overfit to one clip.
#[test]
fn image_to_video_keeps_the_conditioning_frame() {
    let d = tempfile::tempdir().unwrap();
    let r = d.path();
    save_vae(&r.join("vae.ckpt"), 4);
    let train = ok(
        r,
        &[
            "train-toy", "--out", "m", "--seed", "5", "--set", "data.kind=clip", "--set", "data.clips=1", "--set",
            "data.frames=5", "--set", "data.size=16", "--set", "train.task=i2v", "--set", "dit.cond_channels=20",
            "--set", "vae.checkpoint=vae.ckpt", "--set", "latent.scale=4", "--set", "dit.dim=128", "--set",
            "dit.ffn_dim=512", "--set", "train.steps=1000", "--set", "train.batch=16", "--set", "train.threshold=0.1",
        ],
    );
    assert!(train.stdout.contains("PASS"), "{}", train.stdout);

    let clip = training_clip(5, 0, 5, 16);
    let frame0 = clip.narrow(1, 0, 1).unwrap().into_reshape(&[3, 16, 16]).unwrap();
    write(&r.join("first.wvt"), &frame0);
    std::fs::write(r.join("task.cfg"), "kind=i2v\nframes=5\nframe.0=first.wvt\n").unwrap();
    ok(r, &["generate", "--out", "g", "--set", "checkpoint=m/dit.ckpt", "--set", "vae.checkpoint=vae.ckpt", "--set", "gen.task=task.cfg", "--set", "latent.scale=4"]);

    let vae = Vae::load(&mut std::fs::File::open(r.join("vae.ckpt")).unwrap()).unwrap();
    let recon = vae.decode_full(&vae.encode_full(&clip).unwrap().mean).unwrap();
    let first = |v: &Tensor| v.narrow(1, 0, 1).unwrap().into_reshape(&[3, 16, 16]).unwrap();
    let recon_err = first(&recon).max_abs_diff(&frame0).unwrap();
    let video = read(&r.join("g/sample0.wvt"));
    let err = first(&video).max_abs_diff(&frame0).unwrap();
    let z = read(&r.join("g/latents.wvt")).into_reshape(&[16, 2, 4, 4]).unwrap();
    let z_clip = vae.encode_full(&clip).unwrap().mean;
    let lat = |t: &Tensor| t.narrow(1, 0, 1).unwrap().into_reshape(&[16, 4, 4]).unwrap();
    let rel = |a: &Tensor, b: &Tensor| a.sub(b).unwrap().l2_norm() / b.l2_norm();
    let rel_latent = rel(&lat(&z), &lat(&z_clip));
    let rel_frame = rel(&first(&video), &first(&recon));
    println!("rel_latent={rel_latent:.4} rel_frame={rel_frame:.4} err={err:.4} recon_err={recon_err:.4}");
    assert!(rel_latent < 0.1, "conditioning latent drifted: {rel_latent}");
    assert!(rel_frame < 0.1, "first frame drifted from the VAE reconstruction: {rel_frame}");
    // The sample stays as close to the input as the VAE round trip allows.
    assert!(err <= recon_err + 0.05, "{err} vs {recon_err}");
}

#[test]
fn stream_honors_emission_count_and_warmup() {
    let d = tempfile::tempdir().unwrap();
    let r = d.path();
    let res = ok(r, &["stream", "--out", "s", "--set", "stream.window=3", "--set", "stream.emit=7"]);
    assert!(res.stdout.contains("steps=10 warmup_discarded=3 emitted=7"), "{}", res.stdout);
    let manifest = std::fs::read_to_string(r.join("s/manifest.txt")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines.len(), 7);
    for (i, l) in lines.iter().enumerate() {
        let want = format!("step={} emitted=tokens/token_{:05}.wvt level_histogram=1,1,1", i + 4, i + 3);
        assert_eq!(*l, want);
        let t = read(&r.join("s").join(l.split_whitespace().nth(1).unwrap().strip_prefix("emitted=").unwrap()));
        assert_eq!(t.shape(), &[16, 2, 2]);
    }
    let files = std::fs::read_dir(r.join("s/tokens")).unwrap().count();
    assert_eq!(files, 7);
}

#[test]
fn plan_reports_the_reference_layout_single_gpu_and_infeasible() {
    let d = tempfile::tempdir().unwrap();
    let r = d.path();
    let res = ok(r, &["plan", "--config", &cfg("plan_128gpu.cfg"), "--out", "p"]);
    assert!(
        res.stdout.contains("layout dp=4 fsdp=32 ulysses=8 ring=2 feasible=true global_batch=8x"),
        "{}",
        res.stdout
    );
    let row = res
        .stdout
        .lines()
        .find(|l| l.split_whitespace().skip(1).take(4).collect::<Vec<_>>() == ["4", "32", "8", "2"])
        .expect("row in the ranked table");
    assert_eq!(row.split_whitespace().last(), Some("8"));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(r.join("p/plan.json")).unwrap()).unwrap();
    let ranked = json["ranked"].as_array().unwrap();
    assert!(ranked.iter().any(|e| e["config"] == serde_json::json!({"dp": 4, "fsdp": 32, "ulysses": 8, "ring": 2})
        && e["feasible"] == true
        && e["global_batch_multiple"] == 8));

    let res = ok(r, &["plan", "--config", &cfg("plan_single_gpu.cfg"), "--out", "p1"]);
    let rows: Vec<&str> = res.stdout.lines().skip(2).collect();
    assert_eq!(rows.len(), 1, "{}", res.stdout);
    assert_eq!(rows[0].split_whitespace().take(5).collect::<Vec<_>>(), ["1", "1", "1", "1", "1"]);

    let res = vidflow(r, &["plan", "--out", "p2", "--set", "model.seq=1000000", "--set", "cluster.gpus=8"]);
    assert_eq!(res.code, 2);
    assert!(res.stderr.contains("activation memory"));
}

#[test]
fn cache_bench_unit_interval_row_is_exact() {
    let d = tempfile::tempdir().unwrap();
    let res = ok(d.path(), &["cache-bench", "--out", "c", "--set", "bench.steps=10", "--set", "bench.k_attn=1,2", "--set", "bench.k_cfg=1"]);
    let rows: Vec<Vec<&str>> = res.stdout.lines().skip(2).map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], ["1", "1", "0.000e0", "1.0000"]);
    let err: f64 = rows[1][2].parse().unwrap();
    assert!(err > 0.0);
    assert!(rows[1][3].parse::<f64>().unwrap() > 1.0);
}
