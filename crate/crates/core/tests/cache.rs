use proptest::prelude::*;
use vidflow_core::cache::{
    cached_euler_integrate, dit_forward_ops, op_savings, op_savings_by_steps, relative_error, search_guards,
    CacheSchedule, HookedVelocity, StepOps, DEFAULT_HEAD, DEFAULT_TAIL,
};
use vidflow_core::dit::{AttentionHook, Dit, DitConfig};
use vidflow_core::flow::{euler_integrate, GuidanceConfig};
use vidflow_core::rng::{noise, seeded};
use vidflow_core::{Result, Tensor};

fn toy() -> (Dit, Tensor, GuidanceConfig, Tensor) {
    let cfg = DitConfig { depth: 2, dim: 32, heads: 2, ffn_dim: 64, text_len: 4, ..DitConfig::toy() };
    let dit = Dit::new(cfg.clone(), 21).unwrap();
    let ctx = Tensor::randn(&[1, 4, cfg.text_dim], &mut seeded(1));
    let guidance = GuidanceConfig::new(4.0, Tensor::zeros(&[1, 4, cfg.text_dim])).unwrap();
    let x0 = noise(5, 0, 0, &[1, 16, 2, 4, 4]);
    (dit, ctx, guidance, x0)
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn unit_intervals_reproduce_the_uncached_sampler_bitwise() {
    let (dit, ctx, guidance, x0) = toy();
    for (gd, head, tail) in [(None, 0, 0), (Some(&guidance), 0, 0), (Some(&guidance), 2, 2)] {
        let s = CacheSchedule::new(12, 1, 1, head, tail).unwrap();
        let cached = cached_euler_integrate(&dit, x0.clone(), Some(&ctx), gd, &s).unwrap();
        let plain = euler_integrate(&dit, x0.clone(), Some(&ctx), 12, gd).unwrap();
        assert_eq!(bits(&cached.sample), bits(&plain));
        assert_eq!(cached.stats.cond_attn_full, 12);
    }
}

/// Values on a quarter grid so `(f + d) - f == d` holds exactly in f32.
struct Offset {
    delta: f32,
    null: Tensor,
}

impl HookedVelocity for Offset {
    fn velocity_with(&self, x: &Tensor, t: f64, ctx: Option<&Tensor>, _hook: &mut dyn AttentionHook) -> Result<Tensor> {
        let shift = if ctx == Some(&self.null) { self.delta } else { 0.0 };
        let tq = (t * 4.0).floor() as f32 / 4.0;
        Ok(x.map(|v| ((v * 4.0).floor() / 4.0).clamp(-8.0, 8.0) - tq + shift))
    }
}

#[test]
fn step_independent_cfg_difference_caches_exactly() {
    let null = Tensor::full(&[1], -1.0);
    let ctx = Tensor::full(&[1], 1.0);
    let g = GuidanceConfig::new(3.0, null.clone()).unwrap();
    let x0 = Tensor::randn(&[64], &mut seeded(2));
    for delta in [0.0, 0.75] {
        let model = Offset { delta, null: null.clone() };
        let full = cached_euler_integrate(&model, x0.clone(), Some(&ctx), Some(&g), &CacheSchedule::disabled(16).unwrap())
            .unwrap()
            .sample;
        for (k, head, tail) in [(2, 0, 0), (3, 1, 1), (5, 2, 2), (16, 0, 0)] {
            let s = CacheSchedule::new(16, 1, k, head, tail).unwrap();
            let run = cached_euler_integrate(&model, x0.clone(), Some(&ctx), Some(&g), &s).unwrap();
            assert_eq!(bits(&run.sample), bits(&full), "delta={delta} k={k}");
            assert_eq!(run.stats.uncond_passes, s.full_count(k));
        }
    }
}

fn sweep_error(attn: bool, k: usize) -> f64 {
    let (dit, ctx, guidance, x0) = toy();
    let reference = euler_integrate(&dit, x0.clone(), Some(&ctx), 50, Some(&guidance)).unwrap();
    let s = if attn {
        CacheSchedule::new(50, k, 1, DEFAULT_HEAD, DEFAULT_TAIL)
    } else {
        CacheSchedule::new(50, 1, k, DEFAULT_HEAD, DEFAULT_TAIL)
    }
    .unwrap();
    let run = cached_euler_integrate(&dit, x0, Some(&ctx), Some(&guidance), &s).unwrap();
    relative_error(&run.sample, &reference).unwrap()
}

#[test]
fn caching_error_grows_with_the_interval() {
    for attn in [true, false] {
        let errs: Vec<f64> = [1, 2, 4, 8].iter().map(|&k| sweep_error(attn, k)).collect();
        assert_eq!(errs[0], 0.0);
        assert!(errs.windows(2).all(|w| w[0] <= w[1]), "attn={attn}: {errs:?}");
        assert!(errs[1] > 0.0);
    }
    let e3 = sweep_error(true, 3);
    assert!(e3 < 5e-2, "k_attn=3 relative error {e3}");
}

#[test]
fn op_ratio_examples() {
    // CFG skipped on every other step, uncond half of each step's work
    let s = CacheSchedule::new(50, 1, 2, 0, 0).unwrap();
    let ops = StepOps { cond_attn: 0.0, cond_other: 1.0, uncond_attn: 0.0, uncond_other: 1.0 };
    assert_eq!(s.full_count(2), 25);
    assert!((op_savings(&s, &ops) - 1.0 / (1.0 - 0.25)).abs() < 1e-12);

    // attention 95% of the work, reused on 2 of every 3 interior steps
    let s = CacheSchedule::new(50, 3, 1, 2, 2).unwrap();
    let ops = StepOps { cond_attn: 95.0, cond_other: 5.0, uncond_attn: 0.0, uncond_other: 0.0 };
    let interior_full = (0..46).filter(|i| i % 3 == 0).count();
    let hand = 50.0 * 100.0 / (50.0 * 5.0 + (4 + interior_full) as f64 * 95.0);
    assert_eq!(op_savings(&s, &ops), hand);
    assert_eq!(op_savings_by_steps(&s, &ops), hand);

    let one = CacheSchedule::new(50, 1, 1, 2, 2).unwrap();
    assert_eq!(op_savings(&one, &StepOps { cond_attn: 3.0, cond_other: 1.0, uncond_attn: 3.0, uncond_other: 1.0 }), 1.0);
}

proptest! {
    #[test]
    fn formula_matches_step_sums(
        steps in 1usize..80, ka in 1usize..10, kc in 1usize..10, head in 0usize..5, tail in 0usize..5,
        ops in proptest::array::uniform4(1u32..1000),
    ) {
        prop_assume!(head + tail <= steps);
        let s = CacheSchedule::new(steps, ka, kc, head, tail).unwrap();
        let ops = StepOps {
            cond_attn: ops[0] as f64, cond_other: ops[1] as f64, uncond_attn: ops[2] as f64, uncond_other: ops[3] as f64,
        };
        prop_assert_eq!(op_savings(&s, &ops), op_savings_by_steps(&s, &ops));
        let full = s.flags().iter().filter(|f| f.cfg_full).count();
        prop_assert_eq!(full, s.full_count(kc));
        prop_assert!(s.attn_full(0) && s.cfg_full(0));
    }
}

#[test]
fn guard_search_prefers_the_cheapest_schedule_within_tolerance() {
    let base = CacheSchedule::new(20, 4, 4, 0, 0).unwrap();
    let ops = StepOps { cond_attn: 9.0, cond_other: 1.0, uncond_attn: 9.0, uncond_other: 1.0 };
    // pretend error falls as guards grow
    let (best, ratio, err) = search_guards(base, &[0, 1, 2, 3], &[0, 1, 2, 3], &ops, 0.25, |s| {
        Ok(1.0 / (1.0 + (s.head + s.tail) as f64))
    })
    .unwrap()
    .unwrap();
    assert_eq!(best.head + best.tail, 3);
    assert_eq!(best.head, 0);
    assert!(err <= 0.25);
    assert_eq!(ratio, op_savings(&best, &ops));
    assert!(search_guards(base, &[0], &[0], &ops, 0.1, |_| Ok(1.0)).unwrap().is_none());
}

#[test]
fn analytic_dit_ops_scale_with_tokens() {
    let cfg = DitConfig::toy();
    let (a1, o1) = dit_forward_ops(&cfg, 1, 8, 8, 512);
    let (a2, o2) = dit_forward_ops(&cfg, 2, 8, 8, 512);
    assert!(a2 > a1 && o2 > o1);
    assert!((o2 / o1 - 2.0).abs() < 1e-9);
    let (attn_only, _) = dit_forward_ops(&cfg, 1, 8, 8, 0);
    assert!(attn_only < a1);
}
