use proptest::prelude::*;
use vidflow_planner::*;

fn wan14b(seq: u64) -> ModelShape {
    ModelShape::new(40, 1, seq, 5120).unwrap()
}

fn scenario(gpus: u64, per_node: u64, seq: u64) -> Scenario {
    Scenario::new(wan14b(seq), ClusterSpec::new(gpus, per_node))
}

#[test]
fn flops_and_memory_match_hand_values_on_random_shapes() {
    let c = CostCoeffs::default();
    let mut rng = 0x9e37_79b9_7f4a_7c15u64;
    let mut next = |hi: u64| {
        rng ^= rng << 13;
        rng ^= rng >> 7;
        rng ^= rng << 17;
        1 + rng % hi
    };
    for _ in 0..20 {
        let sh = ModelShape::new(next(64), next(8), next(1 << 20), next(8192)).unwrap();
        let (mut fwd, mut both) = (0u128, 0u128);
        for _layer in 0..sh.layers {
            let (b, s, h) = (sh.batch as u128, sh.seq as u128, sh.hidden as u128);
            fwd += 24 * b * s * h * h + 4 * b * s * s * h;
            both += 72 * b * s * h * h + 12 * b * s * s * h;
        }
        assert_eq!(dit_flops_exact(&sh, &c, Pass::Forward), fwd);
        assert_eq!(dit_flops_exact(&sh, &c, Pass::ForwardBackward), both);
        let rel = (dit_flops(&sh, &c, Pass::ForwardBackward) - both as f64).abs() / both as f64;
        assert!(rel < 1e-15, "{rel}");
        let act = 60 * (sh.layers * sh.batch * sh.seq * sh.hidden) as u128;
        assert!(act < 1u128 << 53);
        assert_eq!(activation_memory(&sh, 60.0), act as f64);
    }
}

#[test]
fn long_sequences_are_attention_bound() {
    let f = attention_fraction(&wan14b(1_000_000), &CostCoeffs::default(), Pass::ForwardBackward);
    assert!((f - 12e6 / (72.0 * 5120.0 + 12e6)).abs() < 1e-15);
    assert!(f >= 0.95, "{f}");
    assert_eq!(activation_memory(&wan14b(1_000_000), 60.0), 1.2288e13);
}

/// `(e+3 choose 3)` layouts per prime power `p^e`: choose exponents for
/// `ulysses ≤ cp ≤ fsdp ≤ e`.
fn layout_count_oracle(mut n: u64) -> usize {
    let mut count = 1;
    let mut p = 2;
    while n > 1 {
        let mut e = 0;
        while n % p == 0 {
            n /= p;
            e += 1;
        }
        count *= (e + 1) * (e + 2) * (e + 3) / 6;
        p += 1;
    }
    count
}

#[test]
fn enumeration_is_complete() {
    for g in 1..=130u64 {
        let all = enumerate(g);
        assert_eq!(all.len(), layout_count_oracle(g), "gpus {g}");
        let mut uniq = all.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), all.len());
    }
    // Brute force over every 4-tuple for a small cluster.
    let g = 12;
    let mut brute = Vec::new();
    for dp in 1..=g {
        for fsdp in 1..=g {
            for u in 1..=g {
                for r in 1..=g {
                    if dp * fsdp == g && fsdp % (u * r) == 0 {
                        brute.push(ParallelConfig::new(dp, fsdp, u, r));
                    }
                }
            }
        }
    }
    let mut got = enumerate(g);
    got.sort();
    assert_eq!(got, brute);
}

#[test]
fn single_gpu_has_one_layout() {
    let sc = Scenario::new(ModelShape::new(4, 1, 4096, 512).unwrap(), ClusterSpec::new(1, 1));
    let ranked = search(&sc, Objective::MinStepTime).unwrap();
    assert_eq!(ranked.len(), 1);
    assert_eq!(ranked[0].config, ParallelConfig::new(1, 1, 1, 1));
    assert_eq!(ranked[0].comm.total_s(), 0.0);
}

fn hand_report(sc: &Scenario, c: ParallelConfig) -> (f64, f64, f64, f64, f64) {
    // (compute, ulysses, ring raw, fsdp raw, activation bytes), evaluated longhand.
    let (l, s, h) = (40.0, sc.shape.seq as f64, 5120.0);
    let cp = c.cp() as f64;
    let flops = l * (72.0 * s * h * h + 12.0 * s * s * h);
    let compute = flops / cp / 400e12;
    let shard = s * h / cp;
    let u = c.ulysses as f64;
    let ulysses = l * 8.0 * 2.0 * shard * (u - 1.0) / u / 200e9;
    let ring = l * 3.0 * (c.ring as f64 - 1.0) * 2.0 * 2.0 * shard / 25e9;
    let f = c.fsdp as f64;
    let fsdp = l * 3.0 * 2.0 * 14.0 * h * h * (f - 1.0) / f / 25e9;
    let act = 60.0 * l * s * h / cp;
    (compute, ulysses, ring, fsdp, act)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

#[test]
fn reference_layout_is_feasible_with_hand_checked_fields() {
    let sc = scenario(128, 8, 75_600);
    let layout = ParallelConfig::new(4, 32, 8, 2);
    let ranked = search(&sc, Objective::MinStepTime).unwrap();
    let r = ranked.iter().find(|r| r.config == layout).expect("layout in feasible set");
    assert!(r.feasible && r.reasons.is_empty() && r.warnings.is_empty());
    assert_eq!(r.global_batch_multiple, 8);
    let (compute, ulysses, ring, fsdp, act) = hand_report(&sc, layout);
    assert!(close(r.compute_s, compute));
    assert!(close(r.comm.ulysses_s, ulysses));
    assert!(close(r.comm.ring_raw_s, ring));
    assert!(close(r.comm.fsdp_raw_s, fsdp));
    assert!(close(r.activation_bytes, act));
    // Ring hops hide behind attention; FSDP gathers only partly behind a layer.
    assert_eq!(r.comm.ring_s, 0.0);
    assert!(close(r.comm.fsdp_s, (fsdp - compute).max(0.0)));
    assert!(r.comm.fsdp_s > 0.0);
    let exposed = ulysses + r.comm.fsdp_s + r.comm.dp_s;
    assert!(close(r.comm_fraction, exposed / (compute + exposed)));
}

#[test]
fn cp_must_divide_fsdp() {
    let sc = scenario(128, 8, 75_600);
    let bad = ParallelConfig::new(16, 8, 8, 2);
    let v = feasible(&sc, &bad);
    assert!(!v.feasible);
    assert!(v.reasons.iter().any(|r| r.contains("does not divide")), "{:?}", v.reasons);
    assert!(comm_time(&sc, &bad).is_err());
    assert!(plan(&sc, &bad).is_err());
}

#[test]
fn million_tokens_without_cp_run_out_of_activation_memory() {
    let sc = scenario(8, 8, 1_000_000);
    let v = feasible(&sc, &ParallelConfig::new(1, 8, 1, 1));
    assert!(!v.feasible);
    assert!(v.reasons[0].starts_with("activation memory"), "{:?}", v.reasons);
    match search(&sc, Objective::MinStepTime) {
        Err(PlanError::NoFeasible { binding, .. }) => assert_eq!(binding, "activation memory"),
        other => panic!("expected no feasible layout, got {other:?}"),
    }
}

#[test]
fn two_dimensional_cp_beats_node_spanning_ulysses() {
    let sc = scenario(16, 8, 262_144);
    let one_d = plan(&sc, &ParallelConfig::new(1, 16, 16, 1)).unwrap();
    let two_d = plan(&sc, &ParallelConfig::new(1, 16, 8, 2)).unwrap();
    println!("comm fraction: ulysses16 {:.4} 2d {:.4}", one_d.comm_fraction, two_d.comm_fraction);
    assert!(!one_d.warnings.is_empty());
    assert!(two_d.warnings.is_empty());
    assert!(
        two_d.comm_fraction < one_d.comm_fraction,
        "2D {} vs Ulysses {}",
        two_d.comm_fraction,
        one_d.comm_fraction
    );
}

#[test]
fn node_spanning_ulysses_never_gains_on_2d_as_sequences_grow() {
    let mut last = 0.0;
    for k in 0..12 {
        let sc = scenario(16, 8, 16_384 << k);
        let one_d = plan(&sc, &ParallelConfig::new(1, 16, 16, 1)).unwrap().comm_fraction;
        let two_d = plan(&sc, &ParallelConfig::new(1, 16, 8, 2)).unwrap().comm_fraction;
        let rel = one_d / two_d;
        assert!(rel >= last * (1.0 - 1e-12), "s={} ratio {rel} after {last}", 16_384u64 << k);
        last = rel;
    }
}

fn off_node(size: u64, per_node: u64) -> bool {
    size > per_node || per_node % size != 0
}

#[test]
fn slower_inter_node_links_only_hurt_node_crossing_groups() {
    let sc = scenario(32, 8, 262_144);
    let mut slow = sc;
    slow.cluster.inter_bw /= 2.0;
    let (mut crossing, mut local) = (0, 0);
    for c in enumerate(32) {
        let (a, b) = (comm_time(&sc, &c).unwrap(), comm_time(&slow, &c).unwrap());
        let groups = [
            (c.ulysses > 1, off_node(c.ulysses, 8), a.ulysses_s, b.ulysses_s),
            (c.ring > 1, off_node(c.cp(), 8), a.ring_raw_s, b.ring_raw_s),
            (c.fsdp > 1, off_node(c.fsdp, 8), a.fsdp_raw_s, b.fsdp_raw_s),
            (c.dp > 1, off_node(32, 8), a.dp_raw_s, b.dp_raw_s),
        ];
        for (active, crosses, before, after) in groups {
            if active && crosses {
                crossing += 1;
                assert!((after - 2.0 * before).abs() <= 1e-12 * after, "{c}");
            } else {
                local += usize::from(active);
                assert_eq!(after, before, "{c}");
            }
        }
        assert!(b.total_s() >= a.total_s(), "{c}");
        let cp_local = !off_node(c.cp(), 8);
        if cp_local {
            assert_eq!(a.cp_s(), b.cp_s(), "{c}");
        }
    }
    assert!(crossing > 0 && local > 0);
}

#[test]
fn search_order_ignores_enumeration_order() {
    let sc = scenario(64, 8, 131_072);
    let reports: Vec<_> = enumerate(64).iter().map(|c| plan(&sc, c).unwrap()).collect();
    for obj in [Objective::MinStepTime, Objective::MaxThroughput] {
        let base = rank(reports.clone(), obj);
        let mut rev = reports.clone();
        rev.reverse();
        assert_eq!(rank(rev, obj), base);
        let mut rotated = reports.clone();
        rotated.rotate_left(17);
        assert_eq!(rank(rotated, obj), base);
    }
}

#[test]
fn ties_prefer_wider_dp_then_smaller_cp() {
    // With free communication and compute, every layout runs equally fast.
    let mut sc = Scenario::new(ModelShape::new(4, 1, 1024, 512).unwrap(), ClusterSpec::new(8, 8));
    sc.cluster.gpu_flops = f64::INFINITY;
    sc.cluster.intra_bw = f64::INFINITY;
    sc.cluster.inter_bw = f64::INFINITY;
    let ranked = search(&sc, Objective::MinStepTime).unwrap();
    assert!(ranked.iter().all(|r| r.step_s == 0.0));
    for w in ranked.windows(2) {
        let (a, b) = (w[0].config, w[1].config);
        assert!((a.dp, std::cmp::Reverse(a.cp()), std::cmp::Reverse(a.ulysses)) > (b.dp, std::cmp::Reverse(b.cp()), std::cmp::Reverse(b.ulysses)));
    }
    assert_eq!(ranked[0].config, ParallelConfig::new(8, 1, 1, 1));
}

#[test]
fn offload_ratio_sits_in_the_overlap_regime_at_a_million_tokens() {
    let (sh, c, cl) = (wan14b(1_000_000), CostCoeffs::default(), ClusterSpec::new(128, 8));
    let adv = offload_vs_gc(&sh, &c, &cl, 16, DEFAULT_OVERLAP_BUDGET).unwrap();
    println!("offload ratio {:.3}", adv.ratio);
    assert!((1.0..=3.0).contains(&adv.ratio), "{}", adv.ratio);
    assert_eq!(adv, offload_vs_gc(&sh, &c, &cl, 4, DEFAULT_OVERLAP_BUDGET).map(|a| OffloadAdvice { layers: adv.layers.clone(), ..a }).unwrap());
    // Host memory runs out first, so the remaining layers checkpoint.
    let per_layer: f64 = 60.0 * 1e6 * 5120.0 / 16.0;
    assert_eq!(adv.offloaded(), (200e9 / per_layer).floor() as usize);
    assert_eq!(adv.layers.len(), 40);
}

#[test]
fn offload_degenerate_links() {
    let (sh, c) = (wan14b(65_536), CostCoeffs::default());
    let mut fast = ClusterSpec::new(8, 8);
    fast.host_bw = f64::INFINITY;
    fast.host_memory = f64::INFINITY;
    let adv = offload_vs_gc(&sh, &c, &fast, 1, DEFAULT_OVERLAP_BUDGET).unwrap();
    assert_eq!(adv.ratio, 0.0);
    assert!(adv.layers.iter().all(|&l| l == LayerPlan::Offload));
    let mut instant = ClusterSpec::new(8, 8);
    instant.gpu_flops = f64::INFINITY;
    let adv = offload_vs_gc(&sh, &c, &instant, 1, DEFAULT_OVERLAP_BUDGET).unwrap();
    assert_eq!(adv.ratio, f64::INFINITY);
    assert!(adv.layers.iter().all(|&l| l == LayerPlan::Checkpoint));
}

#[test]
fn strategy_switch_accounting() {
    let b = DEFAULT_BROADCAST_FRACTION;
    assert_eq!(strategy_switch_overhead(1, 0.3, b).unwrap().total(), 0.3);
    let s = strategy_switch_overhead(16, 0.16, b).unwrap();
    assert_eq!(s.encoder_fraction, 0.01);
    assert_eq!(s.broadcast_fraction, 16.0 * b);
    let cross = SwitchCost::crossover(0.16, b);
    let mut last = f64::INFINITY;
    for cp in 1..=cross.floor() as u64 {
        let t = strategy_switch_overhead(cp, 0.16, b).unwrap().total();
        assert!(t <= last, "cp={cp}");
        last = t;
    }
    assert!(strategy_switch_overhead(0, 0.1, b).is_err());
    assert!(strategy_switch_overhead(2, 1.5, b).is_err());
}

fn arb_scenario() -> impl Strategy<Value = Scenario> {
    (
        prop::sample::select(vec![1u64, 2, 4, 6, 8, 12, 16, 24, 32, 48, 64]),
        prop::sample::select(vec![1u64, 2, 4, 8]),
        1u64..=48,
        1u64..=4,
        1u64..=(1 << 20),
        prop::sample::select(vec![1024u64, 2048, 3072, 4096, 5120]),
        10e9..160e9f64,
    )
        .prop_filter_map("nodes must tile the cluster", |(g, n, l, b, s, h, mem)| {
            (g % n == 0).then(|| {
                let mut sc = Scenario::new(ModelShape::new(l, b, s, h).unwrap(), ClusterSpec::new(g, n));
                sc.cluster.gpu_memory = mem;
                sc
            })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn feasible_reports_pass_every_constraint(sc in arb_scenario()) {
        if let Ok(ranked) = search(&sc, Objective::MaxThroughput) {
            for r in &ranked {
                let c = r.config;
                prop_assert_eq!(c.dp * c.fsdp, sc.cluster.gpus);
                prop_assert_eq!(c.fsdp % c.cp(), 0);
                let act = activation_memory(&sc.shape, sc.coeffs.gamma) / c.cp() as f64;
                let state = 14.0 * param_count(&sc.shape, &sc.coeffs) / c.fsdp as f64;
                prop_assert!(act + state <= sc.cluster.gpu_memory);
                prop_assert_eq!(r.global_batch_multiple, c.dp * c.fsdp / c.cp());
            }
        }
    }

    #[test]
    fn more_memory_never_shrinks_the_feasible_set(sc in arb_scenario(), extra in 1e9..100e9f64) {
        let mut big = sc;
        big.cluster.gpu_memory += extra;
        for c in enumerate(sc.cluster.gpus) {
            if feasible(&sc, &c).feasible {
                prop_assert!(feasible(&big, &c).feasible, "{}", c);
            }
        }
    }

    #[test]
    fn batch_multiple_identity(sc in arb_scenario()) {
        for c in enumerate(sc.cluster.gpus) {
            let r = plan(&sc, &c).unwrap();
            prop_assert_eq!(r.global_batch_multiple * c.cp(), c.dp * c.fsdp);
            prop_assert!(r.comm_fraction >= 0.0 && r.comm_fraction < 1.0);
        }
    }
}
