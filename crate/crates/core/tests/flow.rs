use proptest::prelude::*;
use vidflow_core::autograd::Graph;
use vidflow_core::flow::{
    cfg_velocity, euler_integrate, euler_sample, fm_loss, interpolate, log_line, loss_graph,
    target_velocity, train_step, FlowBatch, FlowModel, FlowSample, GuidanceConfig, ToyMlp,
    ToyMlpConfig, TimestepSampler, VelocityField, sample_moments, train_on_mixture, MixtureRecipe, MixtureTarget,
};
use vidflow_core::rng::seeded;
use vidflow_core::{AdamW, AdamWConfig, Error, Result, Tensor};

fn vec_tensor(v: Vec<f32>) -> Tensor {
    Tensor::new(vec![v.len()], v).unwrap()
}

proptest! {
    #[test]
    fn endpoints_and_oracle_zero(
        pair in prop::collection::vec((-10.0f32..10.0, -10.0f32..10.0), 1..16)
    ) {
        let (a, b): (Vec<f32>, Vec<f32>) = pair.into_iter().unzip();
        let (x0, x1) = (vec_tensor(a), vec_tensor(b));
        prop_assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0.clone());
        prop_assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1.clone());
        let vt = target_velocity(&x0, &x1).unwrap();
        prop_assert_eq!(fm_loss(&target_velocity(&x0, &x1).unwrap(), &vt).unwrap(), 0.0);
    }

    #[test]
    fn cfg_is_affine_in_scale(c in -5.0f32..5.0, u in -5.0f32..5.0, g in 0.0f64..4.0) {
        let (vc, vu) = (vec_tensor(vec![c]), vec_tensor(vec![u]));
        let v = cfg_velocity(&vc, &vu, g).unwrap().data()[0] as f64;
        let v0 = cfg_velocity(&vc, &vu, 0.0).unwrap().data()[0] as f64;
        let v1 = cfg_velocity(&vc, &vu, 1.0).unwrap().data()[0] as f64;
        prop_assert_eq!(v0, u as f64);
        prop_assert_eq!(v1, c as f64);
        prop_assert!((v - (v0 + g * (v1 - v0))).abs() < 1e-4 * (1.0 + v.abs()));
    }

    #[test]
    fn timesteps_in_open_interval_and_reproducible(seed in any::<u64>(), mu in -3.0f64..3.0, sigma in 0.1f64..4.0) {
        let mut a = TimestepSampler::new(mu, sigma, seed).unwrap();
        let mut b = TimestepSampler::new(mu, sigma, seed).unwrap();
        for _ in 0..64 {
            let t = a.sample();
            prop_assert!(t > 0.0 && t < 1.0);
            prop_assert_eq!(t, b.sample());
        }
    }
}

#[test]
fn interpolant_derivative_is_the_target_velocity() {
    let mut rng = seeded(1);
    for _ in 0..10 {
        let x0 = Tensor::<f64>::randn(&[8], &mut rng);
        let x1 = Tensor::<f64>::randn(&[8], &mut rng);
        let vt = target_velocity(&x0, &x1).unwrap();
        let (t, eps) = (0.37, 1e-6);
        let a = interpolate(&x0, &x1, t + eps).unwrap();
        let b = interpolate(&x0, &x1, t).unwrap();
        let fd = a.sub(&b).unwrap().scale(1.0 / eps);
        assert!(fd.max_abs_diff(&vt).unwrap() < 1e-8);
    }
    assert!(target_velocity(&vec_tensor(vec![1.0]), &vec_tensor(vec![1.0, 2.0])).is_err());
    let x1 = vec_tensor(vec![3.0, -1.0]);
    assert_eq!(target_velocity(&Tensor::zeros(&[2]), &x1).unwrap(), x1);
    assert_eq!(target_velocity(&x1, &x1).unwrap(), Tensor::zeros(&[2]));
}

#[test]
fn logit_normal_mean_is_one_half() {
    let mut s = TimestepSampler::standard(42);
    let n = 100_000;
    let mean = (0..n).map(|_| s.sample()).sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() < 0.01, "{mean}");
}

/// Constant field pointing from a known x0 to x1.
struct Straight(Tensor);

impl VelocityField for Straight {
    fn velocity(&self, x: &Tensor, _t: f64, _ctx: Option<&Tensor>) -> Result<Tensor> {
        assert_eq!(x.shape(), self.0.shape());
        Ok(self.0.clone())
    }
}

#[test]
fn euler_is_exact_on_straight_paths() {
    let mut rng = seeded(3);
    let x0 = Tensor::randn(&[4, 5], &mut rng);
    let x1 = Tensor::randn(&[4, 5], &mut rng);
    let v = target_velocity(&x0, &x1).unwrap();
    let model = Straight(v.clone());
    let one = euler_integrate(&model, x0.clone(), None, 1, None).unwrap();
    assert_eq!(one, x0.add(&v).unwrap());
    assert!(one.max_abs_diff(&x1).unwrap() <= 1e-6);
    for n in [2, 7, 50] {
        let out = euler_integrate(&model, x0.clone(), None, n, None).unwrap();
        assert!(out.max_abs_diff(&x1).unwrap() <= 1e-6, "n={n}");
    }
    assert!(euler_integrate(&model, x0.clone(), None, 0, None).is_err());
    // euler_sample draws its start from the seed
    let field = Straight(Tensor::ones(&[4, 5]));
    let a = euler_sample(&field, None, 3, None, &[4, 5], 11).unwrap();
    assert_eq!(a, euler_sample(&field, None, 3, None, &[4, 5], 11).unwrap());
    assert_ne!(a, euler_sample(&field, None, 3, None, &[4, 5], 12).unwrap());
}

/// Context-dependent field: conditional 2, unconditional 0.
struct Switch;

impl VelocityField for Switch {
    fn velocity(&self, x: &Tensor, _t: f64, ctx: Option<&Tensor>) -> Result<Tensor> {
        let c = ctx.map_or(0.0, |c| c.data()[0]);
        Ok(Tensor::full(x.shape(), 2.0 * c))
    }
}

#[test]
fn guided_sampling_extrapolates() {
    let on = Tensor::ones(&[1]);
    let guidance = GuidanceConfig::new(1.5, Tensor::zeros(&[1])).unwrap();
    let x0 = Tensor::zeros(&[3]);
    let out = euler_integrate(&Switch, x0.clone(), Some(&on), 4, Some(&guidance)).unwrap();
    assert!(out.data().iter().all(|&v| (v - 3.0).abs() < 1e-6));
    let plain = GuidanceConfig::new(1.0, Tensor::zeros(&[1])).unwrap();
    let out = euler_integrate(&Switch, x0, Some(&on), 4, Some(&plain)).unwrap();
    assert!(out.data().iter().all(|&v| (v - 2.0).abs() < 1e-6));
}

fn batch_of(rng: &mut vidflow_core::rng::Rng, n: usize, dim: usize) -> FlowBatch {
    let mut sampler = TimestepSampler::standard(5);
    let samples: Vec<_> = (0..n)
        .map(|_| {
            FlowSample::new(Tensor::randn(&[dim], rng), Tensor::randn(&[dim], rng), sampler.sample()).unwrap()
        })
        .collect();
    FlowBatch::from_samples(&samples, None).unwrap()
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let mut m = ToyMlp::<f32>::new(ToyMlpConfig::default(), 1).unwrap();
    let before = m.params.clone();
    let mut opt = AdamW::new(&m.params, AdamWConfig::default());
    let batch = batch_of(&mut seeded(2), 8, 2);
    for _ in 0..3 {
        train_step(&mut m, &mut opt, &batch, 0.0).unwrap();
    }
    for ((_, _, a), (_, _, b)) in before.iter().zip(m.params.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn non_finite_loss_aborts_without_update() {
    let mut m = ToyMlp::<f32>::new(ToyMlpConfig::default(), 1).unwrap();
    let before = m.params.clone();
    let mut opt = AdamW::new(&m.params, AdamWConfig::default());
    let mut batch = batch_of(&mut seeded(2), 4, 2);
    batch.xt.data_mut()[0] = f32::NAN;
    let err = train_step(&mut m, &mut opt, &batch, 1e-3).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 0, .. }), "{err}");
    for ((_, _, a), (_, _, b)) in before.iter().zip(m.params.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn single_sample_overfits() {
    let mut m = ToyMlp::<f32>::new(ToyMlpConfig::default(), 7).unwrap();
    let mut opt = AdamW::new(&m.params, AdamWConfig::default());
    let mut rng = seeded(8);
    let s = FlowSample::new(Tensor::randn(&[2], &mut rng), Tensor::randn(&[2], &mut rng), 0.3).unwrap();
    let batch = FlowBatch::from_samples(&[s], None).unwrap();
    let mut last = f64::INFINITY;
    let mut reached = None;
    for step in 0..2000 {
        let st = train_step(&mut m, &mut opt, &batch, 1e-4).unwrap();
        last = st.loss;
        if st.loss < 1e-3 {
            reached = Some(step);
            break;
        }
    }
    assert!(reached.is_some(), "loss {last} after 2000 steps");
}

#[test]
fn log_line_format() {
    let mut m = ToyMlp::<f32>::new(ToyMlpConfig::default(), 1).unwrap();
    let mut opt = AdamW::new(&m.params, AdamWConfig::default());
    let st = train_step(&mut m, &mut opt, &batch_of(&mut seeded(1), 2, 2), 1e-4).unwrap();
    let line = log_line(&st);
    let fields: Vec<&str> = line.split(' ').collect();
    assert_eq!(fields.len(), 3);
    assert_eq!(fields[0], "step=0");
    assert!(fields[1].strip_prefix("loss=").unwrap().parse::<f64>().is_ok());
    let t: f64 = fields[2].strip_prefix("t_mean=").unwrap().parse().unwrap();
    assert!(t > 0.0 && t < 1.0);
}

/// Central-difference check of every parameter gradient; returns the worst relative error.
fn fd_check<M: FlowModel<f64>>(model: &mut M, batch: &FlowBatch<f64>) -> f64 {
    let mut g = Graph::<f64>::new();
    let loss = loss_graph(model, &mut g, model.params(), batch).unwrap();
    let mut grads = g.backward(loss).unwrap();
    let analytic = g.param_grads(&mut grads);
    let eval = |m: &M| {
        let mut g = Graph::<f64>::inference();
        let l = loss_graph(m, &mut g, m.params(), batch).unwrap();
        g.value(l).data()[0]
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (id, grad) in analytic {
        for i in 0..grad.numel() {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let up = eval(model);
            model.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let down = eval(model);
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    assert_eq!(checked, model.params().num_scalars());
    worst
}

#[test]
fn toy_model_gradients_match_finite_differences() {
    let cfg = ToyMlpConfig {
        dim: 2,
        hidden: 9,
        layers: 1,
        time_freqs: 2,
        ctx_dim: 1,
    };
    let mut m = ToyMlp::<f64>::new(cfg, 3).unwrap();
    assert_eq!(m.params.num_scalars(), 101);
    let mut rng = seeded(4);
    let samples: Vec<_> = [0.1, 0.5, 0.8]
        .iter()
        .map(|&t| FlowSample::new(Tensor::randn(&[2], &mut rng), Tensor::randn(&[2], &mut rng), t).unwrap())
        .collect();
    let ctx = Tensor::<f64>::randn(&[3, 1], &mut rng);
    let batch = FlowBatch::from_samples(&samples, Some(ctx)).unwrap();
    let worst = fd_check(&mut m, &batch);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn context_contract_is_enforced() {
    let m = ToyMlp::<f32>::new(ToyMlpConfig { ctx_dim: 3, ..Default::default() }, 1).unwrap();
    let x = Tensor::zeros(&[4, 2]);
    assert!(m.velocity(&x, 0.5, None).is_err());
    assert!(m.velocity(&x, 0.5, Some(&Tensor::zeros(&[4, 2]))).is_err());
    assert_eq!(m.velocity(&x, 0.5, Some(&Tensor::zeros(&[1, 3]))).unwrap().shape(), &[4, 2]);
    assert!(m.velocity(&Tensor::zeros(&[4, 3]), 0.5, Some(&Tensor::zeros(&[4, 3]))).is_err());
}

fn rel_errors(target: &MixtureTarget, samples: &Tensor) -> (f64, f64) {
    let rows: Vec<Tensor> = samples.unstack();
    let (m, c) = sample_moments(&rows);
    let (tm, tc) = (target.mean(), target.covariance());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let dm: Vec<f64> = m.iter().zip(&tm).map(|(a, b)| a - b).collect();
    let flat = |c: &[Vec<f64>]| c.iter().flatten().copied().collect::<Vec<_>>();
    let dc: Vec<f64> = flat(&c).iter().zip(flat(&tc)).map(|(a, b)| a - b).collect();
    (norm(&dm) / norm(&tm), norm(&dc) / norm(&flat(&tc)))
}

#[test]
fn toy_mixture_samples_match_target_moments() {
    let target = MixtureTarget::new(
        [Tensor::new(vec![2], vec![-2.0, 0.0]).unwrap(), Tensor::new(vec![2], vec![2.0, 1.0]).unwrap()],
        0.5,
        0.3,
    )
    .unwrap();
    let mut model = ToyMlp::<f32>::new(ToyMlpConfig::default(), 3).unwrap();
    train_on_mixture(&mut model, &target, &MixtureRecipe::default()).unwrap();
    let samples = euler_sample(&model, None, 50, None, &[10_000, 2], 4).unwrap();
    let (em, ec) = rel_errors(&target, &samples);
    println!("mean error {em:.4}, covariance error {ec:.4}");
    assert!(em < 0.1 && ec < 0.1, "mean error {em}, covariance error {ec}");
}
