//! Rectified-flow objective and sampling.
//!
//! Time runs from `t = 0` (pure noise `x0`) to `t = 1` (data `x1`) along the
//! straight path `xt = t·x1 + (1 − t)·x0`, whose velocity `x1 − x0` is the
//! regression target.

mod toy;
mod train;

pub use toy::{sample_moments, train_on_mixture, MixtureRecipe, MixtureTarget, ToyMlp, ToyMlpConfig};
pub use train::{loss_graph, log_line, train_step, FlowBatch, StepStats};

use crate::autograd::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::params::ParamStore;
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use rand::Rng as _;
use rand_distr::StandardNormal;

pub const DEFAULT_SAMPLING_STEPS: usize = 50;

fn check_unit(op: &'static str, t: f64) -> Result<()> {
    ensure!(
        (0.0..=1.0).contains(&t),
        Error::invalid(op, format!("t = {t} outside [0, 1]"))
    );
    Ok(())
}

pub fn interpolate<T: Scalar>(x0: &Tensor<T>, x1: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    check_unit("interpolate", t)?;
    let (a, b) = (T::f(t), T::f(1.0 - t));
    x1.zip_map(x0, "interpolate", |u, v| a * u + b * v)
}

pub fn target_velocity<T: Scalar>(x0: &Tensor<T>, x1: &Tensor<T>) -> Result<Tensor<T>> {
    x1.sub(x0)
}

/// Mean squared error between predicted and target velocity.
pub fn fm_loss<T: Scalar>(pred: &Tensor<T>, vt: &Tensor<T>) -> Result<f64> {
    pred.expect_same_shape("fm_loss", vt)?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(vt.data())
        .map(|(&p, &v)| {
            let d = p.to_f64().unwrap_or(f64::NAN) - v.to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum();
    Ok(s / pred.numel() as f64)
}

/// One training example on the straight path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample<T: Scalar = f32> {
    pub x0: Tensor<T>,
    pub x1: Tensor<T>,
    pub t: f64,
    pub xt: Tensor<T>,
    pub vt: Tensor<T>,
}

impl<T: Scalar> FlowSample<T> {
    pub fn new(x0: Tensor<T>, x1: Tensor<T>, t: f64) -> Result<Self> {
        let xt = interpolate(&x0, &x1, t)?;
        let vt = target_velocity(&x0, &x1)?;
        Ok(Self { x0, x1, t, xt, vt })
    }
}

/// Logit-normal times: `t = sigmoid(z)` with `z ~ N(mu, sigma²)`.
#[derive(Debug, Clone)]
pub struct TimestepSampler {
    pub mu: f64,
    pub sigma: f64,
    rng: rng::Rng,
}

impl TimestepSampler {
    pub fn new(mu: f64, sigma: f64, seed: u64) -> Result<Self> {
        ensure!(
            sigma > 0.0 && sigma.is_finite() && mu.is_finite(),
            Error::invalid("timestep_sampler", format!("need finite mu and sigma > 0, got mu={mu} sigma={sigma}"))
        );
        Ok(Self {
            mu,
            sigma,
            rng: rng::seeded(seed),
        })
    }

    pub fn standard(seed: u64) -> Self {
        Self::new(0.0, 1.0, seed).expect("valid parameters")
    }

    /// A time strictly inside `(0, 1)`; tails that would round onto an
    /// endpoint are pulled back by one unit of f64 precision.
    pub fn sample(&mut self) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        let t = 1.0 / (1.0 + (-(self.mu + self.sigma * z)).exp());
        t.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON)
    }
}

/// `vu + g·(vc − vu)`, evaluated as `g·vc + (1 − g)·vu` so both `g = 0` and
/// `g = 1` reproduce their input exactly.
pub fn cfg_velocity<T: Scalar>(v_cond: &Tensor<T>, v_uncond: &Tensor<T>, g: f64) -> Result<Tensor<T>> {
    let (a, b) = (T::f(g), T::f(1.0 - g));
    v_cond.zip_map(v_uncond, "cfg_velocity", |c, u| a * c + b * u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
    /// Context standing in for "no condition".
    pub null_context: Tensor,
}

impl GuidanceConfig {
    pub fn new(scale: f64, null_context: Tensor) -> Result<Self> {
        ensure!(
            scale >= 0.0 && scale.is_finite(),
            Error::invalid("guidance", format!("scale must be finite and >= 0, got {scale}"))
        );
        Ok(Self { scale, null_context })
    }
}

/// Something that predicts a velocity for a batched state at a shared time.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64, ctx: Option<&Tensor>) -> Result<Tensor>;
}

/// A trainable velocity model built on the autograd graph.
pub trait FlowModel<T: Scalar = f32> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
    /// Predicted velocity for `xt (B, ..)` with one time per batch item and
    /// an optional context whose leading axis is `B` or 1.
    fn forward_graph(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        xt: Var,
        t: &[f64],
        ctx: Option<Var>,
    ) -> Result<Var>;
}

impl<M: FlowModel<f32>> VelocityField for M {
    fn velocity(&self, x: &Tensor, t: f64, ctx: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let cv = ctx.map(|c| g.input(c.clone()));
        let ts = vec![t; x.dim(0)];
        let v = self.forward_graph(&mut g, self.params(), xv, &ts, cv)?;
        Ok(g.value(v).clone())
    }
}

/// Guided velocity at one point; a scale of exactly 1 skips the unconditional pass.
pub fn guided_velocity<M: VelocityField + ?Sized>(
    model: &M,
    x: &Tensor,
    t: f64,
    ctx: Option<&Tensor>,
    guidance: Option<&GuidanceConfig>,
) -> Result<Tensor> {
    let vc = model.velocity(x, t, ctx)?;
    match guidance {
        Some(gc) if gc.scale != 1.0 => {
            let vu = model.velocity(x, t, Some(&gc.null_context))?;
            cfg_velocity(&vc, &vu, gc.scale)
        }
        _ => Ok(vc),
    }
}

/// Integrate from noise at `t = 0` to `t = 1` with `steps` uniform Euler steps.
pub fn euler_sample<M: VelocityField + ?Sized>(
    model: &M,
    ctx: Option<&Tensor>,
    steps: usize,
    guidance: Option<&GuidanceConfig>,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor> {
    let x0 = rng::noise(seed, 0, 0, shape);
    euler_integrate(model, x0, ctx, steps, guidance)
}

/// Euler integration from a given `t = 0` state.
pub fn euler_integrate<M: VelocityField + ?Sized>(
    model: &M,
    x0: Tensor,
    ctx: Option<&Tensor>,
    steps: usize,
    guidance: Option<&GuidanceConfig>,
) -> Result<Tensor> {
    euler_loop(x0, steps, |_, x, t| guided_velocity(model, x, t, ctx, guidance))
}

/// Uniform Euler steps from `t = 0` to 1 with `velocity(step, x, t)`.
///
/// The state accumulates in f64 and the field sees its f32 rounding, so a
/// constant field lands on `x0 + v` regardless of the step count.
pub fn euler_loop(
    x0: Tensor,
    steps: usize,
    mut velocity: impl FnMut(usize, &Tensor, f64) -> Result<Tensor>,
) -> Result<Tensor> {
    ensure!(steps >= 1, Error::invalid("euler_sample", "need at least one step"));
    let dt = 1.0 / steps as f64;
    let shape = x0.shape().to_vec();
    let mut acc = x0.to_f64_vec();
    let mut x = x0;
    for i in 0..steps {
        let v = velocity(i, &x, i as f64 * dt)?;
        ensure!(
            v.shape() == shape.as_slice(),
            Error::shape("euler_sample", "velocity", format!("{shape:?}"), format!("{:?}", v.shape()))
        );
        for (a, &dv) in acc.iter_mut().zip(v.data()) {
            *a += dt * dv as f64;
        }
        x = Tensor::new(shape.clone(), acc.iter().map(|&a| a as f32).collect())?;
    }
    Ok(x)
}
