use super::FlowModel;
use crate::autograd::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::params::{init_fan_in, ParamId, ParamStore};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyMlpConfig {
    pub dim: usize,
    pub hidden: usize,
    /// Hidden layers; the network has `layers + 1` linear maps.
    pub layers: usize,
    /// Sinusoid frequencies of the time features (each gives a sin and a cos).
    pub time_freqs: usize,
    /// Width of a per-item context vector (0 for none).
    pub ctx_dim: usize,
}

impl Default for ToyMlpConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            hidden: 64,
            layers: 2,
            time_freqs: 4,
            ctx_dim: 0,
        }
    }
}

impl ToyMlpConfig {
    fn in_features(&self) -> usize {
        self.dim + 1 + 2 * self.time_freqs + self.ctx_dim
    }
}

/// Small MLP velocity model on flat `(B, dim)` states.
#[derive(Debug, Clone)]
pub struct ToyMlp<T: Scalar = f32> {
    pub config: ToyMlpConfig,
    pub params: ParamStore<T>,
    layers: Vec<(ParamId, ParamId)>,
}

impl<T: Scalar> ToyMlp<T> {
    pub fn new(config: ToyMlpConfig, seed: u64) -> Result<Self> {
        ensure!(
            config.dim > 0 && config.hidden > 0,
            Error::invalid("toy_mlp", "dim and hidden must be positive")
        );
        let mut r = rng::seeded(seed);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut fan_in = config.in_features();
        for i in 0..=config.layers {
            let out = if i == config.layers { config.dim } else { config.hidden };
            let w = params.add(format!("l{i}.w"), init_fan_in(&[out, fan_in], fan_in, &mut r))?;
            let b = params.add(format!("l{i}.b"), Tensor::zeros(&[out]))?;
            layers.push((w, b));
            fan_in = out;
        }
        Ok(Self { config, params, layers })
    }

    /// `[t, sin(2π f t), cos(2π f t)]` for `f = 1..=time_freqs`, one row per item.
    pub fn time_features(&self, t: &[f64]) -> Tensor<T> {
        let k = self.config.time_freqs;
        let width = 1 + 2 * k;
        Tensor::from_fn(&[t.len(), width], |i| {
            let (row, col) = (i / width, i % width);
            let tv = t[row];
            T::f(match col {
                0 => tv,
                c if c <= k => (std::f64::consts::TAU * c as f64 * tv).sin(),
                c => (std::f64::consts::TAU * (c - k) as f64 * tv).cos(),
            })
        })
    }
}

impl<T: Scalar> FlowModel<T> for ToyMlp<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn forward_graph(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        xt: Var,
        t: &[f64],
        ctx: Option<Var>,
    ) -> Result<Var> {
        let s = g.shape(xt).to_vec();
        ensure!(
            s.len() == 2 && s[1] == self.config.dim,
            Error::shape("toy_mlp", "input", format!("(B, {})", self.config.dim), format!("{s:?}"))
        );
        ensure!(
            t.len() == s[0],
            Error::shape("toy_mlp", "times", s[0], t.len())
        );
        let tf = g.input(self.time_features(t));
        let mut parts = vec![xt, tf];
        match (ctx, self.config.ctx_dim) {
            (None, 0) => {}
            (Some(c), d) if d > 0 => {
                let cs = g.shape(c).to_vec();
                ensure!(
                    cs.len() == 2 && cs[1] == d && (cs[0] == s[0] || cs[0] == 1),
                    Error::shape("toy_mlp", "context", format!("(B or 1, {d})"), format!("{cs:?}"))
                );
                let c = if cs[0] == s[0] { c } else { g.expand(c, &[s[0], d])? };
                parts.push(c);
            }
            (None, d) => return Err(Error::invalid("toy_mlp", format!("model expects a context of width {d}"))),
            (Some(_), _) => return Err(Error::invalid("toy_mlp", "model takes no context")),
        }
        let mut h = g.cat(&parts, 1)?;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = g.param(ps, w);
            let bv = g.param(ps, b);
            h = g.linear(h, wv, Some(bv))?;
            if i + 1 < self.layers.len() {
                h = g.silu(h);
            }
        }
        Ok(h)
    }
}

/// Two isotropic Gaussian components of a common shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureTarget {
    pub means: [Tensor; 2],
    pub std: f64,
    /// Probability of the first component.
    pub weight: f64,
}

impl MixtureTarget {
    pub fn new(means: [Tensor; 2], std: f64, weight: f64) -> Result<Self> {
        means[0].expect_same_shape("mixture_target", &means[1])?;
        ensure!(
            std >= 0.0 && (0.0..=1.0).contains(&weight),
            Error::invalid("mixture_target", "std must be >= 0 and weight in [0, 1]")
        );
        Ok(Self { means, std, weight })
    }

    pub fn shape(&self) -> &[usize] {
        self.means[0].shape()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let k = usize::from(rng.random::<f64>() >= self.weight);
        let s = self.std;
        let m = &self.means[k];
        Tensor::from_fn(m.shape(), |i| m.data()[i] + (s * rng.sample::<f64, _>(StandardNormal)) as f32)
    }
}

impl MixtureTarget {
    pub fn mean(&self) -> Vec<f64> {
        let w = self.weight;
        let (a, b) = (self.means[0].data(), self.means[1].data());
        a.iter().zip(b).map(|(&x, &y)| w * x as f64 + (1.0 - w) * y as f64).collect()
    }

    /// `std² I + w (1 − w) Δ Δᵀ` with `Δ` the difference of the means.
    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let w = self.weight;
        let d: Vec<f64> = self.means[0]
            .data()
            .iter()
            .zip(self.means[1].data())
            .map(|(&x, &y)| x as f64 - y as f64)
            .collect();
        let s2 = self.std * self.std;
        (0..d.len())
            .map(|i| (0..d.len()).map(|j| w * (1.0 - w) * d[i] * d[j] + if i == j { s2 } else { 0.0 }).collect())
            .collect()
    }
}

/// Sample mean and (biased) covariance of flattened draws.
pub fn sample_moments(samples: &[Tensor]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = samples.len() as f64;
    let d = samples.first().map_or(0, Tensor::numel);
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s.data()) {
            *m += v as f64 / n;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for s in samples {
        let c: Vec<f64> = s.data().iter().zip(&mean).map(|(&v, &m)| v as f64 - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += c[i] * c[j] / n;
            }
        }
    }
    (mean, cov)
}

/// Optimizer settings for [`train_on_mixture`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureRecipe {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MixtureRecipe {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 256,
            lr: 2e-3,
            seed: 0,
        }
    }
}

/// Fits `model` to `target` with logit-normal times; batches depend only on
/// `(seed, step)`.
pub fn train_on_mixture(
    model: &mut ToyMlp,
    target: &MixtureTarget,
    recipe: &MixtureRecipe,
) -> Result<Vec<super::StepStats>> {
    use super::{train_step, FlowBatch, FlowSample, TimestepSampler};
    use crate::params::{AdamW, AdamWConfig};
    ensure!(
        target.shape() == [model.config.dim],
        Error::shape("train_on_mixture", "target", model.config.dim, format!("{:?}", target.shape()))
    );
    let mut opt = AdamW::new(&model.params, AdamWConfig::default());
    let mut log = Vec::with_capacity(recipe.steps);
    for step in 0..recipe.steps {
        let mut r = rng::seeded(rng::derive_seed(recipe.seed, 0x4d49, step as u64));
        let mut ts = TimestepSampler::standard(rng::derive_seed(recipe.seed, 0x4d4a, step as u64));
        let samples = (0..recipe.batch)
            .map(|_| {
                let x1 = target.sample(&mut r);
                let x0 = Tensor::randn(x1.shape(), &mut r);
                FlowSample::new(x0, x1, ts.sample())
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = FlowBatch::from_samples(&samples, None)?;
        // Cosine decay to a tenth of the peak.
        let lr = recipe.lr * (0.55 + 0.45 * (std::f64::consts::PI * step as f64 / recipe.steps as f64).cos());
        log.push(train_step(model, &mut opt, &batch, lr)?);
    }
    Ok(log)
}
