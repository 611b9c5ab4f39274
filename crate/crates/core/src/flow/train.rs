use super::{FlowModel, FlowSample};
use crate::autograd::{Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::params::{AdamW, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Samples stacked along a new leading batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBatch<T: Scalar = f32> {
    pub xt: Tensor<T>,
    pub vt: Tensor<T>,
    pub t: Vec<f64>,
    /// Leading axis `B` or 1 (shared).
    pub ctx: Option<Tensor<T>>,
}

impl<T: Scalar> FlowBatch<T> {
    pub fn from_samples(samples: &[FlowSample<T>], ctx: Option<Tensor<T>>) -> Result<Self> {
        ensure!(!samples.is_empty(), Error::invalid("flow_batch", "empty batch"));
        if let Some(c) = &ctx {
            ensure!(
                c.rank() >= 1 && (c.dim(0) == samples.len() || c.dim(0) == 1),
                Error::shape("flow_batch", "axis 0 (context batch)", samples.len(), c.shape().first().copied().unwrap_or(0))
            );
        }
        Ok(Self {
            xt: Tensor::stack(&samples.iter().map(|s| &s.xt).collect::<Vec<_>>())?,
            vt: Tensor::stack(&samples.iter().map(|s| &s.vt).collect::<Vec<_>>())?,
            t: samples.iter().map(|s| s.t).collect(),
            ctx,
        })
    }

    pub fn t_mean(&self) -> f64 {
        self.t.iter().sum::<f64>() / self.t.len() as f64
    }
}

/// Mean squared velocity error of `model` on `batch`, as a graph node.
pub fn loss_graph<T: Scalar, M: FlowModel<T> + ?Sized>(
    model: &M,
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    batch: &FlowBatch<T>,
) -> Result<Var> {
    let xt = g.input(batch.xt.clone());
    let ctx = batch.ctx.as_ref().map(|c| g.input(c.clone()));
    let pred = model.forward_graph(g, ps, xt, &batch.t, ctx)?;
    let vt = g.input(batch.vt.clone());
    let d = g.sub(pred, vt)?;
    let sq = g.square(d);
    Ok(g.mean_all(sq))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub t_mean: f64,
}

/// One optimizer step; a non-finite loss aborts before any parameter changes.
pub fn train_step<M: FlowModel<f32> + ?Sized>(
    model: &mut M,
    opt: &mut AdamW,
    batch: &FlowBatch,
    lr: f64,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let loss = loss_graph(model, &mut g, model.params(), batch)?;
    let lv = g.value(loss).data()[0] as f64;
    let step = opt.steps_taken();
    ensure!(
        lv.is_finite(),
        Error::NonFinite {
            step: step as usize,
            value: lv
        }
    );
    let mut grads = g.backward(loss)?;
    let pg = g.param_grads(&mut grads);
    drop(g);
    opt.step(model.params_mut(), &pg, lr)?;
    Ok(StepStats {
        step,
        loss: lv,
        t_mean: batch.t_mean(),
    })
}

pub fn log_line(s: &StepStats) -> String {
    format!("step={} loss={:.6} t_mean={:.6}", s.step, s.loss, s.t_mean)
}
