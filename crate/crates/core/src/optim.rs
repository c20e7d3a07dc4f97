//! AdamW with decoupled weight decay, the per-epoch cosine schedule, and an
//! exponential moving average of the weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            config,
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One AdamW update of every parameter.
///
/// `param −= lr·(m̂/(√v̂ + ε) + wd·param)`, with the weight decay scaled by the
/// current learning rate. The learning rate is read from `state.config.lr`,
/// which the training loop sets from the schedule.
pub fn adamw_step(state: &mut OptimizerState, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::shape(format!(
            "optimizer tracks {} tensors, got {} params and {} grads",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if !p.same_shape(g) || !p.same_shape(&state.m[i]) {
            return Err(Error::shape(format!("parameter {i} and its gradient differ in shape")));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient blow-up".into()));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *w -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
        }
    }
    Ok(())
}

/// `base·(1 + cos(π·epoch/total))/2`.
pub fn cosine_lr(base_lr: f64, epoch: usize, total_epochs: usize) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::invalid("cosine schedule needs at least one epoch"));
    }
    if epoch > total_epochs {
        return Err(Error::invalid(format!(
            "epoch {epoch} beyond schedule length {total_epochs}"
        )));
    }
    let frac = epoch as f64 / total_epochs as f64;
    Ok(base_lr * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0)
}

pub const DEFAULT_EMA_DECAY: f64 = 0.9997;

#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub shadow: Vec<Tensor>,
    pub decay: f64,
    /// Updates applied so far.
    pub updates: u64,
}

impl EmaState {
    pub fn new<'a>(decay: f64, params: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::invalid(format!("EMA decay {decay} outside [0, 1)")));
        }
        Ok(Self {
            shadow: params.into_iter().cloned().collect(),
            decay,
            updates: 0,
        })
    }
}

/// `min(decay, (1 + t) / (10 + t))` after `t` updates: the shadow follows
/// the weights closely early on and settles at `decay`.
pub fn warmup_decay(decay: f64, updates: u64) -> f64 {
    let t = updates as f64;
    decay.min((1.0 + t) / (10.0 + t))
}

/// `shadow ← decay·shadow + (1 − decay)·param`.
pub fn ema_update<'a>(state: &mut EmaState, params: impl IntoIterator<Item = &'a Tensor>) -> Result<()> {
    let d = state.decay;
    blend(state, params, d)
}

/// [`ema_update`] with the decay capped by [`warmup_decay`].
pub fn ema_update_warmup<'a>(state: &mut EmaState, params: impl IntoIterator<Item = &'a Tensor>) -> Result<()> {
    let d = warmup_decay(state.decay, state.updates);
    blend(state, params, d)
}

fn blend<'a>(state: &mut EmaState, params: impl IntoIterator<Item = &'a Tensor>, d: f64) -> Result<()> {
    let mut n = 0;
    for (s, p) in state.shadow.iter_mut().zip(params) {
        if !s.same_shape(p) {
            return Err(Error::shape(format!("EMA shadow {n} does not match its parameter")));
        }
        // Equal values are skipped so a converged shadow stays bit-exact.
        for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
            if *a != b {
                *a = d * *a + (1.0 - d) * b;
            }
        }
        n += 1;
    }
    if n != state.shadow.len() {
        return Err(Error::shape("EMA received fewer parameters than it tracks"));
    }
    state.updates += 1;
    Ok(())
}
