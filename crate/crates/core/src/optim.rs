//! RMSprop and AdamW with per-parameter state, plus freeze schedules.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Element, Tensor};
use crate::error::{config_err, Error, Result};
use crate::nn::{ParamId, ParamKind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Rmsprop,
    Adamw,
}

/// Optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// RMSprop smoothing constant.
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn rmsprop(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Rmsprop,
            learning_rate,
            weight_decay: 0.0,
            alpha: 0.99,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adamw(learning_rate: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            weight_decay,
            ..Self::rmsprop(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err!("learning rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.kind == OptimizerKind::Rmsprop && self.weight_decay != 0.0 {
            return Err(config_err!("weight decay is only supported with adamw"));
        }
        for (name, v) in [("alpha", self.alpha), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(config_err!("{} must lie in [0, 1), got {}", name, v));
            }
        }
        if !(self.eps > 0.0) {
            return Err(config_err!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

/// Moment estimates for every parameter of a store. `m` is unused by RMSprop.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<F> {
    pub steps: Vec<u64>,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Element> OptimState<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        OptimState {
            steps: vec![0; store.len()],
            m: zeros(),
            v: zeros(),
        }
    }
}

fn check_grads<F: Element>(store: &ParamStore<F>, grads: &[(ParamId, Tensor<F>)]) -> Result<()> {
    for (id, g) in grads {
        let p = store.param(*id);
        if p.value.shape() != g.shape() {
            return Err(Error::Dimension(format!("gradient {:?} for parameter {} of shape {:?}", g.shape(), p.name, p.value.shape())));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} at flat index {} is {}", p.name, i, g.data()[i])));
        }
    }
    Ok(())
}

/// `v ← αv + (1−α)g²; θ ← θ − lr·g/(√v + eps)` on one tensor.
pub fn rmsprop_step<F: Element>(theta: &mut [F], g: &[F], v: &mut [F], lr: f64, alpha: f64, eps: f64) {
    let (lr, a, eps) = (F::from_f64(lr), F::from_f64(alpha), F::from_f64(eps));
    let one = F::one();
    for ((t, &g), v) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = a * *v + (one - a) * g * g;
        *t = *t - lr * g / (v.sqrt() + eps);
    }
}

/// Decoupled decay `θ ← θ(1 − lr·wd)`, then the bias-corrected Adam update at
/// step `t` (1-based).
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<F: Element>(
    theta: &mut [F],
    g: &[F],
    m: &mut [F],
    v: &mut [F],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    let c1 = F::from_f64(1.0 - beta1.powi(t as i32));
    let c2 = F::from_f64(1.0 - beta2.powi(t as i32));
    let decay = F::from_f64(1.0 - lr * weight_decay);
    let (lr, b1, b2, eps) = (F::from_f64(lr), F::from_f64(beta1), F::from_f64(beta2), F::from_f64(eps));
    let one = F::one();
    for (((th, &g), m), v) in theta.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        *th = *th * decay;
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *th = *th - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Applies one optimizer step to the parameters that have gradients and
/// belong to a trainable group. All gradients are validated before any
/// parameter changes.
pub fn step<F: Element>(
    cfg: &OptimizerConfig,
    store: &mut ParamStore<F>,
    state: &mut OptimState<F>,
    grads: &[(ParamId, Tensor<F>)],
    trainable_groups: &[bool],
) -> Result<()> {
    check_grads(store, grads)?;
    for (id, g) in grads {
        let i = id.index();
        let p = store.param(*id);
        if p.kind != ParamKind::Trainable || !trainable_groups.get(p.group).copied().unwrap_or(false) {
            continue;
        }
        state.steps[i] += 1;
        let theta = store.value_mut(*id).data_mut();
        match cfg.kind {
            OptimizerKind::Rmsprop => rmsprop_step(theta, g.data(), state.v[i].data_mut(), cfg.learning_rate, cfg.alpha, cfg.eps),
            OptimizerKind::Adamw => adamw_step(
                theta,
                g.data(),
                state.m[i].data_mut(),
                state.v[i].data_mut(),
                state.steps[i],
                cfg.learning_rate,
                cfg.beta1,
                cfg.beta2,
                cfg.eps,
                cfg.weight_decay,
            ),
        }
    }
    Ok(())
}

/// Which parameter groups train at a given epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FreezePolicy {
    #[default]
    None,
    /// Only the final `k` groups train.
    LastK { k: usize },
    /// `start_k` final groups train at first; one more unfreezes every
    /// `epochs_per_stage` epochs.
    Gradual { start_k: usize, epochs_per_stage: usize },
}

impl std::str::FromStr for FreezePolicy {
    type Err = Error;

    /// `none`, `last_k:K` or `gradual:START:EVERY`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |t: &str| t.parse::<usize>().map_err(|_| config_err!("bad number '{}' in freeze policy '{}'", t, s));
        match parts.as_slice() {
            ["none"] => Ok(FreezePolicy::None),
            ["last_k", k] => Ok(FreezePolicy::LastK { k: num(k)? }),
            ["gradual", a, b] => Ok(FreezePolicy::Gradual {
                start_k: num(a)?,
                epochs_per_stage: num(b)?,
            }),
            _ => Err(config_err!("unknown freeze policy '{}' (expected none, last_k:K or gradual:START:EVERY)", s)),
        }
    }
}

/// Trainable flag per group for `epoch` (0-based).
pub fn apply_freeze_policy(num_groups: usize, policy: &FreezePolicy, epoch: usize) -> Result<Vec<bool>> {
    let active = match *policy {
        FreezePolicy::None => num_groups,
        FreezePolicy::LastK { k } => {
            if k == 0 || k > num_groups {
                return Err(config_err!("last_k({}) on a model with {} groups", k, num_groups));
            }
            k
        }
        FreezePolicy::Gradual { start_k, epochs_per_stage } => {
            if start_k == 0 || start_k > num_groups || epochs_per_stage == 0 {
                return Err(config_err!(
                    "gradual({}, {}) on a model with {} groups",
                    start_k,
                    epochs_per_stage,
                    num_groups
                ));
            }
            (start_k + epoch / epochs_per_stage).min(num_groups)
        }
    };
    Ok((0..num_groups).map(|g| g >= num_groups - active).collect())
}
