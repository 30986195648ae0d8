use super::context::Ctx;
use super::params::{Init, ParamId, ParamStore};
use crate::autodiff::{self, BatchNormOptions, Element, RunningStats, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;

/// Fully connected layer over the last axis; weight is stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        store.scoped(name, |s| Linear {
            weight: s.add_init("weight", &[in_dim, out_dim], init, rng),
            bias: bias.then(|| s.add("bias", Tensor::zeros(&[out_dim]))),
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t, F: Element>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        x.linear(ctx.param(self.weight), self.bias.map(|b| ctx.param(b)))
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        store.scoped(name, |s| LayerNorm {
            gamma: s.add("gamma", Tensor::full(&[dim], F::one())),
            beta: s.add("beta", Tensor::zeros(&[dim])),
            dim,
        })
    }

    pub fn forward<'t, F: Element>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        autodiff::layer_norm(x, ctx.param(self.gamma), ctx.param(self.beta), LN_EPS)
    }
}

/// 2-D convolution with an optional per-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        store.scoped(name, |s| Conv2d {
            weight: s.add_init("weight", &[out_ch, in_ch, kernel, kernel], init, rng),
            bias: bias.then(|| s.add("bias", Tensor::zeros(&[out_ch]))),
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        })
    }

    pub fn fan_in(in_ch: usize, kernel: usize) -> usize {
        in_ch * kernel * kernel
    }

    pub fn forward<'t, F: Element>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let y = autodiff::conv2d(x, ctx.param(self.weight), self.stride, self.padding)?;
        match self.bias {
            Some(b) => y.add(ctx.param(b).reshape(&[1, self.out_ch, 1, 1])?),
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + if self.bias.is_some() { self.out_ch } else { 0 }
    }
}

/// Batch normalization over channels with running statistics kept as buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        store.scoped(name, |s| BatchNorm2d {
            gamma: s.add("gamma", Tensor::full(&[channels], F::one())),
            beta: s.add("beta", Tensor::zeros(&[channels])),
            running_mean: s.add_buffer("running_mean", Tensor::zeros(&[channels])),
            running_var: s.add_buffer("running_var", Tensor::full(&[channels], F::one())),
            channels,
        })
    }

    pub fn forward<'t, F: Element>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let running = RunningStats {
            mean: ctx.store.value(self.running_mean).clone(),
            var: ctx.store.value(self.running_var).clone(),
        };
        let opts = BatchNormOptions {
            training: ctx.training(),
            ..Default::default()
        };
        let (y, stats) = autodiff::batch_norm(x, ctx.param(self.gamma), ctx.param(self.beta), &running, opts)?;
        if let Some(stats) = stats {
            ctx.push_buffer_update(self.running_mean, stats.mean);
            ctx.push_buffer_update(self.running_var, stats.var);
        }
        Ok(y)
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}
