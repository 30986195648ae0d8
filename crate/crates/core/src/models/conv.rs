//! Reduced convolutional baselines.
//!
//! Layer tables (`w` = width, `D` = feature_dim, every conv 3×3 padding 1
//! unless noted; BN = batch norm):
//!
//! | variant | body | features | head |
//! |---|---|---|---|
//! | `resnet_lite` | stem conv(3→w)+BN+ReLU; block(w→w); block(w→w); block(w→D, stride 2, 1×1 projection); block(D→D) | GAP → D | dropout, linear(D→2) |
//! | `alexnet_lite` | conv5×5 s2 p2 (3→w)+ReLU, maxpool 2; conv(w→2w)+ReLU, maxpool 2; conv(2w→2w)+ReLU | GAP, linear(2w→D)+ReLU | dropout, linear(D→2) |
//! | `vgg_lite` | conv(3→w)+BN+ReLU; conv(w→w)+BN+ReLU; maxpool 2; conv(w→2w)+BN+ReLU; conv(2w→2w)+BN+ReLU; maxpool 2 | GAP, linear(2w→D)+ReLU | dropout, linear(D→2) |
//!
//! A residual block is `relu(BN(conv(relu(BN(conv(x))))) + shortcut(x))`;
//! the shortcut is the identity when shapes match, else 1×1 conv + BN.

use serde::{Deserialize, Serialize};

use super::ModelOutput;
use crate::autodiff::{self, Element, Var};
use crate::error::{config_err, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx, Init, Linear, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvVariant {
    ResnetLite,
    AlexnetLite,
    VggLite,
}

impl ConvVariant {
    pub const ALL: [ConvVariant; 3] = [ConvVariant::ResnetLite, ConvVariant::AlexnetLite, ConvVariant::VggLite];

    pub fn name(self) -> &'static str {
        match self {
            ConvVariant::ResnetLite => "resnet_lite",
            ConvVariant::AlexnetLite => "alexnet_lite",
            ConvVariant::VggLite => "vgg_lite",
        }
    }
}

impl std::str::FromStr for ConvVariant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        ConvVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| config_err!("unknown conv variant '{}' (expected resnet_lite, alexnet_lite or vgg_lite)", s))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    pub variant: ConvVariant,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
}

fn default_width() -> usize {
    16
}
fn default_dropout() -> f64 {
    0.5
}
fn default_classes() -> usize {
    2
}
fn default_feature_dim() -> usize {
    64
}

impl ConvConfig {
    pub fn new(variant: ConvVariant) -> Self {
        ConvConfig {
            variant,
            width: default_width(),
            dropout: default_dropout(),
            num_classes: default_classes(),
            feature_dim: default_feature_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.feature_dim == 0 {
            return Err(config_err!("conv width and feature_dim must be positive"));
        }
        if self.num_classes != 2 {
            return Err(config_err!("only binary classification is supported, got num_classes {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Channels of the final convolutional feature map.
    pub fn map_channels(&self) -> usize {
        match self.variant {
            ConvVariant::ResnetLite => self.feature_dim,
            ConvVariant::AlexnetLite | ConvVariant::VggLite => 2 * self.width,
        }
    }

    /// Trainable parameter count implied by the layer table.
    pub fn param_count(&self) -> usize {
        let (w, d) = (self.width, self.feature_dim);
        let conv = |i: usize, o: usize, k: usize| i * o * k * k;
        let bn = |c: usize| 2 * c;
        let fc = |i: usize, o: usize| i * o + o;
        match self.variant {
            ConvVariant::ResnetLite => {
                let block = |i: usize, o: usize| {
                    conv(i, o, 3) + bn(o) + conv(o, o, 3) + bn(o) + if i != o { conv(i, o, 1) + bn(o) } else { 0 }
                };
                conv(3, w, 3) + bn(w) + 2 * block(w, w) + block(w, d) + block(d, d) + fc(d, 2)
            }
            ConvVariant::AlexnetLite => {
                conv(3, w, 5) + w + conv(w, 2 * w, 3) + 2 * w + conv(2 * w, 2 * w, 3) + 2 * w + fc(2 * w, d) + fc(d, 2)
            }
            ConvVariant::VggLite => {
                conv(3, w, 3)
                    + bn(w)
                    + conv(w, w, 3)
                    + bn(w)
                    + conv(w, 2 * w, 3)
                    + bn(2 * w)
                    + conv(2 * w, 2 * w, 3)
                    + bn(2 * w)
                    + fc(2 * w, d)
                    + fc(d, 2)
            }
        }
    }
}

fn he(in_ch: usize, k: usize) -> Init {
    Init::He {
        fan_in: Conv2d::fan_in(in_ch, k),
    }
}

/// Conv (no bias) followed by batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        store.scoped(name, |s| ConvBn {
            conv: Conv2d::new(s, "conv", in_ch, out_ch, kernel, stride, padding, false, he(in_ch, kernel), rng),
            bn: BatchNorm2d::new(s, "bn", out_ch),
        })
    }

    pub fn forward<'t, F: Element>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        self.bn.forward(ctx, self.conv.forward(ctx, x)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Self {
        store.scoped(name, |s| ResidualBlock {
            conv1: ConvBn::new(s, "conv1", in_ch, out_ch, 3, stride, 1, rng),
            conv2: ConvBn::new(s, "conv2", out_ch, out_ch, 3, 1, 1, rng),
            shortcut: (in_ch != out_ch || stride != 1).then(|| ConvBn::new(s, "shortcut", in_ch, out_ch, 1, stride, 0, rng)),
        })
    }

    /// The residual branch `F(x)` alone.
    pub fn branch<'t, F: Element>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        self.conv2.forward(ctx, self.conv1.forward(ctx, x)?.relu())
    }

    pub fn forward<'t, F: Element>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let in_ch = self.conv1.conv.in_ch;
        if x.shape().get(1) != Some(&in_ch) {
            return Err(config_err!("residual block expects {} input channels, got {:?}", in_ch, x.shape()));
        }
        let sc = match &self.shortcut {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        Ok(self.branch(ctx, x)?.add(sc)?.relu())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Resnet { stem: ConvBn, blocks: Vec<ResidualBlock> },
    Alexnet { convs: Vec<Conv2d> },
    Vgg { convs: Vec<ConvBn> },
}

/// A lite CNN with its classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    pub config: ConvConfig,
    body: Body,
    fc1: Option<Linear>,
    pub head: Linear,
}

impl ConvNet {
    pub fn new<F: Element>(config: &ConvConfig, store: &mut ParamStore<F>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (w, d) = (config.width, config.feature_dim);
        let fc_init = |i: usize| Init::FanInUniform { fan_in: i };
        let (body, fc1) = match config.variant {
            ConvVariant::ResnetLite => {
                store.begin_group("stem");
                let stem = ConvBn::new(store, "stem", 3, w, 3, 1, 1, rng);
                let plan = [(w, w, 1), (w, w, 1), (w, d, 2), (d, d, 1)];
                let blocks = plan
                    .iter()
                    .enumerate()
                    .map(|(i, &(a, b, s))| {
                        let name = format!("block{i}");
                        store.begin_group(&name);
                        ResidualBlock::new(store, &name, a, b, s, rng)
                    })
                    .collect();
                (Body::Resnet { stem, blocks }, None)
            }
            ConvVariant::AlexnetLite => {
                let plan = [(3, w, 5, 2, 2), (w, 2 * w, 3, 1, 1), (2 * w, 2 * w, 3, 1, 1)];
                let convs = plan
                    .iter()
                    .enumerate()
                    .map(|(i, &(a, b, k, s, p))| {
                        let name = format!("conv{i}");
                        store.begin_group(&name);
                        Conv2d::new(store, &name, a, b, k, s, p, true, he(a, k), rng)
                    })
                    .collect();
                store.begin_group("fc1");
                let fc1 = Linear::new(store, "fc1", 2 * w, d, true, fc_init(2 * w), rng);
                (Body::Alexnet { convs }, Some(fc1))
            }
            ConvVariant::VggLite => {
                let plan = [(3, w), (w, w), (w, 2 * w), (2 * w, 2 * w)];
                let convs = plan
                    .iter()
                    .enumerate()
                    .map(|(i, &(a, b))| {
                        let name = format!("conv{i}");
                        store.begin_group(&name);
                        ConvBn::new(store, &name, a, b, 3, 1, 1, rng)
                    })
                    .collect();
                store.begin_group("fc1");
                let fc1 = Linear::new(store, "fc1", 2 * w, d, true, fc_init(2 * w), rng);
                (Body::Vgg { convs }, Some(fc1))
            }
        };
        store.begin_group("head");
        let head = Linear::new(store, "head", d, config.num_classes, true, fc_init(d), rng);
        Ok(ConvNet {
            config: config.clone(),
            body,
            fc1,
            head,
        })
    }

    pub fn residual_blocks(&self) -> &[ResidualBlock] {
        match &self.body {
            Body::Resnet { blocks, .. } => blocks,
            _ => &[],
        }
    }

    /// Final convolutional feature map `[N, C, h, w]`.
    pub fn feature_map<'t, F: Element>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(config_err!("conv backbone expects [N, 3, H, W] input, got {:?}", s));
        }
        match &self.body {
            Body::Resnet { stem, blocks } => {
                let mut h = stem.forward(ctx, x)?.relu();
                for b in blocks {
                    h = b.forward(ctx, h)?;
                }
                Ok(h)
            }
            Body::Alexnet { convs } => {
                let h = autodiff::max_pool2d(convs[0].forward(ctx, x)?.relu(), 2, 2)?;
                let h = autodiff::max_pool2d(convs[1].forward(ctx, h)?.relu(), 2, 2)?;
                Ok(convs[2].forward(ctx, h)?.relu())
            }
            Body::Vgg { convs } => {
                let h = convs[0].forward(ctx, x)?.relu();
                let h = autodiff::max_pool2d(convs[1].forward(ctx, h)?.relu(), 2, 2)?;
                let h = convs[2].forward(ctx, h)?.relu();
                autodiff::max_pool2d(convs[3].forward(ctx, h)?.relu(), 2, 2)
            }
        }
    }

    pub fn classify<'t, F: Element>(&self, ctx: &Ctx<'t, F>, features: Var<'t, F>) -> Result<Var<'t, F>> {
        let h = autodiff::dropout(features, self.config.dropout, &mut ctx.rng(), ctx.training())?;
        self.head.forward(ctx, h)
    }

    pub fn forward<'t, F: Element>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<ModelOutput<'t, F>> {
        let map = self.feature_map(ctx, x)?;
        let s = map.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let tokens = map.reshape(&[n, c, hw])?.permute(&[0, 2, 1])?;
        let pooled = tokens.mean_axis(1)?;
        let features = match &self.fc1 {
            Some(fc) => fc.forward(ctx, pooled)?.relu(),
            None => pooled,
        };
        let logits = self.classify(ctx, features)?;
        Ok(ModelOutput {
            logits,
            features,
            tokens: Some(tokens),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::nn::Mode;
    use crate::rng::rng_from_seed;

    fn input(n: usize, s: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, 3, s, s], |i| ((i * 37) % 19) as f64 / 9.0 - 1.0)
    }

    #[test]
    fn shapes_counts_and_determinism() {
        for v in ConvVariant::ALL {
            let cfg = ConvConfig {
                width: 4,
                feature_dim: 6,
                ..ConvConfig::new(v)
            };
            let mut store = ParamStore::<f64>::new();
            let net = ConvNet::new(&cfg, &mut store, &mut rng_from_seed(1)).unwrap();
            assert_eq!(store.num_trainable(), cfg.param_count(), "{v:?}");
            let run = || {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &store, Mode::Eval, 0);
                let out = net.forward(&ctx, ctx.input(input(2, 16))).unwrap();
                ((*out.logits.value()).clone(), out.features.shape())
            };
            let (a, fs) = run();
            assert_eq!(a.shape(), &[2, 2]);
            assert_eq!(fs, vec![2, 6]);
            assert_eq!(a, run().0);
        }
    }

    #[test]
    fn zero_branch_block_is_relu_of_input() {
        let mut store = ParamStore::<f64>::new();
        let block = ResidualBlock::new(&mut store, "b", 3, 3, 1, &mut rng_from_seed(2));
        let w = block.conv1.conv.weight;
        store.set(w, Tensor::zeros(store.value(w).shape())).unwrap();
        let w = block.conv2.conv.weight;
        store.set(w, Tensor::zeros(store.value(w).shape())).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, mode, 0);
            let x = input(2, 4);
            let y = block.forward(&ctx, ctx.input(x.clone())).unwrap();
            let expect: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
            assert_eq!(y.value().data(), expect.as_slice());
        }
    }

    #[test]
    fn stride_two_block_halves_space() {
        let mut store = ParamStore::<f64>::new();
        let block = ResidualBlock::new(&mut store, "b", 3, 5, 2, &mut rng_from_seed(2));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval, 0);
        let y = block.forward(&ctx, ctx.input(input(1, 8))).unwrap();
        assert_eq!(y.shape(), vec![1, 5, 4, 4]);
    }

    #[test]
    fn unknown_variant_is_config_error() {
        assert!(matches!("lenet".parse::<ConvVariant>(), Err(crate::Error::Config(_))));
    }
}
