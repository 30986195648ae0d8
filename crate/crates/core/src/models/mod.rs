//! Model definitions and the declarative spec that assembles them.

pub mod conv;
pub mod fusion;
pub mod swin;

use serde::{Deserialize, Deserializer, Serialize};

use crate::autodiff::{Element, Var};
use crate::error::{config_err, Result};
use crate::nn::{Ctx, ParamStore};
use crate::rng::Rng;
pub use conv::{ConvConfig, ConvNet, ConvVariant};
pub use fusion::{FusionConfig, FusionMode, HybridModel, QueryStream};
pub use swin::{SwinConfig, SwinTransformer};

/// What every model returns from a forward pass.
pub struct ModelOutput<'t, F: Element> {
    /// `[N, 2]` class logits.
    pub logits: Var<'t, F>,
    /// `[N, D]` penultimate features (the KNN input).
    pub features: Var<'t, F>,
    /// `[N, T, C]` final token sequence, when the model has one.
    pub tokens: Option<Var<'t, F>>,
}

/// Declarative description of a model assembly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Swin(SwinConfig),
    Conv(ConvConfig),
    Hybrid {
        swin: SwinConfig,
        conv: ConvConfig,
        #[serde(default)]
        fusion: FusionConfig,
    },
}

impl ModelSpec {
    /// Named presets: `swin` (toy), `swin_tiny`, `resnet_lite`,
    /// `alexnet_lite`, `vgg_lite`, `hybrid` (toy Swin + resnet_lite,
    /// cross-attention) and `hybrid_concat`.
    pub fn from_name(name: &str) -> Result<Self> {
        let hybrid = |mode| ModelSpec::Hybrid {
            swin: SwinConfig::default(),
            conv: ConvConfig::new(ConvVariant::ResnetLite),
            fusion: FusionConfig {
                mode,
                ..Default::default()
            },
        };
        match name {
            "swin" => Ok(ModelSpec::Swin(SwinConfig::default())),
            "swin_tiny" => Ok(ModelSpec::Swin(SwinConfig::tiny())),
            "hybrid" => Ok(hybrid(FusionMode::CrossAttention)),
            "hybrid_concat" => Ok(hybrid(FusionMode::Concat)),
            other => match other.parse::<ConvVariant>() {
                Ok(v) => Ok(ModelSpec::Conv(ConvConfig::new(v))),
                Err(_) => Err(config_err!(
                    "unknown model '{}' (expected swin, swin_tiny, resnet_lite, alexnet_lite, vgg_lite, hybrid or hybrid_concat)",
                    name
                )),
            },
        }
    }

    pub fn name(&self) -> String {
        match self {
            ModelSpec::Swin(_) => "swin".into(),
            ModelSpec::Conv(c) => c.variant.name().into(),
            ModelSpec::Hybrid { fusion, .. } => match fusion.mode {
                FusionMode::Concat => "hybrid_concat".into(),
                FusionMode::CrossAttention => "hybrid".into(),
            },
        }
    }

    /// Input size the model is bound to, if any.
    pub fn fixed_image_size(&self) -> Option<usize> {
        match self {
            ModelSpec::Swin(s) | ModelSpec::Hybrid { swin: s, .. } => Some(s.image_size),
            ModelSpec::Conv(_) => None,
        }
    }

    /// True when some layer uses batch statistics while training.
    pub fn uses_batch_norm(&self) -> bool {
        let conv = |c: &ConvConfig| c.variant != ConvVariant::AlexnetLite;
        match self {
            ModelSpec::Swin(_) => false,
            ModelSpec::Conv(c) | ModelSpec::Hybrid { conv: c, .. } => conv(c),
        }
    }

    pub fn build<F: Element>(&self, store: &mut ParamStore<F>, rng: &mut Rng) -> Result<Model> {
        Ok(match self {
            ModelSpec::Swin(c) => Model::Swin(SwinTransformer::new(c, store, rng)?),
            ModelSpec::Conv(c) => Model::Conv(ConvNet::new(c, store, rng)?),
            ModelSpec::Hybrid { swin, conv, fusion } => Model::Hybrid(HybridModel::new(swin, conv, fusion, store, rng)?),
        })
    }
}

/// Accepts either a preset name or a full `{kind = ...}` table.
pub fn deserialize_model_spec<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<ModelSpec, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Name(String),
        Spec(ModelSpec),
    }
    match Repr::deserialize(d)? {
        Repr::Name(n) => ModelSpec::from_name(&n).map_err(serde::de::Error::custom),
        Repr::Spec(s) => Ok(s),
    }
}

/// A built model; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Swin(SwinTransformer),
    Conv(ConvNet),
    Hybrid(HybridModel),
}

impl Model {
    pub fn forward<'t, F: Element>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<ModelOutput<'t, F>> {
        match self {
            Model::Swin(m) => m.forward(ctx, x),
            Model::Conv(m) => m.forward(ctx, x),
            Model::Hybrid(m) => m.forward(ctx, x),
        }
    }
}
