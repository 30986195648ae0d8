//! Parameter storage, forward-pass context and the basic layers shared by all
//! models.

mod context;
mod layers;
mod params;

pub use context::{Ctx, Mode};
pub use layers::{BatchNorm2d, Conv2d, LayerNorm, Linear, LN_EPS};
pub use params::{Init, Param, ParamId, ParamKind, ParamStore};
