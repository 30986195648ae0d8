//! Transformer + CNN hybrid: feature concatenation or cross-attention between
//! the two token streams.

use serde::{Deserialize, Serialize};

use super::conv::{ConvConfig, ConvNet};
use super::swin::{SwinConfig, SwinTransformer};
use super::ModelOutput;
use crate::autodiff::{self, concat, Element, Var};
use crate::error::{config_err, dim_err, Result};
use crate::nn::{Ctx, Init, LayerNorm, Linear, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Concat,
    CrossAttention,
}

/// Which backbone supplies the attention queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStream {
    Swin,
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub shared_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub query_stream: QueryStream,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::CrossAttention,
            shared_dim: 32,
            heads: 4,
            dropout: 0.1,
            query_stream: QueryStream::Swin,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == FusionMode::CrossAttention && (self.heads == 0 || !self.shared_dim.is_multiple_of(self.heads)) {
            return Err(config_err!("{} heads do not divide shared_dim {}", self.heads, self.shared_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// `[N, Da] ‖ [N, Db] → [N, Da + Db]`.
pub fn concat_fuse<'t, F: Element>(a: Var<'t, F>, b: Var<'t, F>) -> Result<Var<'t, F>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(dim_err!("concat_fuse of {:?} and {:?}", sa, sb));
    }
    concat(&[a, b], 1)
}

/// One multi-head cross-attention block with residual and layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub norm: LayerNorm,
    pub dim: usize,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(config_err!("{} heads do not divide dimension {}", heads, dim));
        }
        let init = Init::TruncNormal(0.02);
        Ok(store.scoped(name, |s| CrossAttention {
            wq: Linear::new(s, "wq", dim, dim, true, init, rng),
            wk: Linear::new(s, "wk", dim, dim, true, init, rng),
            wv: Linear::new(s, "wv", dim, dim, true, init, rng),
            wo: Linear::new(s, "wo", dim, dim, true, init, rng),
            norm: LayerNorm::new(s, "norm", dim),
            dim,
            heads,
        }))
    }

    fn split<'t, F: Element>(&self, x: Var<'t, F>, n: usize, t: usize) -> Result<Var<'t, F>> {
        let hd = self.dim / self.heads;
        x.reshape(&[n, t, self.heads, hd])?.permute(&[0, 2, 1, 3])?.reshape(&[n * self.heads, t, hd])
    }

    /// Returns attention weights `[N, heads, Tq, Tk]` and
    /// `norm(q + Wo·attn(q, kv))` of shape `[N, Tq, D]`.
    pub fn forward<'t, F: Element>(
        &self,
        ctx: &Ctx<'t, F>,
        q_tokens: Var<'t, F>,
        kv_tokens: Var<'t, F>,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let (sq, sk) = (q_tokens.shape(), kv_tokens.shape());
        if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != self.dim || sk[2] != self.dim {
            return Err(config_err!("cross-attention of dim {} got streams {:?} and {:?}", self.dim, sq, sk));
        }
        let (n, tq, tk) = (sq[0], sq[1], sk[1]);
        let hd = self.dim / self.heads;
        let q = self.split(self.wq.forward(ctx, q_tokens)?, n, tq)?;
        let k = self.split(self.wk.forward(ctx, kv_tokens)?, n, tk)?;
        let v = self.split(self.wv.forward(ctx, kv_tokens)?, n, tk)?;
        let logits = q.bmm(k.transpose_last()?)?.scale(1.0 / (hd as f64).sqrt());
        let attn = autodiff::softmax(logits.reshape(&[n, self.heads, tq, tk])?, 3)?;
        let out = attn
            .reshape(&[n * self.heads, tq, tk])?
            .bmm(v)?
            .reshape(&[n, self.heads, tq, hd])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, tq, self.dim])?;
        let out = q_tokens.add(self.wo.forward(ctx, out)?)?;
        Ok((attn, self.norm.forward(ctx, out)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Fuser {
    Concat,
    Cross {
        swin_adapter: Linear,
        cnn_adapter: Linear,
        block: CrossAttention,
    },
}

/// Swin and CNN backbones run on the same batch, fused, then classified.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridModel {
    pub swin: SwinTransformer,
    pub cnn: ConvNet,
    pub fusion: FusionConfig,
    fuser: Fuser,
    head_norm: LayerNorm,
    head: Linear,
}

impl HybridModel {
    pub fn new<F: Element>(
        swin_cfg: &SwinConfig,
        conv_cfg: &ConvConfig,
        fusion: &FusionConfig,
        store: &mut ParamStore<F>,
        rng: &mut Rng,
    ) -> Result<Self> {
        fusion.validate()?;
        let swin = store.scoped("swin", |s| SwinTransformer::new(swin_cfg, s, rng))?;
        let cnn = store.scoped("cnn", |s| ConvNet::new(conv_cfg, s, rng))?;
        store.begin_group("fusion");
        let init = Init::TruncNormal(0.02);
        let (fuser, fused_dim) = match fusion.mode {
            FusionMode::Concat => (Fuser::Concat, swin_cfg.feature_dim() + conv_cfg.feature_dim),
            FusionMode::CrossAttention => {
                let d = fusion.shared_dim;
                let swin_adapter = Linear::new(store, "fusion.swin_adapter", swin_cfg.feature_dim(), d, true, init, rng);
                let cnn_adapter = Linear::new(store, "fusion.cnn_adapter", conv_cfg.map_channels(), d, true, init, rng);
                let block = CrossAttention::new(store, "fusion.cross", d, fusion.heads, rng)?;
                (
                    Fuser::Cross {
                        swin_adapter,
                        cnn_adapter,
                        block,
                    },
                    d,
                )
            }
        };
        store.begin_group("fusion_head");
        let head_norm = LayerNorm::new(store, "fusion_head.norm", fused_dim);
        let head = Linear::new(store, "fusion_head.linear", fused_dim, 2, true, init, rng);
        Ok(HybridModel {
            swin,
            cnn,
            fusion: fusion.clone(),
            fuser,
            head_norm,
            head,
        })
    }

    pub fn forward<'t, F: Element>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<ModelOutput<'t, F>> {
        let a = self.swin.forward(ctx, x)?;
        let b = self.cnn.forward(ctx, x)?;
        let (features, tokens) = match &self.fuser {
            Fuser::Concat => (concat_fuse(a.features, b.features)?, None),
            Fuser::Cross {
                swin_adapter,
                cnn_adapter,
                block,
            } => {
                let ta = swin_adapter.forward(ctx, a.tokens.expect("swin emits tokens"))?;
                let tb = cnn_adapter.forward(ctx, b.tokens.expect("cnn emits tokens"))?;
                let (q, kv) = match self.fusion.query_stream {
                    QueryStream::Swin => (ta, tb),
                    QueryStream::Cnn => (tb, ta),
                };
                let (_, fused) = block.forward(ctx, q, kv)?;
                (fused.mean_axis(1)?, Some(fused))
            }
        };
        let h = self.head_norm.forward(ctx, features)?;
        let h = autodiff::dropout(h, self.fusion.dropout, &mut ctx.rng(), ctx.training())?;
        Ok(ModelOutput {
            logits: self.head.forward(ctx, h)?,
            features,
            tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::models::conv::ConvVariant;
    use crate::nn::Mode;
    use crate::rng::rng_from_seed;

    #[test]
    fn concat_is_invertible_by_slicing() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 4], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[2, 6], |i| -(i as f64)));
        let c = concat_fuse(a, b).unwrap();
        assert_eq!(c.shape(), vec![2, 10]);
        assert_eq!(*c.narrow(1, 0, 4).unwrap().value(), *a.value());
        assert_eq!(*c.narrow(1, 4, 6).unwrap().value(), *b.value());
        let bad = tape.constant(Tensor::<f64>::zeros(&[3, 6]));
        assert!(concat_fuse(a, bad).is_err());
    }

    #[test]
    fn single_key_gets_all_the_weight() {
        let mut store = ParamStore::<f64>::new();
        let block = CrossAttention::new(&mut store, "x", 4, 2, &mut rng_from_seed(1)).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval, 0);
        let q = ctx.input(Tensor::from_fn(&[2, 3, 4], |i| (i as f64).cos()));
        let kv = ctx.input(Tensor::from_fn(&[2, 1, 4], |i| (i as f64).sin()));
        let (attn, out) = block.forward(&ctx, q, kv).unwrap();
        assert!(attn.value().data().iter().all(|&w| w == 1.0));
        let v = block.wo.forward(&ctx, block.wv.forward(&ctx, kv).unwrap()).unwrap();
        let expect = block.norm.forward(&ctx, q.add(v).unwrap()).unwrap();
        for (a, b) in out.value().data().iter().zip(expect.value().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hybrid_shapes_and_determinism() {
        let swin = SwinConfig {
            image_size: 16,
            embed_dim: 8,
            heads: vec![2, 2],
            window_size: 2,
            ..Default::default()
        };
        let conv = ConvConfig {
            width: 4,
            feature_dim: 8,
            ..ConvConfig::new(ConvVariant::ResnetLite)
        };
        for mode in [FusionMode::Concat, FusionMode::CrossAttention] {
            let fusion = FusionConfig {
                mode,
                shared_dim: 8,
                heads: 2,
                ..Default::default()
            };
            let mut store = ParamStore::<f64>::new();
            let model = HybridModel::new(&swin, &conv, &fusion, &mut store, &mut rng_from_seed(4)).unwrap();
            let x = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 13) % 7) as f64 / 7.0);
            let run = || {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &store, Mode::Eval, 0);
                (*model.forward(&ctx, ctx.input(x.clone())).unwrap().logits.value()).clone()
            };
            let a = run();
            assert_eq!(a.shape(), &[2, 2]);
            assert_eq!(a, run());
        }
    }
}
