//! Toy-scale shifted-window transformer.
//!
//! Tokens flow as `[N, H, W, C]` grids. Each stage is a sequence of blocks
//! alternating plain and cyclically shifted windows; stages are joined by
//! patch merging. The classifier head is layer norm, dropout, linear.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::ModelOutput;
use crate::autodiff::{self, Element, Tensor, Var};
use crate::error::{config_err, dim_err, Result};
use crate::nn::{Conv2d, Ctx, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::rng::Rng;

/// Additive logit for token pairs that must not attend to each other.
pub const MASK_VALUE: f64 = -1e9;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwinConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub num_classes: usize,
}

impl Default for SwinConfig {
    fn default() -> Self {
        SwinConfig {
            image_size: 64,
            patch_size: 4,
            embed_dim: 32,
            depths: vec![2, 2],
            heads: vec![2, 4],
            window_size: 4,
            mlp_ratio: 2,
            dropout: 0.1,
            num_classes: 2,
        }
    }
}

impl SwinConfig {
    /// Swin-T layout: 224 input, depths 2/2/6/2, window 7.
    pub fn tiny() -> Self {
        SwinConfig {
            image_size: 224,
            patch_size: 4,
            embed_dim: 96,
            depths: vec![2, 2, 6, 2],
            heads: vec![3, 6, 12, 24],
            window_size: 7,
            mlp_ratio: 4,
            dropout: 0.1,
            num_classes: 2,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::default()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(config_err!("unknown swin preset '{}' (expected toy or tiny)", name)),
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Channel width of stage `s`.
    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    pub fn feature_dim(&self) -> usize {
        self.stage_dim(self.depths.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(config_err!("image size {} not divisible by patch size {}", self.image_size, self.patch_size));
        }
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return Err(config_err!("depths {:?} and heads {:?} must be non-empty and equally long", self.depths, self.heads));
        }
        if self.embed_dim == 0 || self.window_size == 0 || self.mlp_ratio == 0 {
            return Err(config_err!("embed_dim, window_size and mlp_ratio must be positive"));
        }
        if self.num_classes != 2 {
            return Err(config_err!("only binary classification is supported, got num_classes {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        let mut g = self.grid();
        for s in 0..self.depths.len() {
            if s > 0 {
                if !g.is_multiple_of(2) {
                    return Err(config_err!("stage {} token grid {} is odd and cannot be merged", s, g));
                }
                g /= 2;
            }
            if !g.is_multiple_of(self.window_size) {
                return Err(config_err!("stage {} token grid {}x{} not divisible by window {}", s, g, g, self.window_size));
            }
            let (dim, heads) = (self.stage_dim(s), self.heads[s]);
            if heads == 0 || dim % heads != 0 {
                return Err(config_err!("stage {} has {} heads for dimension {}", s, heads, dim));
            }
        }
        Ok(())
    }
}

fn grid_dims<F: Element>(x: Var<'_, F>) -> Result<[usize; 4]> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(dim_err!("expected a [N, H, W, C] token grid, got {:?}", s));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Splits `[N, H, W, C]` into `[N·(H/w)·(W/w), w², C]`, windows in row-major
/// order per image.
pub fn window_partition<'t, F: Element>(x: Var<'t, F>, w: usize) -> Result<Var<'t, F>> {
    let [n, h, wd, c] = grid_dims(x)?;
    if w == 0 || h % w != 0 || wd % w != 0 {
        return Err(dim_err!("grid {}x{} not divisible by window {}", h, wd, w));
    }
    let (nh, nw) = (h / w, wd / w);
    let mut idx = Vec::with_capacity(n * h * wd * c);
    for b in 0..n {
        for wy in 0..nh {
            for wx in 0..nw {
                for ty in 0..w {
                    for tx in 0..w {
                        let base = ((b * h + wy * w + ty) * wd + wx * w + tx) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    x.gather(Rc::new(idx), &[n * nh * nw, w * w, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<'t, F: Element>(windows: Var<'t, F>, w: usize, h: usize, wd: usize) -> Result<Var<'t, F>> {
    let s = windows.shape();
    if s.len() != 3 || w == 0 || !h.is_multiple_of(w) || !wd.is_multiple_of(w) || s[1] != w * w {
        return Err(dim_err!("cannot reverse windows {:?} into a {}x{} grid with window {}", s, h, wd, w));
    }
    let (nh, nw, c) = (h / w, wd / w, s[2]);
    if !s[0].is_multiple_of(nh * nw) {
        return Err(dim_err!("{} windows do not tile {}x{} grids", s[0], h, wd));
    }
    let n = s[0] / (nh * nw);
    let mut idx = Vec::with_capacity(n * h * wd * c);
    for b in 0..n {
        for y in 0..h {
            for x in 0..wd {
                let win = (b * nh + y / w) * nw + x / w;
                let tok = (y % w) * w + x % w;
                let base = (win * w * w + tok) * c;
                idx.extend(base..base + c);
            }
        }
    }
    windows.gather(Rc::new(idx), &[n, h, wd, c])
}

/// Toroidal roll of the grid: `out[i, j] = in[(i + d) mod H, (j + d) mod W]`.
/// Negative `d` undoes a positive one.
pub fn cyclic_shift<'t, F: Element>(x: Var<'t, F>, d: isize) -> Result<Var<'t, F>> {
    let [n, h, w, c] = grid_dims(x)?;
    if d == 0 {
        return Ok(x);
    }
    let wrap = |i: usize, len: usize| (i as isize + d).rem_euclid(len as isize) as usize;
    let mut idx = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let base = ((b * h + wrap(y, h)) * w + wrap(xx, w)) * c;
                idx.extend(base..base + c);
            }
        }
    }
    x.gather(Rc::new(idx), &[n, h, w, c])
}

/// Region labels of a shifted `h × w` grid: positions that came from
/// different sides of the wrap-around seam get different labels.
fn region_ids(h: usize, w: usize, window: usize, d: usize) -> Vec<usize> {
    let band = |i: usize, len: usize| {
        if i < len - window {
            0
        } else if i < len - d {
            1
        } else {
            2
        }
    };
    let mut ids = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            ids.push(band(y, h) * 3 + band(x, w));
        }
    }
    ids
}

/// Additive attention mask `[nW, w², w²]` for a grid shifted by `d`:
/// [`MASK_VALUE`] where the two tokens come from different regions, else 0.
pub fn build_shift_mask<F: Element>(h: usize, w: usize, window: usize, d: usize) -> Result<Tensor<F>> {
    if window == 0 || !h.is_multiple_of(window) || !w.is_multiple_of(window) {
        return Err(dim_err!("grid {}x{} not divisible by window {}", h, w, window));
    }
    if d >= window {
        return Err(config_err!("shift {} must be smaller than window {}", d, window));
    }
    let t = window * window;
    let (nh, nw) = (h / window, w / window);
    let mut data = vec![F::zero(); nh * nw * t * t];
    if d > 0 {
        let ids = region_ids(h, w, window, d);
        let id_at = |win: usize, tok: usize| {
            let (wy, wx) = (win / nw, win % nw);
            ids[(wy * window + tok / window) * w + wx * window + tok % window]
        };
        for win in 0..nh * nw {
            for i in 0..t {
                for j in 0..t {
                    if id_at(win, i) != id_at(win, j) {
                        data[(win * t + i) * t + j] = F::from_f64(MASK_VALUE);
                    }
                }
            }
        }
    }
    Tensor::new(&[nh * nw, t, t], data)
}

/// Table row for each ordered token pair of a window: `(Δy + w − 1)·(2w − 1) + Δx + w − 1`.
pub fn relative_position_index(w: usize) -> Vec<usize> {
    let t = w * w;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            let dy = (i / w) as isize - (j / w) as isize + w as isize - 1;
            let dx = (i % w) as isize - (j % w) as isize + w as isize - 1;
            idx.push(dy as usize * (2 * w - 1) + dx as usize);
        }
    }
    idx
}

/// Multi-head self-attention inside windows with relative position bias.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub bias_table: ParamId,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
}

impl WindowAttention {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(config_err!("{} heads do not divide dimension {}", heads, dim));
        }
        let init = Init::TruncNormal(INIT_STD);
        Ok(store.scoped(name, |s| WindowAttention {
            q: Linear::new(s, "q", dim, dim, true, init, rng),
            k: Linear::new(s, "k", dim, dim, true, init, rng),
            v: Linear::new(s, "v", dim, dim, true, init, rng),
            proj: Linear::new(s, "proj", dim, dim, true, init, rng),
            bias_table: s.add_init("relative_bias", &[(2 * window - 1) * (2 * window - 1), heads], init, rng),
            dim,
            heads,
            window,
        }))
    }

    fn split_heads<'t, F: Element>(&self, x: Var<'t, F>, b: usize, t: usize) -> Result<Var<'t, F>> {
        let hd = self.dim / self.heads;
        x.reshape(&[b, t, self.heads, hd])?.permute(&[0, 2, 1, 3])?.reshape(&[b * self.heads, t, hd])
    }

    /// Bias added to every window's logits, `[heads, w², w²]`.
    pub fn position_bias<'t, F: Element>(&self, ctx: &Ctx<'t, F>) -> Result<Var<'t, F>> {
        let t = self.window * self.window;
        let h = self.heads;
        let rel = relative_position_index(self.window);
        let idx: Vec<usize> = (0..h).flat_map(|head| rel.iter().map(move |&r| r * h + head)).collect();
        ctx.param(self.bias_table).gather(Rc::new(idx), &[h, t, t])
    }

    /// Attention probabilities `[B, heads, T, T]` and output `[B, T, C]` for
    /// windows `[B, T, C]`. `mask` is `[nW, T, T]` with `B` a multiple of `nW`.
    pub fn attend<'t, F: Element>(
        &self,
        ctx: &Ctx<'t, F>,
        windows: Var<'t, F>,
        mask: Option<&Tensor<F>>,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let s = windows.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(config_err!("window attention of dim {} got input {:?}", self.dim, s));
        }
        let (b, t) = (s[0], s[1]);
        if t != self.window * self.window {
            return Err(config_err!("windows hold {} tokens, bias table expects {}", t, self.window * self.window));
        }
        let hd = self.dim / self.heads;
        let q = self.split_heads(self.q.forward(ctx, windows)?, b, t)?;
        let k = self.split_heads(self.k.forward(ctx, windows)?, b, t)?;
        let v = self.split_heads(self.v.forward(ctx, windows)?, b, t)?;
        let logits = q.bmm(k.transpose_last()?)?.scale(1.0 / (hd as f64).sqrt());
        let logits = logits.reshape(&[b, self.heads, t, t])?.add(self.position_bias(ctx)?)?;
        let logits = match mask {
            Some(m) => {
                let nw = m.shape()[0];
                if b % nw != 0 {
                    return Err(dim_err!("{} windows cannot take a mask for {} windows per image", b, nw));
                }
                let m = ctx.input(m.clone().reshape(&[1, nw, 1, t, t])?);
                logits.reshape(&[b / nw, nw, self.heads, t, t])?.add(m)?.reshape(&[b, self.heads, t, t])?
            }
            None => logits,
        };
        let attn = autodiff::softmax(logits, 3)?;
        let out = attn
            .reshape(&[b * self.heads, t, t])?
            .bmm(v)?
            .reshape(&[b, self.heads, t, hd])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, t, self.dim])?;
        Ok((attn, self.proj.forward(ctx, out)?))
    }
}

/// Pre-norm transformer block over windows, optionally shifted.
#[derive(Clone, Debug, PartialEq)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub shift: usize,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        mlp_ratio: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if shift >= window {
            return Err(config_err!("shift {} must be smaller than window {}", shift, window));
        }
        let init = Init::TruncNormal(INIT_STD);
        store.scoped(name, |s| {
            Ok(SwinBlock {
                norm1: LayerNorm::new(s, "norm1", dim),
                attn: WindowAttention::new(s, "attn", dim, heads, window, rng)?,
                norm2: LayerNorm::new(s, "norm2", dim),
                fc1: Linear::new(s, "fc1", dim, dim * mlp_ratio, true, init, rng),
                fc2: Linear::new(s, "fc2", dim * mlp_ratio, dim, true, init, rng),
                shift,
            })
        })
    }

    pub fn forward<'t, F: Element>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let [_, h, w, c] = grid_dims(x)?;
        if c != self.attn.dim {
            return Err(config_err!("block of dim {} got {} channels", self.attn.dim, c));
        }
        let win = self.attn.window;
        let d = self.shift as isize;
        let y = cyclic_shift(self.norm1.forward(ctx, x)?, d)?;
        let mask = (self.shift > 0).then(|| build_shift_mask::<F>(h, w, win, self.shift)).transpose()?;
        let (_, attended) = self.attn.attend(ctx, window_partition(y, win)?, mask.as_ref())?;
        let y = cyclic_shift(window_reverse(attended, win, h, w)?, -d)?;
        let x = x.add(y)?;
        let m = self.fc2.forward(ctx, self.fc1.forward(ctx, self.norm2.forward(ctx, x)?)?.gelu())?;
        x.add(m)
    }
}

/// 2×2 neighborhood concatenation (top-left, top-right, bottom-left,
/// bottom-right), layer norm, and a `4C → 2C` projection.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
    pub dim: usize,
}

impl PatchMerging {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, dim: usize, rng: &mut Rng) -> Self {
        store.scoped(name, |s| PatchMerging {
            norm: LayerNorm::new(s, "norm", 4 * dim),
            reduction: Linear::new(s, "reduction", 4 * dim, 2 * dim, false, Init::TruncNormal(INIT_STD), rng),
            dim,
        })
    }

    pub fn forward<'t, F: Element>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let merged = merge_neighborhoods(x)?;
        self.reduction.forward(ctx, self.norm.forward(ctx, merged)?)
    }
}

/// `[N, H, W, C] → [N, H/2, W/2, 4C]` with channel blocks ordered TL, TR, BL, BR.
pub fn merge_neighborhoods<F: Element>(x: Var<'_, F>) -> Result<Var<'_, F>> {
    let [n, h, w, c] = grid_dims(x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!("patch merging needs an even grid, got {}x{}", h, w));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(n * h * w * c);
    for b in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let base = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    x.gather(Rc::new(idx), &[n, ho, wo, 4 * c])
}

/// Full backbone plus binary head.
#[derive(Clone, Debug, PartialEq)]
pub struct SwinTransformer {
    pub config: SwinConfig,
    pub patch_embed: Conv2d,
    pub embed_norm: LayerNorm,
    pub stages: Vec<Vec<SwinBlock>>,
    pub merges: Vec<PatchMerging>,
    pub head_norm: LayerNorm,
    pub head: Linear,
}

impl SwinTransformer {
    pub fn new<F: Element>(config: &SwinConfig, store: &mut ParamStore<F>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let init = Init::TruncNormal(INIT_STD);
        let (p, c, w) = (config.patch_size, config.embed_dim, config.window_size);
        store.begin_group("patch_embed");
        let patch_embed = Conv2d::new(store, "patch_embed", 3, c, p, p, 0, true, init, rng);
        let embed_norm = LayerNorm::new(store, "embed_norm", c);
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for (s, (&depth, &heads)) in config.depths.iter().zip(&config.heads).enumerate() {
            if s > 0 {
                store.begin_group(&format!("merge{}", s - 1));
                merges.push(PatchMerging::new(store, &format!("merge{}", s - 1), config.stage_dim(s - 1), rng));
            }
            let dim = config.stage_dim(s);
            let mut blocks = Vec::new();
            for b in 0..depth {
                let name = format!("stage{s}.block{b}");
                store.begin_group(&name);
                let shift = if b % 2 == 1 { w / 2 } else { 0 };
                blocks.push(SwinBlock::new(store, &name, dim, heads, w, shift, config.mlp_ratio, rng)?);
            }
            stages.push(blocks);
        }
        store.begin_group("head");
        let d = config.feature_dim();
        let head_norm = LayerNorm::new(store, "head_norm", d);
        let head = Linear::new(store, "head", d, config.num_classes, true, init, rng);
        Ok(SwinTransformer {
            config: config.clone(),
            patch_embed,
            embed_norm,
            stages,
            merges,
            head_norm,
            head,
        })
    }

    /// Patch projection only: `[N, 3, S, S] → [N, S/P, S/P, C]`, before the embedding norm.
    pub fn patch_embed<'t, F: Element>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let s = x.shape();
        let size = self.config.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(config_err!("swin expects [N, 3, {size}, {size}] input, got {:?}", s));
        }
        self.patch_embed.forward(ctx, x)?.permute(&[0, 2, 3, 1])
    }

    /// Final-stage token grid `[N, H, W, D]`.
    pub fn tokens<'t, F: Element>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let mut t = self.embed_norm.forward(ctx, self.patch_embed(ctx, x)?)?;
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                t = self.merges[s - 1].forward(ctx, t)?;
            }
            for block in blocks {
                t = block.forward(ctx, t)?;
            }
        }
        Ok(t)
    }

    pub fn classify<'t, F: Element>(&self, ctx: &Ctx<'t, F>, features: Var<'t, F>) -> Result<Var<'t, F>> {
        let h = self.head_norm.forward(ctx, features)?;
        let h = autodiff::dropout(h, self.config.dropout, &mut ctx.rng(), ctx.training())?;
        self.head.forward(ctx, h)
    }

    pub fn forward<'t, F: Element>(&self, ctx: &Ctx<'t, F>, x: Var<'t, F>) -> Result<ModelOutput<'t, F>> {
        let grid = self.tokens(ctx, x)?;
        let [n, h, w, d] = grid_dims(grid)?;
        let tokens = grid.reshape(&[n, h * w, d])?;
        let features = tokens.mean_axis(1)?;
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
    use crate::autodiff::Tape;
    use crate::nn::Mode;
    use crate::rng::rng_from_seed;

    fn labeled_grid(tape: &Tape<f64>, n: usize, h: usize, w: usize, c: usize) -> Var<'_, f64> {
        tape.constant(Tensor::from_fn(&[n, h, w, c], |i| i as f64))
    }

    #[test]
    fn partition_reverse_is_a_bijection() {
        let tape = Tape::new();
        let x = labeled_grid(&tape, 2, 4, 8, 3);
        let p = window_partition(x, 2).unwrap();
        assert_eq!(p.shape(), vec![16, 4, 3]);
        assert_eq!(*window_reverse(p, 2, 4, 8).unwrap().value(), *x.value());
        assert!(window_partition(x, 3).is_err());
    }

    #[test]
    fn windows_hold_contiguous_blocks() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 4, 4, 2], |i| ((i / 2) * 10 + i % 2) as f64));
        let p = window_partition(x, 2).unwrap().value();
        // window 1 is rows 0..2, cols 2..4
        let tokens: Vec<f64> = (0..4).map(|t| p.at(&[1, t, 0])).collect();
        let expect: Vec<f64> = [(0, 2), (0, 3), (1, 2), (1, 3)].iter().map(|&(y, x)| ((y * 4 + x) * 10) as f64).collect();
        assert_eq!(tokens, expect);
    }

    #[test]
    fn shift_matches_modular_indexing() {
        let tape = Tape::new();
        let x = labeled_grid(&tape, 1, 4, 4, 1);
        let s = cyclic_shift(x, 1).unwrap().value();
        for y in 0..4 {
            for xx in 0..4 {
                assert_eq!(s.at(&[0, y, xx, 0]), (((y + 1) % 4) * 4 + (xx + 1) % 4) as f64);
            }
        }
        let back = cyclic_shift(cyclic_shift(x, 1).unwrap(), -1).unwrap();
        assert_eq!(*back.value(), *x.value());
        assert_eq!(cyclic_shift(x, 0).unwrap().id(), x.id());
    }

    #[test]
    fn shift_mask_matches_wraparound_enumeration() {
        let m = build_shift_mask::<f64>(4, 4, 2, 1).unwrap();
        assert!(build_shift_mask::<f64>(4, 4, 2, 0).unwrap().data().iter().all(|&v| v == 0.0));
        // Brute force: a shifted position came from across the seam iff its
        // original coordinate wrapped around.
        let wrapped = |p: usize| ((p / 4 + 1) >= 4, (p % 4 + 1) >= 4);
        let mut expected = 0;
        for win in 0..4 {
            let (wy, wx) = (win / 2, win % 2);
            let pos = |t: usize| (wy * 2 + t / 2) * 4 + wx * 2 + t % 2;
            for i in 0..4 {
                for j in 0..4 {
                    let masked = wrapped(pos(i)) != wrapped(pos(j));
                    expected += usize::from(masked);
                    assert_eq!(m.at(&[win, i, j]) != 0.0, masked);
                    assert_eq!(m.at(&[win, i, j]), m.at(&[win, j, i]));
                }
            }
        }
        assert_eq!(m.data().iter().filter(|&&v| v != 0.0).count(), expected);
        assert!(expected > 0);
    }

    #[test]
    fn merge_order_is_tl_tr_bl_br() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 2, 2, 1], |i| i as f64));
        let m = merge_neighborhoods(x).unwrap();
        assert_eq!(m.shape(), vec![1, 1, 1, 4]);
        assert_eq!(m.value().data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn singleton_window_attends_to_itself() {
        let mut rng = rng_from_seed(3);
        let mut store = ParamStore::<f64>::new();
        let attn = WindowAttention::new(&mut store, "a", 4, 2, 1, &mut rng).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval, 0);
        let x = ctx.input(Tensor::from_fn(&[3, 1, 4], |i| (i as f64).sin()));
        let (weights, out) = attn.attend(&ctx, x, None).unwrap();
        assert!(weights.value().data().iter().all(|&w| w == 1.0));
        let v = attn.proj.forward(&ctx, attn.v.forward(&ctx, x).unwrap()).unwrap();
        for (a, b) in out.value().data().iter().zip(v.value().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn config_rejects_bad_geometry() {
        assert!(SwinConfig { image_size: 62, ..Default::default() }.validate().is_err());
        assert!(SwinConfig { window_size: 3, ..Default::default() }.validate().is_err());
        assert!(SwinConfig { heads: vec![3, 4], ..Default::default() }.validate().is_err());
        SwinConfig::tiny().validate().unwrap();
    }

    #[test]
    fn forward_shapes_and_eval_determinism() {
        let cfg = SwinConfig {
            image_size: 16,
            embed_dim: 8,
            heads: vec![2, 2],
            window_size: 2,
            ..Default::default()
        };
        let mut rng = rng_from_seed(1);
        let mut store = ParamStore::<f32>::new();
        let model = SwinTransformer::new(&cfg, &mut store, &mut rng).unwrap();
        let x = Tensor::from_fn(&[3, 3, 16, 16], |i| ((i * 7919) % 255) as f32 / 255.0);
        let run = || {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, Mode::Eval, 0);
            let out = model.forward(&ctx, ctx.input(x.clone())).unwrap();
            ((*out.logits.value()).clone(), out.features.shape())
        };
        let (a, fs) = run();
        let (b, _) = run();
        assert_eq!(a.shape(), &[3, 2]);
        assert_eq!(fs, vec![3, 16]);
        assert!(a.all_finite());
        assert_eq!(a, b);
        assert_eq!(store.num_groups(), 7);
    }
}
