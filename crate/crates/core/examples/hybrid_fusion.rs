//! Swin + residual CNN hybrid with cross-attention fusion, compared with the
//! plain concatenation variant.

use forgelens::autodiff::{Tape, Tensor};
use forgelens::models::{ModelSpec, SwinConfig};
use forgelens::nn::{Ctx, Mode, ParamStore};
use forgelens::rng::rng_from_seed;
use forgelens::Result;

/// `(preset, parameter groups, logits, feature width)`.
pub type Row = (String, Vec<String>, Vec<f32>, usize);

/// One row per fusion mode.
pub fn run_example() -> Result<Vec<Row>> {
    let x = Tensor::from_fn(&[2, 3, 64, 64], |i| ((i * 7) % 23) as f32 / 11.0 - 1.0);
    let mut out = Vec::new();
    for name in ["hybrid", "hybrid_concat"] {
        let spec = ModelSpec::from_name(name)?;
        let mut store = ParamStore::<f32>::new();
        let model = spec.build(&mut store, &mut rng_from_seed(0))?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval, 0);
        let y = model.forward(&ctx, ctx.input(x.clone()))?;
        let groups = store.group_names().to_vec();
        out.push((name.to_string(), groups, y.logits.value().data().to_vec(), y.features.shape()[1]));
    }
    debug_assert_eq!(SwinConfig::default().image_size, 64);
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    for (name, groups, logits, d) in run_example()? {
        println!("{name}: {} parameter groups, fused width {d}", groups.len());
        println!("  logits {logits:?}");
    }
    Ok(())
}
