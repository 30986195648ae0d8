//! The three lite CNN baselines: parameter counts and output shapes.

use forgelens::autodiff::{Tape, Tensor};
use forgelens::models::{ConvConfig, ConvNet, ConvVariant};
use forgelens::nn::{Ctx, Mode, ParamStore};
use forgelens::rng::rng_from_seed;
use forgelens::Result;

/// `(variant, trainable parameters, logits shape, features shape)`.
pub type Row = (&'static str, usize, Vec<usize>, Vec<usize>);

pub fn run_example(image_size: usize) -> Result<Vec<Row>> {
    let x = Tensor::from_fn(&[2, 3, image_size, image_size], |i| ((i * 31) % 17) as f32 / 8.0 - 1.0);
    let mut rows = Vec::new();
    for v in ConvVariant::ALL {
        let cfg = ConvConfig::new(v);
        let mut store = ParamStore::<f32>::new();
        let net = ConvNet::new(&cfg, &mut store, &mut rng_from_seed(0))?;
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, Mode::Eval, 0);
        let out = net.forward(&ctx, ctx.input(x.clone()))?;
        rows.push((v.name(), store.num_trainable(), out.logits.shape(), out.features.shape()));
    }
    Ok(rows)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    for (name, params, logits, features) in run_example(64)? {
        println!("{name:13} {params:7} params  logits {logits:?}  features {features:?}");
    }
    Ok(())
}
