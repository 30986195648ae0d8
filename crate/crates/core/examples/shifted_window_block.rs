//! Shifted-window attention on an 8×8 token grid: the wraparound mask and a
//! block forward pass.

use forgelens::autodiff::{Tape, Tensor};
use forgelens::models::swin::{build_shift_mask, SwinBlock};
use forgelens::nn::{Ctx, Mode, ParamStore};
use forgelens::rng::rng_from_seed;
use forgelens::Result;

/// Blocked pairs per window, and the output shape of a shifted block.
pub fn run_example() -> Result<(Vec<usize>, Vec<usize>)> {
    let (grid, window, shift, dim) = (8, 4, 2, 8);
    let mask = build_shift_mask::<f64>(grid, grid, window, shift)?;
    let t = window * window;
    let blocked = mask
        .data()
        .chunks(t * t)
        .map(|w| w.iter().filter(|&&m| m != 0.0).count())
        .collect();

    let mut store = ParamStore::<f64>::new();
    let block = SwinBlock::new(&mut store, "block", dim, 2, window, shift, 2, &mut rng_from_seed(0))?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval, 0);
    let x = Tensor::from_fn(&[1, grid, grid, dim], |i| (i as f64 * 0.01).sin());
    let y = block.forward(&ctx, ctx.input(x))?;
    Ok((blocked, y.shape()))
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let (blocked, shape) = run_example()?;
    println!("masked pairs per window: {blocked:?}");
    println!("block output shape {shape:?}");
    Ok(())
}
