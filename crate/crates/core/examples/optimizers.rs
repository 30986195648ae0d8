//! RMSprop and AdamW minimizing a small quadratic through the same
//! `optim::step` used for training.

use forgelens::autodiff::Tensor;
use forgelens::nn::ParamStore;
use forgelens::optim::{self, OptimState, OptimizerConfig};
use forgelens::Result;

const TARGET: [f64; 3] = [1.0, -2.0, 0.5];
const CURVATURE: [f64; 3] = [1.0, 4.0, 0.25];

fn loss(theta: &[f64]) -> f64 {
    theta.iter().zip(TARGET).zip(CURVATURE).map(|((t, c), a)| a * (t - c) * (t - c)).sum()
}

/// Final loss after `steps` updates, for RMSprop and for AdamW.
pub fn run_example(steps: usize) -> Result<(f64, f64)> {
    let run = |cfg: OptimizerConfig| -> Result<f64> {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("theta", Tensor::zeros(&[3]));
        let mut state = OptimState::new(&store);
        for _ in 0..steps {
            let t = store.value(id).data().to_vec();
            let g: Vec<f64> = (0..3).map(|i| 2.0 * CURVATURE[i] * (t[i] - TARGET[i])).collect();
            optim::step(&cfg, &mut store, &mut state, &[(id, Tensor::new(&[3], g)?)], &[true])?;
        }
        Ok(loss(store.value(id).data()))
    };
    Ok((run(OptimizerConfig::rmsprop(0.05))?, run(OptimizerConfig::adamw(0.05, 0.01))?))
}

#[allow(dead_code)]
fn main() -> Result<()> {
    println!("start loss {:.4}", loss(&[0.0; 3]));
    let (r, a) = run_example(300)?;
    println!("after 300 steps: rmsprop {r:.2e}, adamw {a:.2e}");
    Ok(())
}
