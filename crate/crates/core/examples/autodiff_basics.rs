//! Records a tiny two-layer network on a tape, backpropagates, and compares
//! the result with central finite differences.

use forgelens::autodiff::{cross_entropy, gradcheck, Tape, Tensor, Var};
use forgelens::Result;

const LABELS: [usize; 4] = [0, 1, 1, 0];

fn net<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
    let h = v[0].matmul(v[1])?.tanh();
    cross_entropy(h.matmul(v[2])?, &LABELS)
}

/// Loss value and the largest relative gradient error.
pub fn run_example() -> Result<(f64, f64)> {
    let x = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.7).sin());
    let w1 = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.3).cos() * 0.5);
    let w2 = Tensor::from_fn(&[5, 2], |i| (i as f64 * 1.1).sin() * 0.5);
    let tape = Tape::new();
    let vars: Vec<_> = [&x, &w1, &w2].iter().map(|t| tape.leaf((*t).clone(), true)).collect();
    let loss = net(&tape, &vars)?.value().item();
    let report = gradcheck::check(&[x, w1, w2], 1e-6, 1e-8, None, net)?;
    Ok((loss, report.max_rel_err))
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let (loss, err) = run_example()?;
    println!("loss {loss:.6}, max relative gradient error {err:.2e}");
    Ok(())
}
