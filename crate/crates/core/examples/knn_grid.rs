//! KNN over two Gaussian clusters: every metric and weighting, ranked.

use forgelens::knn::{self, FeatureStore, GridRow, Metric, Weighting};
use forgelens::rng::rng_from_seed;
use forgelens::Result;
use rand_distr::{Distribution, Normal};

fn clusters(n: usize, d: usize, seed: u64) -> Result<FeatureStore> {
    let mut rng = rng_from_seed(seed);
    let noise = Normal::new(0.0f32, 1.0).expect("valid");
    let mut feats = Vec::with_capacity(n * d);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    for &l in &labels {
        for j in 0..d {
            let center = if l == 1 && j < 2 { 2.5 } else { 0.0 };
            feats.push(center + 1.0 + noise.sample(&mut rng));
        }
    }
    FeatureStore::fit(feats, d, &labels, "clusters")
}

pub fn run_example() -> Result<Vec<GridRow>> {
    let train = clusters(80, 6, 1)?;
    let val = clusters(40, 6, 2)?;
    knn::grid_search(&train, &val, &Metric::ALL, &Weighting::ALL, &[1, 3, 5, 9])
}

#[allow(dead_code)]
fn main() -> Result<()> {
    for r in run_example()?.iter().take(10) {
        println!("{:10} {:8} k={:<2} accuracy {:.3}", r.metric.name(), r.weighting.name(), r.k, r.accuracy);
    }
    Ok(())
}
