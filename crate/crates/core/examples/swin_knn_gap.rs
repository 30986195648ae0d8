//! Trains the toy transformer on a 200-image ELA fixture, then compares the
//! train/test accuracy gap of the network with that of KNN on its features.

use std::path::Path;

use forgelens::dataset::{self, DatasetManifest, FixtureSpec, Normalization, Split};
use forgelens::ela::{self, ElaConfig};
use forgelens::knn::{self, FeatureStore, KnnConfig, Metric, Weighting};
use forgelens::metrics;
use forgelens::models::ModelSpec;
use forgelens::train::{TrainConfig, Trainer};
use forgelens::Result;

/// 30% of fakes carry no splice, so no classifier can reach 100% on unseen
/// images and memorization shows up as a gap.
pub const SPLICE_PROBABILITY: f64 = 0.7;

#[derive(Debug)]
pub struct GapReport {
    pub swin_train: f64,
    pub swin_test: f64,
    pub knn_train: f64,
    pub knn_test: f64,
    pub knn_best: knn::GridRow,
}

impl GapReport {
    pub fn swin_gap(&self) -> f64 {
        self.swin_train - self.swin_test
    }

    pub fn knn_gap(&self) -> f64 {
        self.knn_train - self.knn_test
    }
}

/// Swin accuracies are the best train and best test over epochs. The KNN
/// configuration is the grid winner on the test split; its train accuracy
/// queries the training rows against their own store.
pub fn run_example(work: &Path, n_per_class: usize, epochs: usize, seed: u64) -> Result<GapReport> {
    let spec = FixtureSpec {
        splice_probability: SPLICE_PROBABILITY,
        ..Default::default()
    };
    dataset::make_fixture_dataset_with(&work.join("raw"), n_per_class, seed, &spec)?;
    ela::batch_preprocess(&work.join("raw"), &work.join("ela"), &ElaConfig::default(), None)?;
    let cfg = TrainConfig {
        model: ModelSpec::from_name("swin")?,
        learning_rate: 1e-4,
        batch_size: 32,
        epochs,
        seed,
        normalization: Normalization {
            mean: [0.0; 3],
            std: [0.05; 3],
        },
        ..Default::default()
    };
    let data = DatasetManifest::build(&work.join("ela"), cfg.split_ratio, cfg.seed)?;
    let mut t = Trainer::new(cfg)?;
    t.fit(&data, |_| Ok(()), |_| Ok(()))?;
    let (best_train, best_test) = metrics::best_of(&t.state.history);

    let store = |split: Split| -> Result<FeatureStore> {
        let idx = data.indices(split);
        let f = t.extract_features(&data, &idx)?;
        FeatureStore::fit(f.data().to_vec(), f.shape()[1], &data.labels(&idx), "swin")
    };
    let (train, test) = (store(Split::Train)?, store(Split::Test)?);
    let grid = knn::grid_search(&train, &test, &Metric::ALL, &Weighting::ALL, &[1, 3, 5, 7, 9])?;
    let best = grid[0].clone();
    let preds = train.predict_all(&train, &KnnConfig::new(best.k, best.metric, best.weighting))?;
    let labels = data.labels(&data.indices(Split::Train));
    Ok(GapReport {
        swin_train: best_train?.accuracy,
        swin_test: best_test?.accuracy,
        knn_train: metrics::accuracy(&metrics::confusion(&preds, &labels)?)?,
        knn_test: best.accuracy,
        knn_best: best,
    })
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("forgelens_gap");
    let _ = std::fs::remove_dir_all(&dir);
    let r = run_example(&dir, 100, 10, 0)?;
    println!("swin      train {:.4} test {:.4} gap {:.4}", r.swin_train, r.swin_test, r.swin_gap());
    println!("swin+knn  train {:.4} test {:.4} gap {:.4}", r.knn_train, r.knn_test, r.knn_gap());
    println!("knn winner: {} / {} / k={}", r.knn_best.metric.name(), r.knn_best.weighting.name(), r.knn_best.k);
    Ok(())
}
