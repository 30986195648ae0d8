//! Trains the toy shifted-window transformer on 16 ELA fixture images until it
//! memorizes them.

use std::path::Path;

use forgelens::dataset::{self, DatasetManifest, Normalization};
use forgelens::ela::{self, ElaConfig};
use forgelens::models::ModelSpec;
use forgelens::train::{TrainConfig, Trainer};
use forgelens::Result;

/// ELA residuals of 8-bit images sit in the low gray levels; centering at 0
/// with a small spread keeps them from collapsing to a constant input.
pub fn ela_normalization() -> Normalization {
    Normalization {
        mean: [0.0; 3],
        std: [0.05; 3],
    }
}

/// First step reaching `target` train accuracy with that accuracy, or `None`
/// if `max_steps` full-batch steps are not enough.
pub fn run_example(work: &Path, max_steps: usize, target: f64) -> Result<Option<(usize, f64)>> {
    dataset::make_fixture_dataset(&work.join("raw"), 10, 11)?;
    ela::batch_preprocess(&work.join("raw"), &work.join("ela"), &ElaConfig::default(), None)?;
    // 10 per class at ratio 0.8 leaves 8 + 8 training images, one batch.
    let data = DatasetManifest::build(&work.join("ela"), 0.8, 0)?;
    let mut t = Trainer::new(TrainConfig {
        model: ModelSpec::from_name("swin")?,
        learning_rate: 1e-4,
        batch_size: 16,
        epochs: max_steps,
        normalization: ela_normalization(),
        ..Default::default()
    })?;
    for step in 1..=max_steps {
        let row = t.train_epoch(&data)?;
        if row.accuracy >= target {
            return Ok(Some((step, row.accuracy)));
        }
    }
    Ok(None)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("forgelens_overfit");
    let _ = std::fs::remove_dir_all(&dir);
    match run_example(&dir, 200, 0.95)? {
        Some((steps, acc)) => println!("reached train accuracy {acc} after {steps} steps"),
        None => println!("did not reach 95% within 200 steps"),
    }
    Ok(())
}
