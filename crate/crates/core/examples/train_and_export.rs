//! End to end on a small fixture: ELA, a few epochs of resnet_lite, a
//! checkpoint round trip and the metrics export.

use std::path::{Path, PathBuf};

use forgelens::dataset::{self, DatasetManifest, Normalization, Split};
use forgelens::ela::{self, ElaConfig};
use forgelens::metrics::{self, MetricsHistory};
use forgelens::models::ModelSpec;
use forgelens::optim::OptimizerKind;
use forgelens::train::{TrainConfig, Trainer};
use forgelens::Result;

/// Training history, the checkpoint path, and whether the reloaded
/// checkpoint evaluates identically.
pub fn run_example(work: &Path, epochs: usize) -> Result<(MetricsHistory, PathBuf, bool)> {
    dataset::make_fixture_dataset(&work.join("raw"), 12, 5)?;
    ela::batch_preprocess(&work.join("raw"), &work.join("ela"), &ElaConfig::default(), None)?;
    let cfg = TrainConfig {
        model: ModelSpec::from_name("resnet_lite")?,
        optimizer: OptimizerKind::Rmsprop,
        learning_rate: 1e-3,
        batch_size: 5,
        epochs,
        image_size: 32,
        normalization: Normalization {
            mean: [0.0; 3],
            std: [0.05; 3],
        },
        ..Default::default()
    };
    let data = DatasetManifest::build(&work.join("ela"), cfg.split_ratio, cfg.seed)?;
    let ckpt = work.join("run").join("checkpoint.bin");
    let mut trainer = Trainer::new(cfg)?;
    trainer.fit(&data, |t| t.save(&ckpt), |_| Ok(()))?;
    metrics::export_history(&trainer.state.history, &work.join("run"))?;

    let reloaded = Trainer::load(&ckpt)?;
    let same = reloaded.evaluate(&data, Split::Test)? == trainer.evaluate(&data, Split::Test)?;
    Ok((trainer.state.history, ckpt, same))
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("forgelens_train_example");
    let _ = std::fs::remove_dir_all(&dir);
    let (history, ckpt, same) = run_example(&dir, 3)?;
    for r in &history.rows {
        println!("epoch {} {:5} loss {:.4} accuracy {:.3}", r.epoch, r.split.name(), r.mean_loss, r.accuracy);
    }
    println!("checkpoint {} reloads identically: {same}", ckpt.display());
    Ok(())
}
