//! Run configuration, the epoch loop, evaluation and feature extraction.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{cross_entropy, Tape, Tensor};
use crate::checkpoint::{self, Checkpoint};
use crate::dataset::{self, DatasetManifest, Normalization, Split};
use crate::error::{config_err, Error, Result};
use crate::metrics::{self, MetricsHistory, MetricsRow};
use crate::models::{deserialize_model_spec, Model, ModelSpec};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::optim::{self, apply_freeze_policy, FreezePolicy, OptimState, OptimizerConfig, OptimizerKind};
use crate::rng::{self, derive_seed};

/// Everything that determines a training run. Field names are the config-file keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Preset name (`swin`, `resnet_lite`, ...) or a full `{kind = ...}` table.
    #[serde(deserialize_with = "deserialize_model_spec")]
    pub model: ModelSpec,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Decoupled decay for adamw; defaults to 0.01 there and 0 for rmsprop.
    pub weight_decay: Option<f64>,
    pub epochs: usize,
    pub seed: u64,
    pub freeze_policy: FreezePolicy,
    pub image_size: usize,
    pub split_ratio: f64,
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelSpec::from_name("swin").expect("preset"),
            optimizer: OptimizerKind::Adamw,
            learning_rate: 1e-4,
            batch_size: 32,
            weight_decay: None,
            epochs: 30,
            seed: 0,
            freeze_policy: FreezePolicy::None,
            image_size: dataset::DEFAULT_IMAGE_SIZE,
            split_ratio: dataset::DEFAULT_SPLIT_RATIO,
            normalization: Normalization::default(),
        }
    }
}

impl TrainConfig {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: TrainConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| config_err!("{}", e))?
        } else {
            toml::from_str(text).map_err(|e| config_err!("{}", e))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn effective_weight_decay(&self) -> f64 {
        self.weight_decay.unwrap_or(match self.optimizer {
            OptimizerKind::Rmsprop => 0.0,
            OptimizerKind::Adamw => 0.01,
        })
    }

    /// Copy with defaults that depend on other fields filled in.
    pub fn resolved(&self) -> Self {
        TrainConfig {
            weight_decay: Some(self.effective_weight_decay()),
            ..self.clone()
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Rmsprop => OptimizerConfig {
                weight_decay: self.effective_weight_decay(),
                ..OptimizerConfig::rmsprop(self.learning_rate)
            },
            OptimizerKind::Adamw => OptimizerConfig::adamw(self.learning_rate, self.effective_weight_decay()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(config_err!("learning_rate must be positive, got {}", self.learning_rate));
        }
        self.optimizer_config().validate()?;
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        if self.batch_size < 2 && self.model.uses_batch_norm() {
            return Err(config_err!("batch_size must be at least 2 for models with batch norm"));
        }
        if self.image_size == 0 {
            return Err(config_err!("image_size must be positive"));
        }
        if let Some(s) = self.model.fixed_image_size() {
            if s != self.image_size {
                return Err(config_err!("model expects {}px input but image_size is {}", s, self.image_size));
            }
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(config_err!("split_ratio must lie in (0, 1), got {}", self.split_ratio));
        }
        if self.normalization.std.iter().any(|&s| !(s > 0.0)) {
            return Err(config_err!("normalization std must be positive"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Mutable training progress; together with the parameters it fully
/// determines how a run continues.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub optim: OptimState<f32>,
    /// Next epoch to run (0-based).
    pub epoch: usize,
    pub global_step: u64,
    pub freeze_mask: Vec<bool>,
    pub history: MetricsHistory,
}

/// A model, its parameters and its training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub state: TrainState,
}

/// Per-batch record of a forward pass.
struct BatchOutcome {
    loss_sum: f64,
    predictions: Vec<usize>,
}

fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

impl Trainer {
    /// Fresh model initialized from the config seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let mut store = ParamStore::new();
        let mut init_rng = rng::stream(config.seed, "model_init");
        let model = config.model.build(&mut store, &mut init_rng)?;
        let freeze_mask = apply_freeze_policy(store.num_groups(), &config.freeze_policy, 0)?;
        let history = MetricsHistory::new(&format!("{}-seed{}", config.model.name(), config.seed), &config.hash());
        Ok(Trainer {
            state: TrainState {
                optim: OptimState::new(&store),
                epoch: 0,
                global_step: 0,
                freeze_mask,
                history,
            },
            config,
            model,
            store,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ckpt.config.clone())?;
        ckpt.restore(&mut t)?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(checkpoint::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(self, path)
    }

    fn run_batch(&mut self, manifest: &DatasetManifest, batch: &[usize], batch_no: usize) -> Result<BatchOutcome> {
        let (x, labels) = dataset::load_batch::<f32>(manifest, batch, self.config.image_size, &self.config.normalization)?;
        let tape = Tape::new();
        let seed = derive_seed(self.config.seed, &format!("dropout/{}/{}", self.state.epoch, batch_no));
        let ctx = Ctx::new(&tape, &self.store, Mode::Train, seed).with_trainable_groups(self.state.freeze_mask.clone())?;
        let out = self.model.forward(&ctx, ctx.input(x))?;
        let loss = cross_entropy(out.logits, &labels)?;
        let loss_value = f64::from(loss.value().item());
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at epoch {} batch {} is {}",
                self.state.epoch, batch_no, loss_value
            )));
        }
        let predictions = argmax_rows(&out.logits.value());
        let grads = tape.backward(loss)?;
        let param_grads = ctx.param_grads(&grads);
        let buffers = ctx.take_buffer_updates();
        drop(ctx);
        optim::step(
            &self.config.optimizer_config(),
            &mut self.store,
            &mut self.state.optim,
            &param_grads,
            &self.state.freeze_mask,
        )?;
        for (id, value) in buffers {
            self.store.set(id, value)?;
        }
        self.state.global_step += 1;
        Ok(BatchOutcome {
            loss_sum: loss_value * batch.len() as f64,
            predictions,
        })
    }

    /// Seeded batch order for the current epoch. A trailing batch of one is
    /// dropped for batch-norm models, which cannot normalize a single sample.
    pub fn epoch_batches(&self, manifest: &DatasetManifest) -> Vec<Vec<usize>> {
        let mut order = manifest.indices(Split::Train);
        order.shuffle(&mut rng::stream(self.config.seed, &format!("train_epoch/{}", self.state.epoch)));
        let mut batches: Vec<Vec<usize>> = order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect();
        if self.config.model.uses_batch_norm() && batches.last().is_some_and(|b| b.len() == 1) {
            batches.pop();
        }
        batches
    }

    /// One pass over the training split; advances the epoch counter.
    pub fn train_epoch(&mut self, manifest: &DatasetManifest) -> Result<MetricsRow> {
        self.state.freeze_mask = apply_freeze_policy(self.store.num_groups(), &self.config.freeze_policy, self.state.epoch)?;
        let batches = self.epoch_batches(manifest);
        if batches.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let (mut loss, mut preds, mut labels) = (0.0, Vec::new(), Vec::new());
        for (b, batch) in batches.iter().enumerate() {
            let out = self.run_batch(manifest, batch, b)?;
            loss += out.loss_sum;
            preds.extend(out.predictions);
            labels.extend(manifest.labels(batch));
        }
        let row = MetricsRow {
            epoch: self.state.epoch,
            split: Split::Train,
            mean_loss: loss / preds.len() as f64,
            accuracy: metrics::accuracy(&metrics::confusion(&preds, &labels)?)?,
        };
        self.state.epoch += 1;
        Ok(row)
    }

    /// Eval-mode forward over `indices` in fixed-size chunks; returns the
    /// logits rows and features rows.
    pub fn infer(&self, manifest: &DatasetManifest, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if indices.is_empty() {
            return Err(Error::Data("nothing to evaluate".into()));
        }
        let (mut logits, mut feats, mut d) = (Vec::new(), Vec::new(), 0);
        for chunk in indices.chunks(self.config.batch_size.max(1)) {
            let (x, _) = dataset::load_batch::<f32>(manifest, chunk, self.config.image_size, &self.config.normalization)?;
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &self.store, Mode::Eval, 0);
            let out = self.model.forward(&ctx, ctx.input(x))?;
            logits.extend_from_slice(out.logits.value().data());
            let f = out.features.value();
            d = f.shape()[1];
            feats.extend_from_slice(f.data());
        }
        Ok((Tensor::new(&[indices.len(), 2], logits)?, Tensor::new(&[indices.len(), d], feats)?))
    }

    /// Loss and accuracy over one split; parameters are not touched. Returns
    /// the row and the per-sample predictions.
    pub fn evaluate(&self, manifest: &DatasetManifest, split: Split) -> Result<(MetricsRow, Vec<usize>)> {
        let indices = manifest.indices(split);
        if indices.is_empty() {
            return Err(Error::Data(format!("{} split is empty", split.name())));
        }
        let labels = manifest.labels(&indices);
        let (logits, _) = self.infer(manifest, &indices)?;
        let tape = Tape::new();
        let loss = cross_entropy(tape.constant(logits.clone()), &labels)?.value().item();
        let preds = argmax_rows(&logits);
        let row = MetricsRow {
            epoch: self.state.epoch.saturating_sub(1),
            split,
            mean_loss: f64::from(loss),
            accuracy: metrics::accuracy(&metrics::confusion(&preds, &labels)?)?,
        };
        Ok((row, preds))
    }

    /// Penultimate features `[N, D]` of the given records.
    pub fn extract_features(&self, manifest: &DatasetManifest, indices: &[usize]) -> Result<Tensor<f32>> {
        Ok(self.infer(manifest, indices)?.1)
    }

    /// Runs the remaining epochs. After each epoch the test split is
    /// evaluated, both rows are appended to the history, and `on_epoch` is
    /// called (typically to checkpoint). On a non-finite loss the state from
    /// the start of the failing epoch is handed to `on_abort` before the error
    /// is returned.
    pub fn fit(
        &mut self,
        manifest: &DatasetManifest,
        on_epoch: impl FnMut(&Trainer) -> Result<()>,
        on_abort: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        self.fit_until(manifest, self.config.epochs, on_epoch, on_abort)
    }

    /// Like [`Trainer::fit`] but stops once `stop` epochs are complete
    /// (capped at the configured total).
    pub fn fit_until(
        &mut self,
        manifest: &DatasetManifest,
        stop: usize,
        mut on_epoch: impl FnMut(&Trainer) -> Result<()>,
        mut on_abort: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        let has_test = !manifest.indices(Split::Test).is_empty();
        while self.state.epoch < stop.min(self.config.epochs) {
            let snapshot = (self.store.clone(), self.state.clone());
            let row = match self.train_epoch(manifest) {
                Ok(row) => row,
                Err(e @ Error::NonFinite(_)) => {
                    (self.store, self.state) = snapshot;
                    on_abort(self)?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            self.state.history.push(row)?;
            if has_test {
                let (test, _) = self.evaluate(manifest, Split::Test)?;
                self.state.history.push(test)?;
            }
            on_epoch(self)?;
        }
        Ok(())
    }
}
