//! The training loop: PK-sampled batches, combined softmax + triplet loss,
//! SGD with momentum, and a step learning-rate schedule that decays once at
//! a configurable fraction of the run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentFlags};
use crate::dataset::{Dataset, PkSampler};
use crate::eval::{evaluate_split, EvalSettings};
use crate::model::{BackboneConfig, Model};
use dpb_core::error::Result;
use dpb_core::losses::{combined_loss, EmbeddingBatch, LossOptions};
use dpb_core::masks::{GroupingScheme, PartLabelMap};
use dpb_core::metrics::EvalResult;
use dpb_core::optim::SgdOptimizer;
use dpb_core::{BnMode, Graph, Scalar, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    /// Identities per batch.
    pub p: usize,
    /// Instances per identity.
    pub k: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    /// Epoch at which the learning rate decays once; `None` scales the
    /// usual 40-of-60 shape to two thirds of the run.
    pub decay_epoch: Option<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: AugmentFlags,
    pub use_triplet: bool,
    pub margin: f64,
    pub normalize_embeddings: bool,
    pub seed: u64,
    pub deterministic: bool,
    /// Run retrieval validation every this many epochs (0: only at the end).
    pub eval_every: usize,
    pub backbone: BackboneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            p: 16,
            k: 4,
            epochs: 60,
            base_lr: 0.05,
            lr_decay_factor: 0.1,
            decay_epoch: None,
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: AugmentFlags::default(),
            use_triplet: true,
            margin: 0.3,
            normalize_embeddings: false,
            seed: 0,
            deterministic: true,
            eval_every: 1,
            backbone: BackboneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn effective_decay_epoch(&self) -> usize {
        match self.decay_epoch {
            Some(e) => e,
            None => self.epochs * 2 / 3,
        }
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch >= self.effective_decay_epoch() {
            self.base_lr * self.lr_decay_factor
        } else {
            self.base_lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.p == 0 || self.k == 0 {
            return Err(dpb_core::CoreError::invalid("run: P and K must be positive"));
        }
        if let Some(decay) = self.decay_epoch {
            if decay > self.epochs {
                return Err(dpb_core::CoreError::invalid(format!(
                    "run: decay epoch {decay} after final epoch {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let run: RunConfig = serde_json::from_str(&text)?;
        run.validate()?;
        Ok(run)
    }

    pub fn to_json_file(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub softmax_loss: f64,
    pub triplet_loss: f64,
    pub active_triplet_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_recall_1: Option<f64>,
}

pub struct TrainOutcome {
    pub epoch_logs: Vec<EpochLog>,
    pub final_eval: Option<EvalResult>,
}

fn stream(seed: u64, tag: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in tag.as_bytes() {
        h ^= *byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^= a.wrapping_mul(0x9e3779b97f4a7c15);
    h ^= b.rotate_left(32);
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Assemble a `[B,3,H,W]` tensor plus per-image label maps for the chosen
/// samples, applying augmentation with a per-slot RNG stream keyed by
/// (seed, epoch, slot).
#[allow(clippy::too_many_arguments)]
fn make_batch<S: Scalar>(
    dataset: &Dataset,
    grouped: &[PartLabelMap],
    indices: &[usize],
    flags: &AugmentFlags,
    seed: u64,
    epoch: usize,
) -> Result<(Tensor<S>, Vec<PartLabelMap>, Vec<usize>, Vec<i64>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut class_labels = Vec::new();
    let mut ids = Vec::new();
    for (slot, &idx) in indices.iter().enumerate() {
        let sample = &dataset.samples[idx];
        let mut rng = stream(seed, "augment", epoch as u64, slot as u64);
        let (image, label_map) = augment(&sample.image, &grouped[idx], flags, &mut rng);
        data.extend(image.data.iter().map(|&v| S::from_f64(v as f64)));
        labels.push(label_map);
        class_labels.push(sample.class_index.expect("train sample has a class"));
        ids.push(sample.identity);
    }
    let first = &dataset.samples[indices[0]].image;
    let images = Tensor::from_vec(data, &[indices.len(), 3, first.height, first.width])?;
    Ok((images, labels, class_labels, ids))
}

/// Train `model` on the dataset's train split. Label maps are grouped once
/// under the model's configured part count.
pub fn train<S: Scalar>(
    run: &RunConfig,
    dataset: &Dataset,
    model: &Model<S>,
) -> Result<TrainOutcome> {
    run.validate()?;
    let scheme = GroupingScheme::for_part_count(run.backbone.dpb.part_count)?;
    train_with_scheme(run, dataset, model, &scheme)
}

pub fn train_with_scheme<S: Scalar>(
    run: &RunConfig,
    dataset: &Dataset,
    model: &Model<S>,
    scheme: &GroupingScheme,
) -> Result<TrainOutcome> {
    run.validate()?;
    let grouped = dataset.grouped_labels(scheme)?;
    let sampler = PkSampler::new(dataset, run.p, run.k)?;
    let mut optimizer = SgdOptimizer::new(
        model.trainable(),
        run.base_lr,
        run.momentum,
        run.weight_decay,
    );
    let loss_opts = LossOptions {
        use_triplet: run.use_triplet,
        margin: run.margin,
        normalize_embeddings: run.normalize_embeddings,
    };
    let eval_settings = EvalSettings::default();
    let has_eval_split = dataset
        .samples
        .iter()
        .any(|s| s.split == crate::dataset::Split::Query);

    let mut epoch_logs = Vec::with_capacity(run.epochs);
    for epoch in 0..run.epochs {
        optimizer.set_learning_rate(run.learning_rate_at(epoch));
        let mut sampler_rng = stream(run.seed, "sampler", epoch as u64, 0);
        let batches = sampler.epoch_batches(&mut sampler_rng);
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut steps = 0usize;
        for batch_indices in &batches {
            let (images, labels, class_labels, ids) = make_batch::<S>(
                dataset,
                &grouped,
                batch_indices,
                &run.augment,
                run.seed,
                epoch,
            )?;
            let mut graph = Graph::new();
            let output = model.forward(&mut graph, &images, &labels, BnMode::Train)?;
            let emb_batch = EmbeddingBatch::new(output.embeddings.clone(), ids)?;
            let combined = combined_loss(
                &mut graph,
                &output.logits,
                &emb_batch,
                &class_labels,
                &loss_opts,
            )?;
            optimizer.zero_grads();
            graph.backward(&combined.loss)?;
            optimizer.step()?;
            sums.0 += combined.report.combined;
            sums.1 += combined.report.softmax_loss;
            sums.2 += combined.report.triplet_loss;
            sums.3 += combined.report.active_triplet_fraction;
            steps += 1;
        }
        let denom = steps.max(1) as f64;
        let val_recall_1 = if has_eval_split
            && run.eval_every > 0
            && (epoch + 1) % run.eval_every == 0
        {
            Some(evaluate_split(model, dataset, scheme, &eval_settings)?.recall_at(1))
        } else {
            None
        };
        epoch_logs.push(EpochLog {
            epoch,
            lr: optimizer.learning_rate,
            loss: sums.0 / denom,
            softmax_loss: sums.1 / denom,
            triplet_loss: sums.2 / denom,
            active_triplet_fraction: sums.3 / denom,
            val_recall_1,
        });
    }
    let final_eval = if has_eval_split {
        Some(evaluate_split(model, dataset, scheme, &eval_settings)?)
    } else {
        None
    };
    Ok(TrainOutcome {
        epoch_logs,
        final_eval,
    })
}
