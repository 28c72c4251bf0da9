//! Training and evaluation harness around the part-aligned block: a small
//! configurable conv backbone, synthetic person-retrieval data, PK-sampled
//! training with the combined loss, retrieval evaluation, and the ablation
//! grid.

pub mod augment;
pub mod dataset;
pub mod eval;
pub mod experiment;
pub mod gradsuite;
pub mod model;
pub mod synth;
pub mod train;

pub use dataset::{Dataset, ImageF32, ManifestRow, PkSampler, Split};
pub use experiment::{ablate, run_trial, ModelVariant};
pub use model::{BackboneConfig, DpbOptions, Model, ModelOutput};
pub use synth::{synth_generate, LayoutParams, SyntheticDatasetSpec};
pub use train::{train, EpochLog, RunConfig, TrainOutcome};
