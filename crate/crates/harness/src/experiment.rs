//! Model variants for the ablation grid and the directional comparison:
//! baseline, human-branch-only at several part counts, latent-only, and
//! the combined block.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::model::{BackboneConfig, DpbOptions, Model};
use crate::train::{train, RunConfig, TrainOutcome};
use dpb_core::dpb::{LatentMaskMode, MaskScope};
use dpb_core::error::Result;
use dpb_core::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelVariant {
    Baseline,
    Hp1,
    Hp2,
    Hp5,
    Latent,
    Hp5Latent,
}

impl ModelVariant {
    pub fn label(&self) -> &'static str {
        match self {
            ModelVariant::Baseline => "baseline",
            ModelVariant::Hp1 => "hp-1",
            ModelVariant::Hp2 => "hp-2",
            ModelVariant::Hp5 => "hp-5",
            ModelVariant::Latent => "latent",
            ModelVariant::Hp5Latent => "hp-5+latent",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "baseline" => Some(ModelVariant::Baseline),
            "hp-1" | "hp1" => Some(ModelVariant::Hp1),
            "hp-2" | "hp2" => Some(ModelVariant::Hp2),
            "hp-5" | "hp5" => Some(ModelVariant::Hp5),
            "latent" => Some(ModelVariant::Latent),
            "hp-5+latent" | "hp5+latent" | "hp5-latent" => Some(ModelVariant::Hp5Latent),
            _ => None,
        }
    }

    /// The six rows of the ablation grid.
    pub fn grid() -> [ModelVariant; 6] {
        [
            ModelVariant::Baseline,
            ModelVariant::Hp1,
            ModelVariant::Hp2,
            ModelVariant::Hp5,
            ModelVariant::Latent,
            ModelVariant::Hp5Latent,
        ]
    }

    fn dpb_options(&self, mask_mode: LatentMaskMode) -> Option<DpbOptions> {
        let (human, latent, k) = match self {
            ModelVariant::Baseline => return None,
            ModelVariant::Hp1 => (true, false, 1),
            ModelVariant::Hp2 => (true, false, 2),
            ModelVariant::Hp5 => (true, false, 5),
            ModelVariant::Latent => (false, true, 5),
            ModelVariant::Hp5Latent => (true, true, 5),
        };
        let defaults = DpbOptions::default();
        Some(DpbOptions {
            enable_human: human,
            enable_latent: latent,
            part_count: k,
            latent_mask_mode: if latent { mask_mode } else { LatentMaskMode::None },
            ..defaults
        })
    }

    /// Configure insertions for this variant: `blocks` blocks after the
    /// given 1-based stage (none for the baseline).
    pub fn configure(
        &self,
        base: &BackboneConfig,
        stage: usize,
        blocks: usize,
        mask_mode: LatentMaskMode,
    ) -> BackboneConfig {
        let mut config = base.clone();
        match self.dpb_options(mask_mode) {
            None => config.dpb_insertions = Vec::new(),
            Some(options) => {
                config.dpb_insertions = vec![(stage, blocks)];
                config.dpb = options;
            }
        }
        config
    }
}

pub struct TrialResult {
    pub variant: ModelVariant,
    pub outcome: TrainOutcome,
}

/// Train one variant from scratch and evaluate it on the dataset's
/// query/gallery split.
pub fn run_trial<S: Scalar>(
    dataset: &Dataset,
    variant: ModelVariant,
    stage: usize,
    blocks: usize,
    run: &RunConfig,
) -> Result<TrialResult> {
    let mut run = run.clone();
    run.backbone = variant.configure(&run.backbone, stage, blocks, run.backbone.dpb.latent_mask_mode);
    run.backbone.num_identities = dataset.num_train_identities.max(1);
    let model = Model::<S>::new(&run.backbone, run.seed)?;
    let outcome = train(&run, dataset, &model)?;
    Ok(TrialResult { variant, outcome })
}

/// The ablation grid at one insertion stage: baseline, three part counts of
/// the human branch, latent-only, and the combined block.
pub fn ablate<S: Scalar>(
    dataset: &Dataset,
    stage: usize,
    blocks: usize,
    run: &RunConfig,
) -> Result<Vec<TrialResult>> {
    ModelVariant::grid()
        .into_iter()
        .map(|variant| run_trial::<S>(dataset, variant, stage, blocks, run))
        .collect()
}
