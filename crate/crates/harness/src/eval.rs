//! Retrieval evaluation: extract 256-D embeddings in eval mode and hand the
//! query/gallery sets to the metrics pipeline.

use crate::dataset::{Dataset, Split};
use crate::model::Model;
use dpb_core::error::Result;
use dpb_core::masks::{GroupingScheme, PartLabelMap};
use dpb_core::metrics::{cmc_and_map, EmbeddingSet, EvalOptions, EvalResult, ItemMeta, Role};
use dpb_core::{BnMode, Graph, Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct EvalSettings {
    pub k_max: usize,
    pub exclude_same_camera: bool,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            k_max: 50,
            exclude_same_camera: true,
            batch_size: 32,
        }
    }
}

/// Embed the given samples in eval mode. Batch size only controls memory;
/// eval-mode normalization uses running statistics, so results do not
/// depend on the batching.
pub fn extract_embeddings<S: Scalar>(
    model: &Model<S>,
    dataset: &Dataset,
    grouped: &[PartLabelMap],
    indices: &[usize],
    role: Role,
    settings: &EvalSettings,
) -> Result<EmbeddingSet> {
    let dim = model.config.embedding_dim;
    let mut vectors = Vec::with_capacity(indices.len() * dim);
    let mut meta = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(settings.batch_size.max(1)) {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for &idx in chunk {
            let sample = &dataset.samples[idx];
            data.extend(sample.image.data.iter().map(|&v| S::from_f64(v as f64)));
            labels.push(grouped[idx].clone());
        }
        let first = &dataset.samples[chunk[0]].image;
        let images = Tensor::from_vec(data, &[chunk.len(), 3, first.height, first.width])?;
        let mut graph = Graph::inference();
        let output = model.forward(&mut graph, &images, &labels, BnMode::Eval)?;
        let emb = output.embeddings.data();
        vectors.extend(emb.iter().map(|&v| v.to_f64() as f32));
        for &idx in chunk {
            let sample = &dataset.samples[idx];
            meta.push(ItemMeta {
                id: sample.identity,
                camera: sample.camera,
                junk: sample.junk,
            });
        }
    }
    EmbeddingSet::new(dim, vectors, meta, role)
}

/// Evaluate the dataset's query split against its gallery split.
pub fn evaluate_split<S: Scalar>(
    model: &Model<S>,
    dataset: &Dataset,
    scheme: &GroupingScheme,
    settings: &EvalSettings,
) -> Result<EvalResult> {
    let grouped = dataset.grouped_labels(scheme)?;
    let query_idx = dataset.indices_of(Split::Query);
    let gallery_idx = dataset.indices_of(Split::Gallery);
    let queries = extract_embeddings(model, dataset, &grouped, &query_idx, Role::Query, settings)?;
    let gallery = extract_embeddings(
        model,
        dataset,
        &grouped,
        &gallery_idx,
        Role::Gallery,
        settings,
    )?;
    let opts = EvalOptions {
        k_max: settings.k_max.min(gallery.len().max(1)),
        exclude_same_camera: settings.exclude_same_camera,
    };
    cmc_and_map(&queries, &gallery, &opts)
}
