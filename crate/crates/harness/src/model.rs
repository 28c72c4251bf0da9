//! The trainable toy backbone: a stride-2 stem, four conv stages, optional
//! part-aligned blocks after chosen stages, global average pooling, a 256-D
//! embedding head, and an identity classifier.
//!
//! Every tensor is initialized from a stream keyed by (seed, tensor name),
//! so adding or removing block insertions never disturbs the other weights
//! — a freshly inserted zero-projection block leaves the model's function
//! bit-identical.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dpb_core::dpb::{
    dpb_forward, DpbConfig, DpbParams, LatentMaskMode, MaskScope, TransformKind,
};
use dpb_core::error::{CoreError, Result};
use dpb_core::masks::{resize_nearest, PartLabelMap};
use dpb_core::ops::{BatchNorm, BnMode};
use dpb_core::{Graph, Scalar, Tensor};

/// Which branches the inserted blocks run, and how.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DpbOptions {
    pub enable_human: bool,
    pub enable_latent: bool,
    /// Human part count K; also the grouping applied to label maps.
    pub part_count: usize,
    pub reduction: usize,
    pub latent_mask_mode: LatentMaskMode,
    pub mask_scope: MaskScope,
    /// Realization of the part-representation transform. The default skips
    /// normalization: the scattered map holds only K distinct vectors, and
    /// batch statistics over near-coincident part means amplify noise by
    /// 1/sqrt(var).
    pub g_kind: TransformKind,
    /// Realization of the latent value transform.
    pub psi_kind: TransformKind,
}

impl Default for DpbOptions {
    fn default() -> Self {
        DpbOptions {
            enable_human: true,
            enable_latent: true,
            part_count: 5,
            reduction: 2,
            latent_mask_mode: LatentMaskMode::None,
            mask_scope: MaskScope::QueriesAndKeys,
            g_kind: TransformKind::Linear,
            psi_kind: TransformKind::LinearNormRelu,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    /// Downsample stride per stage; the last stage keeps stride 1.
    pub stage_strides: Vec<usize>,
    /// (1-based stage index, block count) insertion points.
    pub dpb_insertions: Vec<(usize, usize)>,
    pub embedding_dim: usize,
    pub num_identities: usize,
    pub dpb: DpbOptions,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_channels: 3,
            stem_channels: 8,
            stage_channels: vec![16, 32, 64, 64],
            stage_strides: vec![2, 2, 2, 1],
            dpb_insertions: Vec::new(),
            embedding_dim: 256,
            num_identities: 16,
            dpb: DpbOptions::default(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_strides.len() {
            return Err(CoreError::invalid(format!(
                "backbone: {} stage widths vs {} strides",
                self.stage_channels.len(),
                self.stage_strides.len()
            )));
        }
        if self.stage_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(CoreError::invalid("backbone: strides must be 1 or 2"));
        }
        for &(stage, _) in &self.dpb_insertions {
            if stage == 0 || stage > self.stage_channels.len() {
                return Err(CoreError::invalid(format!(
                    "backbone: insertion stage {stage} outside 1..={}",
                    self.stage_channels.len()
                )));
            }
        }
        if self.num_identities == 0 || self.embedding_dim == 0 {
            return Err(CoreError::invalid(
                "backbone: embedding dim and identity count must be positive",
            ));
        }
        Ok(())
    }

    pub fn total_dpb_count(&self) -> usize {
        self.dpb_insertions.iter().map(|&(_, n)| n).sum()
    }
}

/// FNV-1a over the tensor name, mixed with the model seed. Stable across
/// builds, unlike the std hasher.
fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.rotate_left(17)
}

fn init_uniform<S: Scalar>(dims: &[usize], fan_in: usize, seed: u64, name: &str) -> Result<Tensor<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = dims.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Ok(Tensor::from_vec(data, dims)?.requires_grad(true))
}

struct ConvBlock<S: Scalar> {
    weight: Tensor<S>,
    bn: BatchNorm<S>,
    stride: usize,
}

impl<S: Scalar> ConvBlock<S> {
    fn new(name: &str, c_in: usize, c_out: usize, stride: usize, seed: u64) -> Result<Self> {
        Ok(ConvBlock {
            weight: init_uniform(&[c_out, c_in, 3, 3], c_in * 9, seed, &format!("{name}.conv.weight"))?,
            bn: BatchNorm::new(c_out)?,
            stride,
        })
    }

    fn forward(&self, g: &mut Graph<S>, x: &Tensor<S>, mode: BnMode) -> Result<Tensor<S>> {
        let y = g.conv2d(x, &self.weight, self.stride, 1)?;
        let y = g.batch_norm(&y, &self.bn, mode)?;
        g.relu(&y)
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.conv.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bn.gamma"), self.bn.gamma.clone()));
        out.push((format!("{prefix}.bn.beta"), self.bn.beta.clone()));
        out.push((format!("{prefix}.bn.running_mean"), self.bn.running_mean.clone()));
        out.push((format!("{prefix}.bn.running_var"), self.bn.running_var.clone()));
    }

    fn trainable(&self, out: &mut Vec<Tensor<S>>) {
        out.push(self.weight.clone());
        out.push(self.bn.gamma.clone());
        out.push(self.bn.beta.clone());
    }
}

struct DpbLayer<S: Scalar> {
    cfg: DpbConfig,
    params: DpbParams<S>,
    name: String,
}

/// Forward output: identity logits and the retrieval embedding.
pub struct ModelOutput<S: Scalar> {
    pub logits: Tensor<S>,
    pub embeddings: Tensor<S>,
}

pub struct Model<S: Scalar> {
    pub config: BackboneConfig,
    stem: ConvBlock<S>,
    stages: Vec<ConvBlock<S>>,
    dpbs: Vec<Vec<DpbLayer<S>>>,
    embed_weight: Tensor<S>,
    embed_bias: Tensor<S>,
    embed_bn: BatchNorm<S>,
    cls_weight: Tensor<S>,
    cls_bias: Tensor<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stem = ConvBlock::new("stem", config.input_channels, config.stem_channels, 2, seed)?;
        let mut stages = Vec::new();
        let mut dpbs: Vec<Vec<DpbLayer<S>>> = Vec::new();
        let mut prev = config.stem_channels;
        for (i, (&width, &stride)) in config
            .stage_channels
            .iter()
            .zip(&config.stage_strides)
            .enumerate()
        {
            let stage_name = format!("stage{}", i + 1);
            stages.push(ConvBlock::new(&stage_name, prev, width, stride, seed)?);
            prev = width;

            let count = config
                .dpb_insertions
                .iter()
                .filter(|&&(s, _)| s == i + 1)
                .map(|&(_, n)| n)
                .sum::<usize>();
            let mut layer_list = Vec::new();
            for b in 0..count {
                let name = format!("{stage_name}.dpb{b}");
                let cfg = DpbConfig {
                    channels: width,
                    part_count: config.dpb.part_count,
                    reduction: config.dpb.reduction,
                    enable_human: config.dpb.enable_human,
                    enable_latent: config.dpb.enable_latent,
                    latent_mask_mode: config.dpb.latent_mask_mode,
                    mask_scope: config.dpb.mask_scope,
                    g_kind: config.dpb.g_kind,
                    psi_kind: config.dpb.psi_kind,
                };
                cfg.validate()?;
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
                let params = DpbParams::init(&cfg, &mut rng)?;
                layer_list.push(DpbLayer { cfg, params, name });
            }
            dpbs.push(layer_list);
        }
        let last = *config.stage_channels.last().unwrap();
        let embed_weight = init_uniform(
            &[config.embedding_dim, last],
            last,
            seed,
            "embed.fc.weight",
        )?;
        let embed_bias = Tensor::zeros(&[config.embedding_dim])?.requires_grad(true);
        let embed_bn = BatchNorm::new(config.embedding_dim)?;
        let cls_weight = init_uniform(
            &[config.num_identities, config.embedding_dim],
            config.embedding_dim,
            seed,
            "classifier.weight",
        )?;
        let cls_bias = Tensor::zeros(&[config.num_identities])?.requires_grad(true);
        Ok(Model {
            config: config.clone(),
            stem,
            stages,
            dpbs,
            embed_weight,
            embed_bias,
            embed_bn,
            cls_weight,
            cls_bias,
        })
    }

    /// Run a `[B, C, H, W]` image batch. `labels` holds one full-resolution
    /// part label map per image; each inserted block resizes it to its own
    /// stage geometry.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        images: &Tensor<S>,
        labels: &[PartLabelMap],
        mode: BnMode,
    ) -> Result<ModelOutput<S>> {
        if images.rank() != 4 {
            return Err(CoreError::shape(format!(
                "model expects [B,C,H,W] images, got {}",
                images.shape()
            )));
        }
        let batch = images.dims()[0];
        if labels.len() != batch {
            return Err(CoreError::shape(format!(
                "model: {} label maps for batch {batch}",
                labels.len()
            )));
        }
        let mut x = self.stem.forward(g, images, mode)?;
        for (stage, blocks) in self.stages.iter().zip(&self.dpbs) {
            x = stage.forward(g, &x, mode)?;
            if blocks.is_empty() {
                continue;
            }
            let (h, w) = (x.dims()[2], x.dims()[3]);
            let stage_labels: Vec<PartLabelMap> = labels
                .iter()
                .map(|l| resize_nearest(l, h, w))
                .collect::<Result<_>>()?;
            for layer in blocks {
                let mut parts = Vec::with_capacity(batch);
                for b in 0..batch {
                    let xi = g.batch_index(&x, b)?;
                    let zi = dpb_forward(g, &xi, &stage_labels[b], &layer.cfg, &layer.params, mode)?;
                    parts.push(zi);
                }
                x = g.batch_stack(&parts)?;
            }
        }
        let pooled = g.global_avg_pool(&x)?;
        let embedded = g.linear(&pooled, &self.embed_weight, &self.embed_bias)?;
        let normed = g.batch_norm(&embedded, &self.embed_bn, mode)?;
        let embeddings = g.relu(&normed)?;
        let logits = g.linear(&embeddings, &self.cls_weight, &self.cls_bias)?;
        Ok(ModelOutput { logits, embeddings })
    }

    /// The feature map entering the first block of a 1-based stage: stem
    /// plus all earlier stages (with their blocks) plus this stage's conv.
    /// Used for mask visualization.
    pub fn features_entering_stage(
        &self,
        g: &mut Graph<S>,
        images: &Tensor<S>,
        labels: &[PartLabelMap],
        stage: usize,
        mode: BnMode,
    ) -> Result<Tensor<S>> {
        if stage == 0 || stage > self.stages.len() {
            return Err(CoreError::invalid(format!(
                "stage {stage} outside 1..={}",
                self.stages.len()
            )));
        }
        let batch = images.dims()[0];
        let mut x = self.stem.forward(g, images, mode)?;
        for (i, (stage_block, blocks)) in self.stages.iter().zip(&self.dpbs).enumerate() {
            x = stage_block.forward(g, &x, mode)?;
            if i + 1 == stage {
                return Ok(x);
            }
            if blocks.is_empty() {
                continue;
            }
            let (h, w) = (x.dims()[2], x.dims()[3]);
            let stage_labels: Vec<PartLabelMap> = labels
                .iter()
                .map(|l| resize_nearest(l, h, w))
                .collect::<Result<_>>()?;
            for layer in blocks {
                let mut parts = Vec::with_capacity(batch);
                for b in 0..batch {
                    let xi = g.batch_index(&x, b)?;
                    let zi = dpb_forward(g, &xi, &stage_labels[b], &layer.cfg, &layer.params, mode)?;
                    parts.push(zi);
                }
                x = g.batch_stack(&parts)?;
            }
        }
        Ok(x)
    }

    /// The configuration and parameters of one inserted block, when present.
    pub fn dpb_at(&self, stage: usize, index: usize) -> Option<(&DpbConfig, &DpbParams<S>)> {
        self.dpbs
            .get(stage.checked_sub(1)?)
            .and_then(|blocks| blocks.get(index))
            .map(|layer| (&layer.cfg, &layer.params))
    }

    /// Every tensor, in checkpoint order (includes running statistics).
    pub fn named_tensors(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.stem.collect("stem", &mut out);
        for (i, stage) in self.stages.iter().enumerate() {
            stage.collect(&format!("stage{}", i + 1), &mut out);
            for layer in &self.dpbs[i] {
                out.extend(layer.params.named_tensors(&layer.name));
            }
        }
        out.push(("embed.fc.weight".into(), self.embed_weight.clone()));
        out.push(("embed.fc.bias".into(), self.embed_bias.clone()));
        out.push(("embed.bn.gamma".into(), self.embed_bn.gamma.clone()));
        out.push(("embed.bn.beta".into(), self.embed_bn.beta.clone()));
        out.push(("embed.bn.running_mean".into(), self.embed_bn.running_mean.clone()));
        out.push(("embed.bn.running_var".into(), self.embed_bn.running_var.clone()));
        out.push(("classifier.weight".into(), self.cls_weight.clone()));
        out.push(("classifier.bias".into(), self.cls_bias.clone()));
        out
    }

    /// Parameters the optimizer updates (no running statistics).
    pub fn trainable(&self) -> Vec<Tensor<S>> {
        let mut out = Vec::new();
        self.stem.trainable(&mut out);
        for (i, stage) in self.stages.iter().enumerate() {
            stage.trainable(&mut out);
            for layer in &self.dpbs[i] {
                out.extend(layer.params.trainable());
            }
        }
        out.push(self.embed_weight.clone());
        out.push(self.embed_bias.clone());
        out.push(self.embed_bn.gamma.clone());
        out.push(self.embed_bn.beta.clone());
        out.push(self.cls_weight.clone());
        out.push(self.cls_bias.clone());
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        dpb_core::checkpoint::save_checkpoint(path, &self.named_tensors())
    }

    pub fn load(&self, path: &std::path::Path) -> Result<()> {
        dpb_core::checkpoint::load_checkpoint(path, &self.named_tensors())
    }
}
