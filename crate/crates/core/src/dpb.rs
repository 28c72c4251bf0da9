//! The dual part-aligned block (DPB): a human part branch that pools pixel
//! features within parsed parts and scatters each part vector back to its
//! member pixels, a latent branch that runs pixel-to-pixel self-attention,
//! and a residual fusion `Z = X + X_human + X_latent`.
//!
//! Both branches end in a zero-initialized output projection, so a freshly
//! constructed block is exactly the identity map and can be inserted into
//! any backbone without disturbing it.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::masks::{build_confidence_maps, ConfidenceMaps, PartLabelMap};
use crate::ops::{BatchNorm, BnMode};
use crate::pnm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a per-pixel transform is realized.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// Pass-through; used by oracle tests.
    Identity,
    /// Pointwise linear map.
    Linear,
    /// Pointwise linear map, batch norm over the map's pixels, ReLU.
    LinearNormRelu,
}

/// Restriction of the latent branch by the binary human mask.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMaskMode {
    /// Full self-attention over all pixels.
    None,
    /// Attention restricted to background pixels only.
    KeepNonHumanOnly,
    /// Attention restricted to human pixels only.
    KeepHumanOnly,
}

/// Which side of the attention the mask restricts.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    /// Masked pixels neither attend nor get attended to; their branch
    /// output is zero.
    QueriesAndKeys,
    /// Every pixel attends, but only unmasked pixels can be attended to.
    KeysOnly,
}

#[derive(Clone, Debug)]
pub struct DpbConfig {
    pub channels: usize,
    /// Human part count K (including background as part 0).
    pub part_count: usize,
    /// Channel divisor for the similarity transforms.
    pub reduction: usize,
    pub enable_human: bool,
    pub enable_latent: bool,
    pub latent_mask_mode: LatentMaskMode,
    pub mask_scope: MaskScope,
    pub g_kind: TransformKind,
    pub psi_kind: TransformKind,
}

impl DpbConfig {
    pub fn new(channels: usize, part_count: usize) -> Result<Self> {
        let cfg = DpbConfig {
            channels,
            part_count,
            reduction: 2,
            enable_human: true,
            enable_latent: true,
            latent_mask_mode: LatentMaskMode::None,
            mask_scope: MaskScope::QueriesAndKeys,
            g_kind: TransformKind::LinearNormRelu,
            psi_kind: TransformKind::LinearNormRelu,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enable_human && !self.enable_latent {
            return Err(CoreError::invalid(
                "dpb: at least one branch must be enabled",
            ));
        }
        if self.channels == 0 || self.reduction == 0 || self.channels % self.reduction != 0 {
            return Err(CoreError::invalid(format!(
                "dpb: channels {} must be divisible by reduction {}",
                self.channels, self.reduction
            )));
        }
        if self.part_count == 0 {
            return Err(CoreError::invalid("dpb: part count must be >= 1"));
        }
        Ok(())
    }

    pub fn reduced_channels(&self) -> usize {
        self.channels / self.reduction
    }
}

/// A pointwise transform on pixel rows, in one of the [`TransformKind`]
/// realizations. Identity carries no tensors.
#[derive(Clone)]
pub struct RowTransform<S: Scalar> {
    pub kind: TransformKind,
    pub weight: Option<Tensor<S>>,
    pub bias: Option<Tensor<S>>,
    pub norm: Option<BatchNorm<S>>,
}

impl<S: Scalar> RowTransform<S> {
    pub fn identity() -> Self {
        RowTransform {
            kind: TransformKind::Identity,
            weight: None,
            bias: None,
            norm: None,
        }
    }

    /// Random uniform init with bound 1/sqrt(fan_in), like the backbone's
    /// linear layers.
    pub fn init(kind: TransformKind, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Result<Self> {
        if kind == TransformKind::Identity {
            return Ok(Self::identity());
        }
        let bound = 1.0 / (c_in as f64).sqrt();
        let data: Vec<S> = (0..c_out * c_in)
            .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        let weight = Tensor::from_vec(data, &[c_out, c_in])?.requires_grad(true);
        let bias = Tensor::zeros(&[c_out])?.requires_grad(true);
        let norm = if kind == TransformKind::LinearNormRelu {
            Some(BatchNorm::new(c_out)?)
        } else {
            None
        };
        Ok(RowTransform {
            kind,
            weight: Some(weight),
            bias: Some(bias),
            norm,
        })
    }

    /// Exact identity weights on a square linear map; test scaffolding.
    pub fn exact_linear_identity(channels: usize) -> Result<Self> {
        let mut data = vec![S::zero(); channels * channels];
        for i in 0..channels {
            data[i * channels + i] = S::one();
        }
        Ok(RowTransform {
            kind: TransformKind::Linear,
            weight: Some(Tensor::from_vec(data, &[channels, channels])?.requires_grad(true)),
            bias: Some(Tensor::zeros(&[channels])?.requires_grad(true)),
            norm: None,
        })
    }

    pub fn apply(&self, g: &mut Graph<S>, rows: &Tensor<S>, mode: BnMode) -> Result<Tensor<S>> {
        let y = self.apply_linear_stage(g, rows)?;
        self.apply_norm_stage(g, &y, mode)
    }

    /// Just the pointwise linear map, if any.
    pub fn apply_linear_stage(&self, g: &mut Graph<S>, rows: &Tensor<S>) -> Result<Tensor<S>> {
        match self.kind {
            TransformKind::Identity => Ok(rows.clone()),
            TransformKind::Linear | TransformKind::LinearNormRelu => {
                g.linear(rows, self.weight.as_ref().unwrap(), self.bias.as_ref().unwrap())
            }
        }
    }

    /// Just the normalization + activation, if any. The human branch runs
    /// this on the scattered full-resolution rows, so the statistics are
    /// over the N pixels regardless of the part count.
    pub fn apply_norm_stage(
        &self,
        g: &mut Graph<S>,
        rows: &Tensor<S>,
        mode: BnMode,
    ) -> Result<Tensor<S>> {
        match self.kind {
            TransformKind::Identity | TransformKind::Linear => Ok(rows.clone()),
            TransformKind::LinearNormRelu => {
                let y = g.batch_norm(rows, self.norm.as_ref().unwrap(), mode)?;
                g.relu(&y)
            }
        }
    }

    fn collect_tensors(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        if let Some(w) = &self.weight {
            out.push((format!("{prefix}.weight"), w.clone()));
        }
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
        if let Some(bn) = &self.norm {
            out.push((format!("{prefix}.bn.gamma"), bn.gamma.clone()));
            out.push((format!("{prefix}.bn.beta"), bn.beta.clone()));
            out.push((format!("{prefix}.bn.running_mean"), bn.running_mean.clone()));
            out.push((format!("{prefix}.bn.running_var"), bn.running_var.clone()));
        }
    }

    fn collect_trainable(&self, out: &mut Vec<Tensor<S>>) {
        if let Some(w) = &self.weight {
            out.push(w.clone());
        }
        if let Some(b) = &self.bias {
            out.push(b.clone());
        }
        if let Some(bn) = &self.norm {
            out.push(bn.gamma.clone());
            out.push(bn.beta.clone());
        }
    }
}

/// Plain linear projection used as each branch's output projection.
#[derive(Clone)]
pub struct Projection<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Projection<S> {
    /// Zero-initialized: makes the enclosing block an identity map.
    pub fn zeros(channels: usize) -> Result<Self> {
        Ok(Projection {
            weight: Tensor::zeros(&[channels, channels])?.requires_grad(true),
            bias: Tensor::zeros(&[channels])?.requires_grad(true),
        })
    }

    /// Exact identity; test scaffolding for oracle comparisons.
    pub fn exact_identity(channels: usize) -> Result<Self> {
        let mut data = vec![S::zero(); channels * channels];
        for i in 0..channels {
            data[i * channels + i] = S::one();
        }
        Ok(Projection {
            weight: Tensor::from_vec(data, &[channels, channels])?.requires_grad(true),
            bias: Tensor::zeros(&[channels])?.requires_grad(true),
        })
    }

    pub fn apply(&self, g: &mut Graph<S>, rows: &Tensor<S>) -> Result<Tensor<S>> {
        g.linear(rows, &self.weight, &self.bias)
    }
}

/// Learnable state of one DPB.
#[derive(Clone)]
pub struct DpbParams<S: Scalar> {
    /// Part-representation transform of the human branch.
    pub g: RowTransform<S>,
    /// Key transform of the similarity kernel.
    pub theta: RowTransform<S>,
    /// Query transform of the similarity kernel.
    pub phi: RowTransform<S>,
    /// Value transform of the latent branch.
    pub psi: RowTransform<S>,
    pub human_proj: Projection<S>,
    pub latent_proj: Projection<S>,
}

impl<S: Scalar> DpbParams<S> {
    /// Fresh parameters: random transforms, zero output projections.
    pub fn init(cfg: &DpbConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let cr = cfg.reduced_channels();
        Ok(DpbParams {
            g: RowTransform::init(cfg.g_kind, c, c, rng)?,
            theta: RowTransform::init(TransformKind::Linear, c, cr, rng)?,
            phi: RowTransform::init(TransformKind::Linear, c, cr, rng)?,
            psi: RowTransform::init(cfg.psi_kind, c, c, rng)?,
            human_proj: Projection::zeros(c)?,
            latent_proj: Projection::zeros(c)?,
        })
    }

    /// All transforms and projections pass values through unchanged; used
    /// by the oracle tests that compare against hand-computed branches.
    pub fn all_identity(cfg: &DpbConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(DpbParams {
            g: RowTransform::identity(),
            theta: RowTransform::identity(),
            phi: RowTransform::identity(),
            psi: RowTransform::identity(),
            human_proj: Projection::exact_identity(c)?,
            latent_proj: Projection::exact_identity(c)?,
        })
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.g.collect_tensors(&format!("{prefix}.g"), &mut out);
        self.theta.collect_tensors(&format!("{prefix}.theta"), &mut out);
        self.phi.collect_tensors(&format!("{prefix}.phi"), &mut out);
        self.psi.collect_tensors(&format!("{prefix}.psi"), &mut out);
        out.push((format!("{prefix}.human_proj.weight"), self.human_proj.weight.clone()));
        out.push((format!("{prefix}.human_proj.bias"), self.human_proj.bias.clone()));
        out.push((format!("{prefix}.latent_proj.weight"), self.latent_proj.weight.clone()));
        out.push((format!("{prefix}.latent_proj.bias"), self.latent_proj.bias.clone()));
        out
    }

    pub fn trainable(&self) -> Vec<Tensor<S>> {
        let mut out = Vec::new();
        self.g.collect_trainable(&mut out);
        self.theta.collect_trainable(&mut out);
        self.phi.collect_trainable(&mut out);
        self.psi.collect_trainable(&mut out);
        out.push(self.human_proj.weight.clone());
        out.push(self.human_proj.bias.clone());
        out.push(self.latent_proj.weight.clone());
        out.push(self.latent_proj.bias.clone());
        out
    }
}

fn check_map_shape<S: Scalar>(x: &Tensor<S>, labels: &PartLabelMap) -> Result<(usize, usize, usize)> {
    if x.rank() != 3 {
        return Err(CoreError::shape(format!(
            "dpb expects a [C,H,W] feature map, got {}",
            x.shape()
        )));
    }
    let (c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    if labels.height() != h || labels.width() != w {
        return Err(CoreError::shape(format!(
            "label map {}x{} does not match feature map {}x{}",
            labels.height(),
            labels.width(),
            h,
            w
        )));
    }
    Ok((c, h, w))
}

/// Convert confidence maps to a constant `[K, N]` pooling matrix.
fn confidence_tensor<S: Scalar>(conf: &ConfidenceMaps) -> Result<Tensor<S>> {
    let data: Vec<S> = conf.weights().iter().map(|&w| S::from_f64(w)).collect();
    Tensor::from_vec(data, &[conf.part_count(), conf.pixels()])
}

/// Human part branch on a `[C,H,W]` map: pool each part's pixels through
/// the L1-normalized confidence maps, transform the pooled vectors, and
/// hand every pixel the representation of the part it belongs to
/// (background is part 0 and is aggregated the same way). Returns the
/// branch output as a `[C,H,W]` map including the output projection.
pub fn human_branch<S: Scalar>(
    g: &mut Graph<S>,
    x: &Tensor<S>,
    conf: &ConfidenceMaps,
    labels: &PartLabelMap,
    params: &DpbParams<S>,
    cfg: &DpbConfig,
    mode: BnMode,
) -> Result<Tensor<S>> {
    let (_, h, w) = check_map_shape(x, labels)?;
    if conf.part_count() != cfg.part_count || labels.part_count() != cfg.part_count {
        return Err(CoreError::invalid(format!(
            "human_branch: configured for K={}, got confidence K={} and labels K={}",
            cfg.part_count,
            conf.part_count(),
            labels.part_count()
        )));
    }
    if conf.pixels() != labels.len() {
        return Err(CoreError::shape(format!(
            "human_branch: confidence maps cover {} pixels, labels {}",
            conf.pixels(),
            labels.len()
        )));
    }
    let rows = g.pixels_to_rows(x)?;
    let pool = confidence_tensor::<S>(conf)?;
    // pooled[k] = sum_i conf[k,i] * x_i — the within-part mean
    let pooled = g.matmul(&pool, &rows)?;
    let parts = part_representations(g, &pooled, conf, params)?;
    let scattered = g.scatter_rows(&parts, &labels.labels_usize())?;
    // g's normalization runs over the N scattered pixels: well defined for
    // any part count (a per-part batch of K rows degenerates at K = 1) and
    // far better conditioned than statistics over a handful of part means.
    let activated = params.g.apply_norm_stage(g, &scattered, mode)?;
    let projected = params.human_proj.apply(g, &activated)?;
    g.rows_to_pixels(&projected, h, w)
}

/// Linearly transformed part representations `[K, C]`; rows of empty parts
/// are forced to exact zero so they stay neutral wherever they are read.
fn part_representations<S: Scalar>(
    g: &mut Graph<S>,
    pooled: &Tensor<S>,
    conf: &ConfidenceMaps,
    params: &DpbParams<S>,
) -> Result<Tensor<S>> {
    let transformed = params.g.apply_linear_stage(g, pooled)?;
    if conf.counts().iter().all(|&c| c > 0) {
        return Ok(transformed);
    }
    let occupancy: Vec<S> = conf
        .counts()
        .iter()
        .map(|&c| if c > 0 { S::one() } else { S::zero() })
        .collect();
    g.scale_rows(&transformed, &occupancy)
}

/// Latent branch: similarity logits between transformed pixel pairs,
/// row-softmax attention, value aggregation, output projection. The
/// similarity for query pixel i and key pixel j is `theta(x_j) . phi(x_i)`.
pub fn latent_branch<S: Scalar>(
    g: &mut Graph<S>,
    x: &Tensor<S>,
    params: &DpbParams<S>,
    cfg: &DpbConfig,
    mode: BnMode,
) -> Result<Tensor<S>> {
    latent_branch_inner(g, x, None, params, cfg, mode)
}

/// Latent branch restricted by a pixel mask (true = participates). With
/// [`MaskScope::QueriesAndKeys`], masked-out pixels contribute nothing and
/// receive a zero branch output; with [`MaskScope::KeysOnly`] they still
/// attend to the unmasked pixels.
pub fn latent_branch_masked<S: Scalar>(
    g: &mut Graph<S>,
    x: &Tensor<S>,
    mask: &[bool],
    params: &DpbParams<S>,
    cfg: &DpbConfig,
    mode: BnMode,
) -> Result<Tensor<S>> {
    latent_branch_inner(g, x, Some(mask), params, cfg, mode)
}

fn latent_branch_inner<S: Scalar>(
    g: &mut Graph<S>,
    x: &Tensor<S>,
    mask: Option<&[bool]>,
    params: &DpbParams<S>,
    cfg: &DpbConfig,
    mode: BnMode,
) -> Result<Tensor<S>> {
    if x.rank() != 3 {
        return Err(CoreError::shape(format!(
            "latent_branch expects a [C,H,W] feature map, got {}",
            x.shape()
        )));
    }
    let (h, w) = (x.dims()[1], x.dims()[2]);
    let n = h * w;
    if let Some(m) = mask {
        if m.len() != n {
            return Err(CoreError::shape(format!(
                "latent_branch: mask length {} for {} pixels",
                m.len(),
                n
            )));
        }
    }
    let rows = g.pixels_to_rows(x)?;
    let keys = params.theta.apply(g, &rows, mode)?;
    let queries = params.phi.apply(g, &rows, mode)?;
    // logits[i, j] = phi(x_i) . theta(x_j)
    let logits = g.matmul_nt(&queries, &keys)?;
    let attention = match mask {
        None => g.softmax_rows(&logits)?,
        Some(m) => {
            let query_mask = match cfg.mask_scope {
                MaskScope::QueriesAndKeys => Some(m),
                MaskScope::KeysOnly => None,
            };
            g.masked_softmax_rows(&logits, m, query_mask)?
        }
    };
    let values = params.psi.apply(g, &rows, mode)?;
    let aggregated = g.matmul(&attention, &values)?;
    let projected = params.latent_proj.apply(g, &aggregated)?;
    g.rows_to_pixels(&projected, h, w)
}

/// Full block: `Z = X + X_human + X_latent`, with disabled branches
/// contributing nothing. Confidence maps are built from the labels; the
/// masked latent variants take the binary human mask from the same labels.
pub fn dpb_forward<S: Scalar>(
    g: &mut Graph<S>,
    x: &Tensor<S>,
    labels: &PartLabelMap,
    cfg: &DpbConfig,
    params: &DpbParams<S>,
    mode: BnMode,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    check_map_shape(x, labels)?;
    let mut z = x.clone();
    if cfg.enable_human {
        let conf = build_confidence_maps(labels);
        let human = human_branch(g, x, &conf, labels, params, cfg, mode)?;
        z = g.add(&z, &human)?;
    }
    if cfg.enable_latent {
        let latent = match cfg.latent_mask_mode {
            LatentMaskMode::None => latent_branch(g, x, params, cfg, mode)?,
            LatentMaskMode::KeepNonHumanOnly => {
                latent_branch_masked(g, x, &labels.non_human_mask()?, params, cfg, mode)?
            }
            LatentMaskMode::KeepHumanOnly => {
                latent_branch_masked(g, x, &labels.human_mask()?, params, cfg, mode)?
            }
        };
        z = g.add(&z, &latent)?;
    }
    Ok(z)
}

/// Attention matrix of the latent branch for visualization: a plain `[N,N]`
/// value matrix computed in inference mode.
pub fn attention_matrix<S: Scalar>(
    x: &Tensor<S>,
    labels: &PartLabelMap,
    cfg: &DpbConfig,
    params: &DpbParams<S>,
) -> Result<Vec<f64>> {
    let mut g = Graph::inference();
    let rows = g.pixels_to_rows(x)?;
    let keys = params.theta.apply(&mut g, &rows, BnMode::Eval)?;
    let queries = params.phi.apply(&mut g, &rows, BnMode::Eval)?;
    let logits = g.matmul_nt(&queries, &keys)?;
    let attention = match cfg.latent_mask_mode {
        LatentMaskMode::None => g.softmax_rows(&logits)?,
        LatentMaskMode::KeepNonHumanOnly => {
            let m = labels.non_human_mask()?;
            let qm = match cfg.mask_scope {
                MaskScope::QueriesAndKeys => Some(m.as_slice()),
                MaskScope::KeysOnly => None,
            };
            g.masked_softmax_rows(&logits, &m, qm)?
        }
        LatentMaskMode::KeepHumanOnly => {
            let m = labels.human_mask()?;
            let qm = match cfg.mask_scope {
                MaskScope::QueriesAndKeys => Some(m.as_slice()),
                MaskScope::KeysOnly => None,
            };
            g.masked_softmax_rows(&logits, &m, qm)?
        }
    };
    let values = attention.data().iter().map(|&v| v.to_f64()).collect();
    Ok(values)
}

/// Scale a non-negative weight row to 8-bit gray, max mapped to 255.
pub fn gray_scale_row(row: &[f64]) -> Vec<u8> {
    let max = row.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return vec![0u8; row.len()];
    }
    row.iter()
        .map(|&v| ((v / max) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Write the block's per-part confidence maps (`part_<k>.pgm`) and selected
/// attention rows (`attn_<i>.pgm`) as 8-bit graymaps scaled to [0, 255].
pub fn export_masks<S: Scalar>(
    x: &Tensor<S>,
    labels: &PartLabelMap,
    cfg: &DpbConfig,
    params: &DpbParams<S>,
    attention_rows: &[usize],
    out_dir: &Path,
) -> Result<()> {
    let (_, h, w) = check_map_shape(x, labels)?;
    std::fs::create_dir_all(out_dir)?;
    let conf = build_confidence_maps(labels);
    for k in 0..conf.part_count() {
        let gray = gray_scale_row(conf.weights_row(k));
        pnm::write_pgm(&out_dir.join(format!("part_{k}.pgm")), w, h, &gray)?;
    }
    if cfg.enable_latent && !attention_rows.is_empty() {
        let n = h * w;
        let attention = attention_matrix(x, labels, cfg, params)?;
        for &i in attention_rows {
            if i >= n {
                return Err(CoreError::invalid(format!(
                    "export_masks: attention row {i} out of range for {n} pixels"
                )));
            }
            let gray = gray_scale_row(&attention[i * n..(i + 1) * n]);
            pnm::write_pgm(&out_dir.join(format!("attn_{i}.pgm")), w, h, &gray)?;
        }
    }
    Ok(())
}
