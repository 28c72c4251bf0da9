//! The full gradient-verification suite: every tensor op, both block
//! branches, the masked variant, and both losses, checked against central
//! finite differences at 64-bit.
//!
//! Composite checks keep the objective O(1) and use a smaller step where
//! the function is strongly curved (softmax over normalized features); the
//! tolerance is on the gradient mismatch, not on the step size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpb_core::dpb::{dpb_forward, DpbConfig, DpbParams, LatentMaskMode};
use dpb_core::error::Result;
use dpb_core::gradcheck::grad_check;
use dpb_core::losses::{batch_hard_triplet, combined_loss, softmax_ce, EmbeddingBatch, LossOptions};
use dpb_core::masks::PartLabelMap;
use dpb_core::ops::{BatchNorm, BnMode};
use dpb_core::{Graph, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: &'static str,
    pub max_error: f64,
    pub threshold: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_error < self.threshold
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], grad: bool) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::from_vec(data, dims).unwrap().requires_grad(grad)
}

fn entry<F>(
    name: &'static str,
    threshold: f64,
    eps: f64,
    params: &[Tensor<f64>],
    forward: F,
) -> Result<GradCheckEntry>
where
    F: FnMut(&mut Graph<f64>) -> Result<Tensor<f64>>,
{
    let report = grad_check(params, forward, eps)?;
    Ok(GradCheckEntry {
        name,
        max_error: report.max_relative_error,
        threshold,
    })
}

const ELEMENTARY: f64 = 1e-6;
const BLOCK: f64 = 1e-4;
const LOSS: f64 = 1e-5;

/// Run the whole suite. Elementary ops must come in under 1e-6, the block
/// branches under 1e-4, the losses under 1e-5.
pub fn run_gradient_suite() -> Result<Vec<GradCheckEntry>> {
    let mut out = Vec::new();
    let mut r = rng(0x5eed);

    // conv2d
    {
        let x = rand_tensor(&mut r, &[2, 5, 4], true);
        let w = rand_tensor(&mut r, &[3, 2, 3, 3], true);
        let w1 = rand_tensor(&mut r, &[2, 3, 1, 1], true);
        out.push(entry("conv2d", ELEMENTARY, 1e-3, &[x.clone(), w.clone(), w1.clone()], |g| {
            let y = g.conv2d(&x, &w, 2, 1)?;
            let y = g.conv2d(&y, &w1, 1, 0)?;
            let s = g.sum_all(&y)?;
            g.scale(&s, 0.1)
        })?);
    }
    // pointwise_linear
    {
        let x = rand_tensor(&mut r, &[3, 2, 4], true);
        let w = rand_tensor(&mut r, &[2, 3], true);
        let b = rand_tensor(&mut r, &[2], true);
        let mask = rand_tensor(&mut r, &[2, 2, 4], false);
        out.push(entry("pointwise_linear", ELEMENTARY, 1e-3, &[x.clone(), w.clone(), b.clone()], |g| {
            let y = g.pointwise_linear(&x, &w, &b)?;
            let y = g.mul(&y, &mask)?;
            g.sum_all(&y)
        })?);
    }
    // linear
    {
        let x = rand_tensor(&mut r, &[5, 3], true);
        let w = rand_tensor(&mut r, &[4, 3], true);
        let b = rand_tensor(&mut r, &[4], true);
        let mask = rand_tensor(&mut r, &[5, 4], false);
        out.push(entry("linear", ELEMENTARY, 1e-3, &[x.clone(), w.clone(), b.clone()], |g| {
            let y = g.linear(&x, &w, &b)?;
            let y = g.mul(&y, &mask)?;
            g.sum_all(&y)
        })?);
    }
    // batch_norm, train and eval
    for (name, mode) in [
        ("batch_norm_train", BnMode::Train),
        ("batch_norm_eval", BnMode::Eval),
    ] {
        let x = rand_tensor(&mut r, &[3, 2, 2, 2], true);
        let bn = BatchNorm::new(2)?;
        bn.running_mean.set_data(vec![0.2, -0.4])?;
        bn.running_var.set_data(vec![1.3, 0.6])?;
        let mask = rand_tensor(&mut r, &[3, 2, 2, 2], false);
        out.push(entry(
            name,
            ELEMENTARY,
            1e-3,
            &[x.clone(), bn.gamma.clone(), bn.beta.clone()],
            |g| {
                let y = g.batch_norm(&x, &bn, mode)?;
                let y = g.mul(&y, &mask)?;
                g.sum_all(&y)
            },
        )?);
    }
    // elementwise family
    {
        let a = rand_tensor(&mut r, &[3, 4], true);
        let b = rand_tensor(&mut r, &[3, 4], true);
        out.push(entry("elementwise", ELEMENTARY, 1e-3, &[a.clone(), b.clone()], |g| {
            let s = g.add(&a, &b)?;
            let m = g.mul(&s, &a)?;
            let activated = g.relu(&m)?;
            let scaled = g.scale(&activated, 0.7)?;
            g.sum_all(&scaled)
        })?);
    }
    // softmax_rows
    {
        let x = rand_tensor(&mut r, &[4, 5], true);
        let mask = rand_tensor(&mut r, &[4, 5], false);
        out.push(entry("softmax_rows", ELEMENTARY, 1e-3, &[x.clone()], |g| {
            let y = g.softmax_rows(&x)?;
            let y = g.mul(&y, &mask)?;
            g.sum_all(&y)
        })?);
    }
    // masked softmax
    {
        let x = rand_tensor(&mut r, &[4, 4], true);
        let weights = rand_tensor(&mut r, &[4, 4], false);
        let key_mask = vec![true, false, true, true];
        let query_mask = vec![true, true, false, true];
        out.push(entry("masked_softmax_rows", ELEMENTARY, 1e-3, &[x.clone()], move |g| {
            let y = g.masked_softmax_rows(&x, &key_mask, Some(&query_mask))?;
            let y = g.mul(&y, &weights)?;
            g.sum_all(&y)
        })?);
    }
    // global_avg_pool and sum_all
    {
        let x = rand_tensor(&mut r, &[2, 3, 2, 2], true);
        out.push(entry("global_avg_pool", ELEMENTARY, 1e-3, &[x.clone()], |g| {
            let y = g.global_avg_pool(&x)?;
            let sq = g.mul(&y, &y)?;
            g.sum_all(&sq)
        })?);
    }
    // matmul / matmul_nt
    {
        let a = rand_tensor(&mut r, &[3, 4], true);
        let b = rand_tensor(&mut r, &[4, 2], true);
        out.push(entry("matmul", ELEMENTARY, 1e-3, &[a.clone(), b.clone()], |g| {
            let y = g.matmul(&a, &b)?;
            let sq = g.mul(&y, &y)?;
            g.sum_all(&sq)
        })?);
        let c = rand_tensor(&mut r, &[2, 4], true);
        out.push(entry("matmul_nt", ELEMENTARY, 1e-3, &[a.clone(), c.clone()], |g| {
            let y = g.matmul_nt(&a, &c)?;
            let sq = g.mul(&y, &y)?;
            g.sum_all(&sq)
        })?);
    }
    // layout and indexing ops
    {
        let x = rand_tensor(&mut r, &[3, 2, 2, 2], true);
        let rows = rand_tensor(&mut r, &[3, 2], true);
        let labels = vec![0usize, 2, 1, 2];
        let factors = vec![0.5, -1.0, 2.0, 0.0];
        out.push(entry(
            "layout_indexing",
            ELEMENTARY,
            1e-3,
            &[x.clone(), rows.clone()],
            move |g| {
                let parts: Vec<_> = (0..3)
                    .map(|i| g.batch_index(&x, i))
                    .collect::<Result<_>>()?;
                let stacked = g.batch_stack(&parts)?;
                let one = g.batch_index(&stacked, 1)?;
                let pixel_rows = g.pixels_to_rows(&one)?;
                let back = g.rows_to_pixels(&pixel_rows, 2, 2)?;
                let a = g.sum_all(&back)?;
                let scattered = g.scatter_rows(&rows, &labels)?;
                let scaled = g.scale_rows(&scattered, &factors)?;
                let sq = g.mul(&scaled, &scaled)?;
                let b = g.sum_all(&sq)?;
                g.add(&a, &b)
            },
        )?);
    }
    // l2 normalize (steep third derivative: smaller step)
    {
        let x = rand_tensor(&mut r, &[4, 3], true);
        let mask = rand_tensor(&mut r, &[4, 3], false);
        out.push(entry("l2_normalize_rows", ELEMENTARY, 1e-4, &[x.clone()], |g| {
            let y = g.l2_normalize_rows(&x)?;
            let y = g.mul(&y, &mask)?;
            g.sum_all(&y)
        })?);
    }

    // block branches on a 4x4 map, C = 6
    let (x_map, labels, weight) = {
        let c = 6;
        let label_vals: Vec<u8> = (0..16).map(|i| ((i / 2) % 3) as u8).collect();
        let base = rand_tensor(&mut r, &[c, 4, 4], false);
        let mut data = base.to_vec();
        // separate the part means so g's normalization stays away from the
        // zero-variance pole
        for ch in 0..c {
            for (p, &l) in label_vals.iter().enumerate() {
                data[ch * 16 + p] += (l as f64 + 1.0) * ((ch + l as usize) % 3) as f64;
            }
        }
        let x = Tensor::from_vec(data, &[c, 4, 4])?.requires_grad(true);
        let labels = PartLabelMap::new(4, 4, 3, label_vals).unwrap();
        let weight = rand_tensor(&mut r, &[c, 4, 4], false);
        (x, labels, weight)
    };
    let make_params = |cfg: &DpbConfig, r: &mut ChaCha8Rng| -> Result<DpbParams<f64>> {
        let params = DpbParams::init(cfg, r)?;
        for proj in [&params.human_proj, &params.latent_proj] {
            let n = proj.weight.numel();
            proj.weight
                .set_data((0..n).map(|_| r.gen_range(-0.5..0.5)).collect())?;
            let n = proj.bias.numel();
            proj.bias
                .set_data((0..n).map(|_| r.gen_range(-0.1..0.1)).collect())?;
        }
        Ok(params)
    };
    let block_cases: [(&'static str, bool, bool, LatentMaskMode); 4] = [
        ("human_branch", true, false, LatentMaskMode::None),
        ("latent_branch", false, true, LatentMaskMode::None),
        ("latent_branch_masked", false, true, LatentMaskMode::KeepNonHumanOnly),
        ("dpb_full", true, true, LatentMaskMode::None),
    ];
    for (name, human, latent, mask_mode) in block_cases {
        let mut cfg = DpbConfig::new(6, 3)?;
        cfg.enable_human = human;
        cfg.enable_latent = latent;
        cfg.latent_mask_mode = mask_mode;
        // the masked variant needs a background/foreground map
        let labels_for = if mask_mode == LatentMaskMode::None {
            labels.clone()
        } else {
            let two: Vec<u8> = labels.labels().iter().map(|&l| u8::from(l > 0)).collect();
            PartLabelMap::new(4, 4, 2, two).unwrap()
        };
        let cfg = DpbConfig {
            part_count: labels_for.part_count(),
            ..cfg
        };
        let params = make_params(&cfg, &mut r)?;
        let mut check_params = vec![x_map.clone()];
        check_params.extend(params.trainable());
        let weight = weight.clone();
        let x = x_map.clone();
        out.push(entry(name, BLOCK, 1e-4, &check_params, move |g| {
            let z = dpb_forward(g, &x, &labels_for, &cfg, &params, BnMode::Train)?;
            let weighted = g.mul(&z, &weight)?;
            let total = g.sum_all(&weighted)?;
            g.scale(&total, 1.0 / 96.0)
        })?);
    }

    // losses
    {
        let logits = rand_tensor(&mut r, &[6, 4], true);
        let class_labels = [0usize, 1, 2, 3, 0, 1];
        out.push(entry("softmax_ce", LOSS, 1e-3, &[logits.clone()], move |g| {
            softmax_ce(g, &logits, &class_labels)
        })?);
    }
    {
        let emb = rand_tensor(&mut r, &[8, 5], true);
        let batch = EmbeddingBatch::new(emb.clone(), vec![0, 0, 1, 1, 2, 2, 3, 3])?;
        out.push(entry("batch_hard_triplet", LOSS, 1e-4, &[emb.clone()], move |g| {
            batch_hard_triplet(g, &batch, 0.3)
        })?);
    }
    {
        let emb = rand_tensor(&mut r, &[6, 4], true);
        let wcls = rand_tensor(&mut r, &[3, 4], true);
        let bcls = rand_tensor(&mut r, &[3], true);
        let ids = vec![0i64, 0, 1, 1, 2, 2];
        let class_labels = [0usize, 0, 1, 1, 2, 2];
        out.push(entry(
            "combined_loss",
            LOSS,
            1e-4,
            &[emb.clone(), wcls.clone(), bcls.clone()],
            move |g| {
                let logits = g.linear(&emb, &wcls, &bcls)?;
                let batch = EmbeddingBatch::new(emb.clone(), ids.clone())?;
                let combined = combined_loss(g, &logits, &batch, &class_labels, &LossOptions::default())?;
                Ok(combined.loss)
            },
        )?);
    }

    Ok(out)
}
