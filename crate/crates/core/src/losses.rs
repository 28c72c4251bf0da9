//! Classification and metric-learning losses: softmax cross-entropy over
//! identity logits and the batch-hard triplet loss over embeddings, with
//! PK batch validation and a 1:1 combination.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, TapeOp};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Options for [`combined_loss`].
#[derive(Clone, Debug)]
pub struct LossOptions {
    pub use_triplet: bool,
    pub margin: f64,
    /// L2-normalize embeddings before the triplet distance.
    pub normalize_embeddings: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            use_triplet: true,
            margin: 0.3,
            normalize_embeddings: false,
        }
    }
}

/// Scalar summary of one batch's losses.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub softmax_loss: f64,
    pub triplet_loss: f64,
    pub combined: f64,
    /// Fraction of anchors whose hinge is active (loss > 0).
    pub active_triplet_fraction: f64,
}

/// A batch of embeddings with identity labels. `new_pk` enforces the
/// P-classes-times-Q-instances structure used for batch-hard mining.
#[derive(Clone)]
pub struct EmbeddingBatch<S: Scalar> {
    pub embeddings: Tensor<S>,
    pub labels: Vec<i64>,
}

impl<S: Scalar> EmbeddingBatch<S> {
    pub fn new(embeddings: Tensor<S>, labels: Vec<i64>) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.dims()[0] != labels.len() {
            return Err(CoreError::shape(format!(
                "embedding batch: {} labels for tensor {}",
                labels.len(),
                embeddings.shape()
            )));
        }
        Ok(EmbeddingBatch { embeddings, labels })
    }

    /// Validate the PK structure: exactly `p` distinct classes, each with
    /// exactly `q` instances, and at least 2 instances per class so every
    /// anchor has a positive.
    pub fn new_pk(embeddings: Tensor<S>, labels: Vec<i64>, p: usize, q: usize) -> Result<Self> {
        let batch = Self::new(embeddings, labels)?;
        if batch.labels.len() != p * q {
            return Err(CoreError::invalid(format!(
                "pk batch: {} samples for P={p} x Q={q}",
                batch.labels.len()
            )));
        }
        if q < 2 {
            return Err(CoreError::invalid(format!(
                "pk batch: Q={q} leaves anchors without a positive"
            )));
        }
        let mut counts = std::collections::BTreeMap::new();
        for &l in &batch.labels {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        if counts.len() != p || counts.values().any(|&c| c != q) {
            return Err(CoreError::invalid(format!(
                "pk batch: expected {p} classes with {q} instances each, got {:?}",
                counts
            )));
        }
        Ok(batch)
    }
}

// ---------------------------------------------------------------------------
// softmax cross-entropy
// ---------------------------------------------------------------------------

struct SoftmaxCeOp<S: Scalar> {
    logits: Tensor<S>,
    labels: Vec<usize>,
    probs: Vec<S>,
    out: Tensor<S>,
}

impl<S: Scalar> TapeOp<S> for SoftmaxCeOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        if !self.logits.needs_grad() {
            return Ok(());
        }
        let b = self.labels.len();
        let classes = self.logits.dims()[1];
        let scale = g[0] / S::from_f64(b as f64);
        let mut dx = vec![S::zero(); b * classes];
        for (row, &label) in self.labels.iter().enumerate() {
            for j in 0..classes {
                let indicator = if j == label { S::one() } else { S::zero() };
                dx[row * classes + j] = (self.probs[row * classes + j] - indicator) * scale;
            }
        }
        self.logits.accumulate_grad(&dx);
        Ok(())
    }

    fn name(&self) -> &'static str {
        "softmax_ce"
    }
}

/// Mean over the batch of `-log softmax(logits)[label]`, computed with
/// max-subtracted log-sum-exp.
pub fn softmax_ce<S: Scalar>(
    g: &mut Graph<S>,
    logits: &Tensor<S>,
    labels: &[usize],
) -> Result<Tensor<S>> {
    if logits.rank() != 2 {
        return Err(CoreError::shape(format!(
            "softmax_ce expects [B, classes] logits, got {}",
            logits.shape()
        )));
    }
    let (b, classes) = (logits.dims()[0], logits.dims()[1]);
    if labels.len() != b {
        return Err(CoreError::shape(format!(
            "softmax_ce: {} labels for batch {}",
            labels.len(),
            b
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(CoreError::invalid(format!(
            "softmax_ce: label {bad} out of range for {classes} classes"
        )));
    }
    let mut probs = vec![S::zero(); b * classes];
    let mut total = S::zero();
    {
        let xv = logits.data();
        for (row, &label) in labels.iter().enumerate() {
            let base = row * classes;
            let mut max = xv[base];
            for j in 1..classes {
                if xv[base + j] > max {
                    max = xv[base + j];
                }
            }
            let mut sum = S::zero();
            for j in 0..classes {
                let e = (xv[base + j] - max).exp();
                probs[base + j] = e;
                sum = sum + e;
            }
            let inv = S::one() / sum;
            for j in 0..classes {
                probs[base + j] = probs[base + j] * inv;
            }
            // -log p[label] = log(sum) + max - logit[label]
            total = total + sum.ln() + max - xv[base + label];
        }
    }
    let loss = total / S::from_f64(b as f64);
    let needs = logits.needs_grad();
    let out = Tensor::scalar(loss).requires_grad(needs);
    g.record(needs, || {
        Box::new(SoftmaxCeOp {
            logits: logits.clone(),
            labels: labels.to_vec(),
            probs,
            out: out.clone(),
        })
    });
    Ok(out)
}

// ---------------------------------------------------------------------------
// batch-hard triplet
// ---------------------------------------------------------------------------

/// Distance epsilon inside the square root, for a finite gradient at zero
/// distance.
const DIST_EPS: f64 = 1e-12;

struct AnchorChoice {
    active: bool,
    hardest_positive: usize,
    hardest_negative: usize,
    pos_dist: f64,
    neg_dist: f64,
}

struct BatchHardTripletOp<S: Scalar> {
    embeddings: Tensor<S>,
    choices: Vec<AnchorChoice>,
    out: Tensor<S>,
}

impl<S: Scalar> TapeOp<S> for BatchHardTripletOp<S> {
    fn backward(&self) -> Result<()> {
        let Some(g) = self.out.grad() else {
            return Ok(());
        };
        if !self.embeddings.needs_grad() {
            return Ok(());
        }
        let b = self.choices.len();
        let d = self.embeddings.dims()[1];
        let scale = g[0].to_f64() / b as f64;
        let ev = self.embeddings.data();
        let mut dx = vec![S::zero(); b * d];
        for (a, choice) in self.choices.iter().enumerate() {
            if !choice.active {
                continue;
            }
            let (p, n) = (choice.hardest_positive, choice.hardest_negative);
            for j in 0..d {
                let ea = ev[a * d + j].to_f64();
                let ep = ev[p * d + j].to_f64();
                let en = ev[n * d + j].to_f64();
                // d(a,p) rises, d(a,n) falls
                let gp = scale * (ea - ep) / choice.pos_dist;
                let gn = scale * (ea - en) / choice.neg_dist;
                dx[a * d + j] = dx[a * d + j] + S::from_f64(gp - gn);
                dx[p * d + j] = dx[p * d + j] - S::from_f64(gp);
                dx[n * d + j] = dx[n * d + j] + S::from_f64(gn);
            }
        }
        drop(ev);
        self.embeddings.accumulate_grad(&dx);
        Ok(())
    }

    fn name(&self) -> &'static str {
        "batch_hard_triplet"
    }
}

fn euclidean<S: Scalar>(ev: &[S], a: usize, b: usize, d: usize) -> f64 {
    let mut sq = 0.0f64;
    for j in 0..d {
        let diff = ev[a * d + j].to_f64() - ev[b * d + j].to_f64();
        sq += diff * diff;
    }
    (sq + DIST_EPS).sqrt()
}

/// Batch-hard triplet loss: for each anchor, hinge on (hardest positive
/// distance - hardest negative distance + margin), averaged over anchors.
/// Ties pick the lowest index, so the choice is deterministic.
pub fn batch_hard_triplet<S: Scalar>(
    g: &mut Graph<S>,
    batch: &EmbeddingBatch<S>,
    margin: f64,
) -> Result<Tensor<S>> {
    let emb = &batch.embeddings;
    let labels = &batch.labels;
    let b = labels.len();
    let d = emb.dims()[1];
    for (i, &l) in labels.iter().enumerate() {
        let same = labels.iter().filter(|&&o| o == l).count();
        if same < 2 {
            return Err(CoreError::invalid(format!(
                "batch_hard_triplet: class {l} of anchor {i} has no other instance"
            )));
        }
        if labels.iter().any(|&o| o != l) {
            continue;
        }
        return Err(CoreError::invalid(
            "batch_hard_triplet: batch holds a single class, no negatives exist",
        ));
    }
    let ev = emb.data();
    let mut choices = Vec::with_capacity(b);
    let mut total = 0.0f64;
    let mut active = 0usize;
    for a in 0..b {
        let mut pos_dist = f64::NEG_INFINITY;
        let mut pos_idx = usize::MAX;
        let mut neg_dist = f64::INFINITY;
        let mut neg_idx = usize::MAX;
        for o in 0..b {
            if o == a {
                continue;
            }
            let dist = euclidean(&ev, a, o, d);
            if labels[o] == labels[a] {
                if dist > pos_dist {
                    pos_dist = dist;
                    pos_idx = o;
                }
            } else if dist < neg_dist {
                neg_dist = dist;
                neg_idx = o;
            }
        }
        let loss_a = (margin + pos_dist - neg_dist).max(0.0);
        if loss_a > 0.0 {
            active += 1;
        }
        total += loss_a;
        choices.push(AnchorChoice {
            active: loss_a > 0.0,
            hardest_positive: pos_idx,
            hardest_negative: neg_idx,
            pos_dist,
            neg_dist,
        });
    }
    drop(ev);
    let loss = S::from_f64(total / b as f64);
    let needs = emb.needs_grad();
    let out = Tensor::scalar(loss).requires_grad(needs);
    let _ = active;
    g.record(needs, || {
        Box::new(BatchHardTripletOp {
            embeddings: emb.clone(),
            choices,
            out: out.clone(),
        })
    });
    Ok(out)
}

/// Fraction of anchors with an active hinge, for reporting.
fn active_fraction<S: Scalar>(batch: &EmbeddingBatch<S>, margin: f64) -> f64 {
    let labels = &batch.labels;
    let b = labels.len();
    let d = batch.embeddings.dims()[1];
    let ev = batch.embeddings.data();
    let mut active = 0usize;
    for a in 0..b {
        let mut pos = f64::NEG_INFINITY;
        let mut neg = f64::INFINITY;
        for o in 0..b {
            if o == a {
                continue;
            }
            let dist = euclidean(&ev, a, o, d);
            if labels[o] == labels[a] {
                pos = pos.max(dist);
            } else {
                neg = neg.min(dist);
            }
        }
        if margin + pos - neg > 0.0 {
            active += 1;
        }
    }
    active as f64 / b as f64
}

/// The combined training loss: softmax cross-entropy plus (optionally) the
/// batch-hard triplet loss at a fixed 1:1 weighting.
pub struct CombinedLoss<S: Scalar> {
    pub loss: Tensor<S>,
    pub report: LossReport,
}

pub fn combined_loss<S: Scalar>(
    g: &mut Graph<S>,
    logits: &Tensor<S>,
    batch: &EmbeddingBatch<S>,
    class_labels: &[usize],
    opts: &LossOptions,
) -> Result<CombinedLoss<S>> {
    let ce = softmax_ce(g, logits, class_labels)?;
    if !opts.use_triplet {
        let report = LossReport {
            softmax_loss: ce.item().to_f64(),
            triplet_loss: 0.0,
            combined: ce.item().to_f64(),
            active_triplet_fraction: 0.0,
        };
        return Ok(CombinedLoss { loss: ce, report });
    }
    let triplet_batch = if opts.normalize_embeddings {
        let normalized = g.l2_normalize_rows(&batch.embeddings)?;
        EmbeddingBatch::new(normalized, batch.labels.clone())?
    } else {
        batch.clone()
    };
    let triplet = batch_hard_triplet(g, &triplet_batch, opts.margin)?;
    let combined = g.add(&ce, &triplet)?;
    let report = LossReport {
        softmax_loss: ce.item().to_f64(),
        triplet_loss: triplet.item().to_f64(),
        combined: combined.item().to_f64(),
        active_triplet_fraction: active_fraction(&triplet_batch, opts.margin),
    };
    Ok(CombinedLoss {
        loss: combined,
        report,
    })
}
