//! Loss contract tests: frozen values, exhaustive mining oracles, and
//! gradient checks.

use dpb_core::gradcheck::grad_check;
use dpb_core::graph::Graph;
use dpb_core::losses::{batch_hard_triplet, combined_loss, softmax_ce, EmbeddingBatch, LossOptions};
use dpb_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::from_vec(data, dims).unwrap()
}

// ---------------------------------------------------------------------------
// softmax cross-entropy
// ---------------------------------------------------------------------------

#[test]
fn uniform_logits_cost_ln_classes() {
    let logits = Tensor::<f64>::zeros(&[3, 4]).unwrap();
    let mut g = Graph::inference();
    let loss = softmax_ce(&mut g, &logits, &[0, 1, 3]).unwrap();
    assert!((loss.item() - 4.0f64.ln()).abs() < 1e-12);
}

#[test]
fn confident_correct_logit_costs_nothing() {
    let logits = Tensor::from_vec(vec![500.0, 0.0, 0.0, 0.0], &[1, 4]).unwrap();
    let mut g = Graph::inference();
    let loss = softmax_ce(&mut g, &logits, &[0]).unwrap();
    assert!(loss.item() < 1e-12);
}

#[test]
fn softmax_ce_matches_log_sum_exp_oracle() {
    let mut r = rng(1);
    let logits = random_tensor(&mut r, &[3, 5]);
    let labels = [4usize, 0, 2];
    let mut g = Graph::inference();
    let loss = softmax_ce(&mut g, &logits, &labels).unwrap();

    let lv = logits.to_vec();
    let mut expected = 0.0f64;
    for (row, &label) in labels.iter().enumerate() {
        let vals = &lv[row * 5..(row + 1) * 5];
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        expected += lse - vals[label];
    }
    expected /= 3.0;
    assert!((loss.item() - expected).abs() < 1e-12);
}

#[test]
fn out_of_range_label_is_rejected() {
    let logits = Tensor::<f64>::zeros(&[2, 3]).unwrap();
    let mut g = Graph::inference();
    assert!(softmax_ce(&mut g, &logits, &[0, 3]).is_err());
}

#[test]
fn softmax_ce_gradient_check() {
    let mut r = rng(2);
    let logits = random_tensor(&mut r, &[4, 6]).requires_grad(true);
    let labels = [1usize, 5, 0, 3];
    let report = grad_check(
        &[logits.clone()],
        |g| softmax_ce(g, &logits, &labels),
        1e-3,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-5, "{}", report.max_relative_error);
}

// ---------------------------------------------------------------------------
// batch-hard triplet
// ---------------------------------------------------------------------------

/// Exhaustive per-anchor hardest scan, written from the definition.
fn triplet_oracle(emb: &[Vec<f64>], labels: &[i64], margin: f64) -> f64 {
    let b = labels.len();
    let dist = |a: usize, o: usize| -> f64 {
        let sq: f64 = emb[a]
            .iter()
            .zip(&emb[o])
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        (sq + 1e-12).sqrt()
    };
    let mut total = 0.0;
    for a in 0..b {
        let mut hardest_pos = f64::NEG_INFINITY;
        let mut hardest_neg = f64::INFINITY;
        for o in 0..b {
            if o == a {
                continue;
            }
            if labels[o] == labels[a] {
                hardest_pos = hardest_pos.max(dist(a, o));
            } else {
                hardest_neg = hardest_neg.min(dist(a, o));
            }
        }
        total += (margin + hardest_pos - hardest_neg).max(0.0);
    }
    total / b as f64
}

fn batch(emb: &[Vec<f64>], labels: &[i64]) -> EmbeddingBatch<f64> {
    let d = emb[0].len();
    let flat: Vec<f64> = emb.iter().flatten().copied().collect();
    let t = Tensor::from_vec(flat, &[emb.len(), d]).unwrap();
    EmbeddingBatch::new(t, labels.to_vec()).unwrap()
}

#[test]
fn identical_embeddings_cost_exactly_the_margin() {
    let emb = vec![vec![0.3, -1.0]; 6];
    let labels = vec![0, 0, 1, 1, 2, 2];
    let mut g = Graph::inference();
    let loss = batch_hard_triplet(&mut g, &batch(&emb, &labels), 0.3).unwrap();
    assert_eq!(loss.item(), 0.3);
}

#[test]
fn well_separated_classes_cost_nothing() {
    let mut emb = Vec::new();
    let mut labels = Vec::new();
    for class in 0..3i64 {
        for i in 0..2 {
            emb.push(vec![class as f64 * 100.0 + i as f64 * 0.01, 0.0]);
            labels.push(class);
        }
    }
    let mut g = Graph::inference();
    let loss = batch_hard_triplet(&mut g, &batch(&emb, &labels), 0.3).unwrap();
    assert_eq!(loss.item(), 0.0);
}

#[test]
fn triplet_matches_exhaustive_oracle() {
    let mut r = rng(3);
    let emb: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..4).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let labels = vec![0i64, 0, 0, 1, 1, 1];
    let mut g = Graph::inference();
    let loss = batch_hard_triplet(&mut g, &batch(&emb, &labels), 0.3).unwrap();
    assert_eq!(loss.item(), triplet_oracle(&emb, &labels, 0.3));
}

#[test]
fn triplet_matches_oracle_up_to_batch_64() {
    let mut r = rng(4);
    for trial in 0..30 {
        let classes = r.gen_range(2..9);
        let per_class = r.gen_range(2..9);
        let b = (classes * per_class).min(64);
        let classes = b / per_class;
        let d = r.gen_range(1..9);
        let mut emb = Vec::new();
        let mut labels = Vec::new();
        for class in 0..classes {
            for _ in 0..per_class {
                emb.push((0..d).map(|_| r.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
                labels.push(class as i64);
            }
        }
        let margin = r.gen_range(0.05..0.6);
        let mut g = Graph::inference();
        let loss = batch_hard_triplet(&mut g, &batch(&emb, &labels), margin).unwrap();
        assert_eq!(
            loss.item(),
            triplet_oracle(&emb, &labels, margin),
            "trial {trial}"
        );
    }
}

#[test]
fn triplet_is_translation_invariant() {
    let mut r = rng(5);
    let emb: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..5).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect();
    let labels = vec![0i64, 0, 1, 1, 2, 2, 3, 3];
    let shift: Vec<f64> = (0..5).map(|_| r.gen_range(-10.0..10.0)).collect();
    let shifted: Vec<Vec<f64>> = emb
        .iter()
        .map(|row| row.iter().zip(&shift).map(|(v, s)| v + s).collect())
        .collect();
    let mut g = Graph::inference();
    let a = batch_hard_triplet(&mut g, &batch(&emb, &labels), 0.3).unwrap();
    let b = batch_hard_triplet(&mut g, &batch(&shifted, &labels), 0.3).unwrap();
    assert!((a.item() - b.item()).abs() < 1e-6);
}

#[test]
fn single_instance_class_is_rejected() {
    let emb = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]];
    let labels = vec![0i64, 0, 1];
    let mut g = Graph::inference();
    let err = batch_hard_triplet(&mut g, &batch(&emb, &labels), 0.3).unwrap_err();
    assert!(err.to_string().contains("no other instance"), "{err}");
}

#[test]
fn single_class_batch_is_rejected() {
    let emb = vec![vec![0.0], vec![1.0]];
    let labels = vec![3i64, 3];
    let mut g = Graph::inference();
    assert!(batch_hard_triplet(&mut g, &batch(&emb, &labels), 0.3).is_err());
}

#[test]
fn triplet_gradient_check() {
    let mut r = rng(6);
    let emb = random_tensor(&mut r, &[8, 4]).requires_grad(true);
    let labels = vec![0i64, 0, 1, 1, 2, 2, 3, 3];
    let b = EmbeddingBatch::new(emb.clone(), labels).unwrap();
    let report = grad_check(
        &[emb.clone()],
        |g| batch_hard_triplet(g, &b, 0.3),
        1e-4,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-5, "{}", report.max_relative_error);
}

// ---------------------------------------------------------------------------
// combined
// ---------------------------------------------------------------------------

#[test]
fn triplet_disabled_reduces_to_cross_entropy() {
    let mut r = rng(7);
    let logits = random_tensor(&mut r, &[4, 4]);
    let emb = random_tensor(&mut r, &[4, 8]);
    let labels = [0usize, 1, 2, 3];
    let b = EmbeddingBatch::new(emb, vec![0, 1, 2, 3]).unwrap();
    let opts = LossOptions {
        use_triplet: false,
        ..LossOptions::default()
    };
    let mut g = Graph::inference();
    let combined = combined_loss(&mut g, &logits, &b, &labels, &opts).unwrap();
    let ce = softmax_ce(&mut g, &logits, &labels).unwrap();
    assert_eq!(combined.loss.item(), ce.item());
    assert_eq!(combined.report.triplet_loss, 0.0);
}

#[test]
fn combined_example_ln4_plus_margin() {
    // identical embeddings, uniform logits over 4 identities, margin 0.3
    let logits = Tensor::<f64>::zeros(&[8, 4]).unwrap();
    let emb = Tensor::<f64>::filled(&[8, 16], 0.5).unwrap();
    let ids = vec![0i64, 0, 1, 1, 2, 2, 3, 3];
    let class_labels: Vec<usize> = ids.iter().map(|&l| l as usize).collect();
    let b = EmbeddingBatch::new(emb, ids).unwrap();
    let mut g = Graph::inference();
    let combined = combined_loss(&mut g, &logits, &b, &class_labels, &LossOptions::default()).unwrap();
    let expected = 4.0f64.ln() + 0.3;
    assert!((combined.loss.item() - expected).abs() < 1e-12);
    assert_eq!(combined.report.active_triplet_fraction, 1.0);
    assert!(
        (combined.report.combined - combined.report.softmax_loss - combined.report.triplet_loss)
            .abs()
            < 1e-12
    );
}

#[test]
fn pk_batch_structure_is_enforced() {
    let emb64 = Tensor::<f64>::zeros(&[64, 4]).unwrap();
    let labels: Vec<i64> = (0..64).map(|i| (i / 4) as i64).collect();
    assert!(EmbeddingBatch::new_pk(emb64, labels, 16, 4).is_ok());

    let emb16 = Tensor::<f64>::zeros(&[16, 4]).unwrap();
    let labels: Vec<i64> = (0..16).map(|i| i as i64).collect();
    assert!(EmbeddingBatch::new_pk(emb16, labels, 16, 1).is_err());
}

#[test]
fn combined_gradient_check() {
    let mut r = rng(8);
    let emb = random_tensor(&mut r, &[6, 4]).requires_grad(true);
    let ids = vec![0i64, 0, 1, 1, 2, 2];
    let class_labels = [0usize, 0, 1, 1, 2, 2];
    let wcls = random_tensor(&mut r, &[3, 4]).requires_grad(true);
    let bcls = random_tensor(&mut r, &[3]).requires_grad(true);
    let report = grad_check(
        &[emb.clone(), wcls.clone(), bcls.clone()],
        |g| {
            let logits = g.linear(&emb, &wcls, &bcls)?;
            let b = EmbeddingBatch::new(emb.clone(), ids.clone())?;
            let out = combined_loss(g, &logits, &b, &class_labels, &LossOptions::default())?;
            Ok(out.loss)
        },
        1e-4,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-5, "{}", report.max_relative_error);
}

#[test]
fn normalized_embedding_option_gradient_check() {
    let mut r = rng(9);
    let emb = random_tensor(&mut r, &[6, 4]).requires_grad(true);
    let ids = vec![0i64, 0, 1, 1, 2, 2];
    let class_labels = [0usize, 0, 1, 1, 2, 2];
    let logits = random_tensor(&mut r, &[6, 3]);
    let opts = LossOptions {
        normalize_embeddings: true,
        ..LossOptions::default()
    };
    let report = grad_check(
        &[emb.clone()],
        |g| {
            let b = EmbeddingBatch::new(emb.clone(), ids.clone())?;
            let out = combined_loss(g, &logits, &b, &class_labels, &opts)?;
            Ok(out.loss)
        },
        1e-4,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-5, "{}", report.max_relative_error);
}
