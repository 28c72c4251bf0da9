//! Operation-level contract tests: frozen examples, loop oracles written
//! independently of the kernels, and gradient checks for every op.

use dpb_core::gradcheck::{grad_check, DEFAULT_EPS};
use dpb_core::graph::Graph;
use dpb_core::ops::{BatchNorm, BnMode};
use dpb_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::from_vec(data, dims).unwrap()
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

#[test]
fn conv2d_scalar_multiply() {
    let mut g = Graph::<f64>::inference();
    let x = Tensor::from_vec(vec![2.0], &[1, 1, 1]).unwrap();
    let w = Tensor::from_vec(vec![3.0], &[1, 1, 1, 1]).unwrap();
    let y = g.conv2d(&x, &w, 1, 0).unwrap();
    assert_eq!(y.to_vec(), vec![6.0]);
}

#[test]
fn conv2d_identity_kernel_is_bit_exact() {
    let mut r = rng(11);
    let x = random_tensor(&mut r, &[3, 4, 5]);
    let mut w_data = vec![0.0; 3 * 3];
    for c in 0..3 {
        w_data[c * 3 + c] = 1.0;
    }
    let w = Tensor::from_vec(w_data, &[3, 3, 1, 1]).unwrap();
    let mut g = Graph::inference();
    let y = g.conv2d(&x, &w, 1, 0).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
    assert_eq!(y.dims(), x.dims());
}

#[test]
fn conv2d_all_ones_3x3_sums_to_nine() {
    let mut g = Graph::<f64>::inference();
    let x = Tensor::filled(&[1, 3, 3], 1.0).unwrap();
    let w = Tensor::filled(&[1, 1, 3, 3], 1.0).unwrap();
    let y = g.conv2d(&x, &w, 1, 0).unwrap();
    assert_eq!(y.dims(), &[1, 1, 1]);
    assert_eq!(y.item(), 9.0);
}

/// Oracle: materialize the zero-padded input, then take plain dot products.
fn conv_oracle(
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    wt: &[f64],
    (c_out, k): (usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0; c_in * ph * pw];
    for c in 0..c_in {
        for y in 0..h {
            for xx in 0..w {
                padded[(c * ph + y + pad) * pw + xx + pad] = x[(c * h + y) * w + xx];
            }
        }
    }
    let oh = (ph - k) / stride + 1;
    let ow = (pw - k) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += padded[(ci * ph + oy * stride + ky) * pw + ox * stride + kx]
                                * wt[((co * c_in + ci) * k + ky) * k + kx];
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_padded_oracle() {
    let mut r = rng(21);
    for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1), (2, 0)] {
        let x = random_tensor(&mut r, &[3, 6, 5]);
        let w = random_tensor(&mut r, &[4, 3, 3, 3]);
        let mut g = Graph::inference();
        let y = g.conv2d(&x, &w, stride, pad).unwrap();
        let expected = conv_oracle(&x.to_vec(), (3, 6, 5), &w.to_vec(), (4, 3), stride, pad);
        let got = y.to_vec();
        assert_eq!(got.len(), expected.len());
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut g = Graph::<f64>::inference();
    let x = Tensor::zeros(&[2, 4, 4]).unwrap();
    let w = Tensor::zeros(&[1, 3, 3, 3]).unwrap();
    let err = g.conv2d(&x, &w, 1, 1).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");
}

#[test]
fn conv2d_rejects_unsupported_kernel_and_stride() {
    let mut g = Graph::<f64>::inference();
    let x = Tensor::zeros(&[1, 8, 8]).unwrap();
    assert!(g
        .conv2d(&x, &Tensor::zeros(&[1, 1, 5, 5]).unwrap(), 1, 2)
        .is_err());
    assert!(g
        .conv2d(&x, &Tensor::zeros(&[1, 1, 3, 3]).unwrap(), 3, 1)
        .is_err());
}

#[test]
fn conv2d_gradients() {
    let mut r = rng(31);
    let x = random_tensor(&mut r, &[2, 5, 4]).requires_grad(true);
    let w = random_tensor(&mut r, &[3, 2, 3, 3]).requires_grad(true);
    let report = grad_check(
        &[x.clone(), w.clone()],
        |g| {
            let y = g.conv2d(&x, &w, 2, 1)?;
            g.sum_all(&y)
        },
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{}", report.max_relative_error);
}

// ---------------------------------------------------------------------------
// pointwise_linear and linear
// ---------------------------------------------------------------------------

#[test]
fn pointwise_linear_identity_weight_is_identity() {
    let mut r = rng(41);
    let x = random_tensor(&mut r, &[3, 2, 4]);
    let mut w_data = vec![0.0; 9];
    for c in 0..3 {
        w_data[c * 3 + c] = 1.0;
    }
    let w = Tensor::from_vec(w_data, &[3, 3]).unwrap();
    let b = Tensor::zeros(&[3]).unwrap();
    let mut g = Graph::inference();
    let y = g.pointwise_linear(&x, &w, &b).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn pointwise_linear_zero_weight_yields_bias() {
    let x = Tensor::<f64>::filled(&[2, 2, 2], 7.0).unwrap();
    let w = Tensor::zeros(&[3, 2]).unwrap();
    let b = Tensor::from_vec(vec![0.5, -1.0, 2.0], &[3]).unwrap();
    let mut g = Graph::inference();
    let y = g.pointwise_linear(&x, &w, &b).unwrap();
    assert_eq!(y.dims(), &[3, 2, 2]);
    let yv = y.to_vec();
    for p in 0..4 {
        assert_eq!(yv[p], 0.5);
        assert_eq!(yv[4 + p], -1.0);
        assert_eq!(yv[8 + p], 2.0);
    }
}

#[test]
fn pointwise_linear_matches_matvec_oracle() {
    let mut r = rng(51);
    let x = random_tensor(&mut r, &[3, 2, 3]);
    let w = random_tensor(&mut r, &[2, 3]);
    let b = random_tensor(&mut r, &[2]);
    let mut g = Graph::inference();
    let y = g.pointwise_linear(&x, &w, &b).unwrap();
    let (xv, wv, bv, yv) = (x.to_vec(), w.to_vec(), b.to_vec(), y.to_vec());
    for p in 0..6 {
        for o in 0..2 {
            let mut acc = bv[o];
            for i in 0..3 {
                acc += wv[o * 3 + i] * xv[i * 6 + p];
            }
            assert!((yv[o * 6 + p] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn pointwise_linear_rejects_channel_mismatch() {
    let mut g = Graph::<f64>::inference();
    let x = Tensor::zeros(&[3, 2, 2]).unwrap();
    let w = Tensor::zeros(&[2, 4]).unwrap();
    let b = Tensor::zeros(&[2]).unwrap();
    assert!(g.pointwise_linear(&x, &w, &b).is_err());
}

#[test]
fn pointwise_and_row_linear_gradients() {
    let mut r = rng(61);
    let x = random_tensor(&mut r, &[2, 2, 3]).requires_grad(true);
    let w = random_tensor(&mut r, &[4, 2]).requires_grad(true);
    let b = random_tensor(&mut r, &[4]).requires_grad(true);
    let report = grad_check(
        &[x.clone(), w.clone(), b.clone()],
        |g| {
            let y = g.pointwise_linear(&x, &w, &b)?;
            let y = g.relu(&y)?;
            g.sum_all(&y)
        },
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{}", report.max_relative_error);

    let rows = random_tensor(&mut r, &[5, 3]).requires_grad(true);
    let w2 = random_tensor(&mut r, &[2, 3]).requires_grad(true);
    let b2 = random_tensor(&mut r, &[2]).requires_grad(true);
    let report = grad_check(
        &[rows.clone(), w2.clone(), b2.clone()],
        |g| {
            let y = g.linear(&rows, &w2, &b2)?;
            let sq = g.mul(&y, &y)?;
            g.sum_all(&sq)
        },
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{}", report.max_relative_error);
}

// ---------------------------------------------------------------------------
// batch_norm
// ---------------------------------------------------------------------------

#[test]
fn batch_norm_passes_through_standardized_input() {
    // channel values are +/-1 pairs: mean 0, biased variance exactly 1
    let x =
        Tensor::<f64>::from_vec(vec![1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0], &[4, 2]).unwrap();
    let bn = BatchNorm::<f64>::new(2).unwrap();
    let mut g = Graph::inference();
    let y = g.batch_norm(&x, &bn, BnMode::Train).unwrap();
    for (a, b) in y.to_vec().iter().zip(x.to_vec()) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn batch_norm_constant_channel_collapses_to_beta() {
    let x = Tensor::<f64>::filled(&[3, 1], 42.0).unwrap();
    let bn = BatchNorm::new(1).unwrap();
    bn.beta.set_data(vec![0.25]).unwrap();
    let mut g = Graph::inference();
    let y = g.batch_norm(&x, &bn, BnMode::Train).unwrap();
    for v in y.to_vec() {
        assert!((v - 0.25).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_standardizes_random_input() {
    let mut r = rng(71);
    let x = random_tensor(&mut r, &[2, 4, 2, 2]);
    let bn = BatchNorm::new(4).unwrap();
    let mut g = Graph::inference();
    let y = g.batch_norm(&x, &bn, BnMode::Train).unwrap();
    let yv = y.to_vec();
    // direct statistics oracle over each channel's 8 values
    for c in 0..4 {
        let mut vals = Vec::new();
        for b in 0..2 {
            for p in 0..4 {
                vals.push(yv[(b * 4 + c) * 4 + p]);
            }
        }
        let mean: f64 = vals.iter().sum::<f64>() / 8.0;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-4, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
    }
}

#[test]
fn batch_norm_train_mode_needs_two_values_per_channel() {
    let x = Tensor::<f64>::zeros(&[1, 3, 1, 1]).unwrap();
    let bn = BatchNorm::new(3).unwrap();
    let mut g = Graph::inference();
    assert!(g.batch_norm(&x, &bn, BnMode::Train).is_err());
    assert!(g.batch_norm(&x, &bn, BnMode::Eval).is_ok());
}

#[test]
fn batch_norm_updates_running_stats() {
    let x = Tensor::<f64>::from_vec(vec![2.0, 4.0], &[2, 1]).unwrap();
    let bn = BatchNorm::<f64>::new(1).unwrap();
    let mut g = Graph::inference();
    g.batch_norm(&x, &bn, BnMode::Train).unwrap();
    // momentum 0.1: mean 0.9*0 + 0.1*3 = 0.3; var 0.9*1 + 0.1*(unbiased 2) = 1.1
    assert!((bn.running_mean.item() - 0.3).abs() < 1e-12);
    assert!((bn.running_var.item() - 1.1).abs() < 1e-12);
}

#[test]
fn batch_norm_gradients_train_and_eval() {
    let mut r = rng(81);
    for mode in [BnMode::Train, BnMode::Eval] {
        let x = random_tensor(&mut r, &[3, 2, 2, 2]).requires_grad(true);
        let bn = BatchNorm::new(2).unwrap();
        bn.running_mean.set_data(vec![0.3, -0.2]).unwrap();
        bn.running_var.set_data(vec![1.4, 0.7]).unwrap();
        let weight = random_tensor(&mut r, &[3, 2, 2, 2]);
        let params = [x.clone(), bn.gamma.clone(), bn.beta.clone()];
        let report = grad_check(
            &params,
            |g| {
                let y = g.batch_norm(&x, &bn, mode)?;
                let y = g.mul(&y, &weight)?;
                g.sum_all(&y)
            },
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(
            report.max_relative_error < 1e-6,
            "{mode:?}: {}",
            report.max_relative_error
        );
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

#[test]
fn add_zero_is_identity() {
    let mut r = rng(91);
    let x = random_tensor(&mut r, &[2, 3]);
    let z = Tensor::zeros(&[2, 3]).unwrap();
    let mut g = Graph::inference();
    let y = g.add(&x, &z).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());
}

#[test]
fn relu_clamps_negatives() {
    let x = Tensor::from_vec(vec![-1.0, 2.0], &[2]).unwrap();
    let mut g = Graph::inference();
    assert_eq!(g.relu(&x).unwrap().to_vec(), vec![0.0, 2.0]);
}

#[test]
fn add_matches_scalar_loop() {
    let mut r = rng(101);
    let a = random_tensor(&mut r, &[4, 3]);
    let b = random_tensor(&mut r, &[4, 3]);
    let mut g = Graph::inference();
    let y = g.add(&a, &b).unwrap();
    let (av, bv, yv) = (a.to_vec(), b.to_vec(), y.to_vec());
    for i in 0..12 {
        assert_eq!(yv[i], av[i] + bv[i]);
    }
}

#[test]
fn add_rejects_shape_mismatch() {
    let mut g = Graph::<f64>::inference();
    let a = Tensor::zeros(&[2, 3]).unwrap();
    let b = Tensor::zeros(&[3, 2]).unwrap();
    assert!(g.add(&a, &b).is_err());
}

#[test]
fn elementwise_gradients() {
    let mut r = rng(111);
    let a = random_tensor(&mut r, &[3, 3]).requires_grad(true);
    let b = random_tensor(&mut r, &[3, 3]).requires_grad(true);
    let report = grad_check(
        &[a.clone(), b.clone()],
        |g| {
            let s = g.add(&a, &b)?;
            let p = g.mul(&s, &a)?;
            let activated = g.relu(&p)?;
            let scaled = g.scale(&activated, 1.7)?;
            g.sum_all(&scaled)
        },
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{}", report.max_relative_error);
}

// ---------------------------------------------------------------------------
// softmax_rows
// ---------------------------------------------------------------------------

#[test]
fn softmax_uniform_row() {
    let x = Tensor::<f64>::filled(&[1, 4], 3.0).unwrap();
    let mut g = Graph::inference();
    let y = g.softmax_rows(&x).unwrap();
    for v in y.to_vec() {
        assert!((v - 0.25).abs() < 1e-15);
    }
}

#[test]
fn softmax_survives_huge_logits() {
    let x = Tensor::from_vec(vec![1000.0, 0.0], &[1, 2]).unwrap();
    let mut g = Graph::inference();
    let y = g.softmax_rows(&x).unwrap();
    assert_eq!(y.to_vec(), vec![1.0, 0.0]);
}

#[test]
fn softmax_f32_matches_f64_reference() {
    let mut r = rng(121);
    let data: Vec<f64> = (0..35).map(|_| r.gen_range(-4.0..4.0)).collect();
    let x32 = Tensor::from_vec(data.iter().map(|&v| v as f32).collect(), &[5, 7]).unwrap();
    let mut g32 = Graph::<f32>::inference();
    let y32 = g32.softmax_rows(&x32).unwrap();

    // 64-bit reference
    let mut expected = vec![0.0f64; 35];
    for i in 0..5 {
        let row = &data[i * 7..(i + 1) * 7];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for j in 0..7 {
            expected[i * 7 + j] = exps[j] / sum;
        }
    }
    for (a, b) in y32.to_vec().iter().zip(&expected) {
        assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn softmax_rows_sum_to_one_property() {
    let mut r = rng(131);
    for _ in 0..1000 {
        let m = r.gen_range(1..9);
        let data: Vec<f64> = (0..m).map(|_| r.gen_range(-30.0..30.0)).collect();
        let x = Tensor::from_vec(data, &[1, m]).unwrap();
        let mut g = Graph::inference();
        let y = g.softmax_rows(&x).unwrap();
        let sum: f64 = y.to_vec().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(y.to_vec().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn softmax_rejects_nan() {
    let x = Tensor::from_vec(vec![f64::NAN, 0.0], &[1, 2]).unwrap();
    let mut g = Graph::inference();
    assert!(g.softmax_rows(&x).is_err());
}

#[test]
fn softmax_row_constant_shift_invariance() {
    let mut r = rng(141);
    let base = random_tensor(&mut r, &[4, 6]);
    let shifts = [0.7, -2.0, 13.5, 0.0];
    let mut shifted_data = base.to_vec();
    for i in 0..4 {
        for j in 0..6 {
            shifted_data[i * 6 + j] += shifts[i];
        }
    }
    let shifted = Tensor::from_vec(shifted_data, &[4, 6]).unwrap();
    let mut g = Graph::inference();
    let y0 = g.softmax_rows(&base).unwrap();
    let y1 = g.softmax_rows(&shifted).unwrap();
    for (a, b) in y0.to_vec().iter().zip(y1.to_vec()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn masked_softmax_full_mask_equals_softmax() {
    let mut r = rng(151);
    let x = random_tensor(&mut r, &[3, 3]);
    let mut g = Graph::inference();
    let plain = g.softmax_rows(&x).unwrap();
    let mask = vec![true; 3];
    let masked = g.masked_softmax_rows(&x, &mask, Some(&mask)).unwrap();
    assert_eq!(plain.to_vec(), masked.to_vec());
}

#[test]
fn masked_softmax_zeroes_masked_rows_and_keys() {
    let mut r = rng(161);
    let x = random_tensor(&mut r, &[3, 3]);
    let mask = vec![true, false, true];
    let mut g = Graph::inference();
    let y = g.masked_softmax_rows(&x, &mask, Some(&mask)).unwrap();
    let yv = y.to_vec();
    // row 1 fully zero, column 1 zero in surviving rows
    for j in 0..3 {
        assert_eq!(yv[3 + j], 0.0);
    }
    assert_eq!(yv[1], 0.0);
    assert_eq!(yv[7], 0.0);
    let row0: f64 = yv[0..3].iter().sum();
    let row2: f64 = yv[6..9].iter().sum();
    assert!((row0 - 1.0).abs() < 1e-12);
    assert!((row2 - 1.0).abs() < 1e-12);
}

#[test]
fn masked_softmax_all_false_is_all_zero() {
    let mut r = rng(171);
    let x = random_tensor(&mut r, &[2, 2]);
    let mask = vec![false, false];
    let mut g = Graph::inference();
    let y = g.masked_softmax_rows(&x, &mask, Some(&mask)).unwrap();
    assert!(y.to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn softmax_and_masked_softmax_gradients() {
    let mut r = rng(181);
    let x = random_tensor(&mut r, &[3, 4]).requires_grad(true);
    let weight = random_tensor(&mut r, &[3, 4]);
    let report = grad_check(
        &[x.clone()],
        |g| {
            let y = g.softmax_rows(&x)?;
            let z = g.mul(&y, &weight)?;
            g.sum_all(&z)
        },
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{}", report.max_relative_error);

    let sq = random_tensor(&mut r, &[4, 4]).requires_grad(true);
    let wq = random_tensor(&mut r, &[4, 4]);
    let key_mask = vec![true, false, true, true];
    let query_mask = vec![true, true, false, true];
    let report = grad_check(
        &[sq.clone()],
        |g| {
            let y = g.masked_softmax_rows(&sq, &key_mask, Some(&query_mask))?;
            let z = g.mul(&y, &wq)?;
            g.sum_all(&z)
        },
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{}", report.max_relative_error);
}

// ---------------------------------------------------------------------------
// global_avg_pool, reshapes, indexing
// ---------------------------------------------------------------------------

#[test]
fn gap_constant_input() {
    let x = Tensor::<f64>::filled(&[3, 2, 2], 1.5).unwrap();
    let mut g = Graph::inference();
    assert_eq!(g.global_avg_pool(&x).unwrap().to_vec(), vec![1.5, 1.5, 1.5]);
}

#[test]
fn gap_single_pixel_is_identity() {
    let x = Tensor::from_vec(vec![0.1, 0.2, 0.3], &[3, 1, 1]).unwrap();
    let mut g = Graph::inference();
    assert_eq!(g.global_avg_pool(&x).unwrap().to_vec(), vec![0.1, 0.2, 0.3]);
}

#[test]
fn gap_matches_loop_mean() {
    let mut r = rng(191);
    let x = random_tensor(&mut r, &[2, 3, 4, 2]);
    let mut g = Graph::inference();
    let y = g.global_avg_pool(&x).unwrap();
    let (xv, yv) = (x.to_vec(), y.to_vec());
    for b in 0..2 {
        for c in 0..3 {
            let mut sum = 0.0;
            for p in 0..8 {
                sum += xv[(b * 3 + c) * 8 + p];
            }
            assert!((yv[b * 3 + c] - sum / 8.0).abs() < 1e-6);
        }
    }
}

#[test]
fn pixel_row_round_trip_and_gradients() {
    let mut r = rng(201);
    let x = random_tensor(&mut r, &[3, 2, 4]).requires_grad(true);
    let mut g = Graph::inference();
    let rows = g.pixels_to_rows(&x).unwrap();
    assert_eq!(rows.dims(), &[8, 3]);
    let back = g.rows_to_pixels(&rows, 2, 4).unwrap();
    assert_eq!(back.to_vec(), x.to_vec());

    let weight = random_tensor(&mut r, &[8, 3]);
    let report = grad_check(
        &[x.clone()],
        |g| {
            let rows = g.pixels_to_rows(&x)?;
            let z = g.mul(&rows, &weight)?;
            g.sum_all(&z)
        },
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{}", report.max_relative_error);
}

#[test]
fn matmul_and_variants_match_oracle_and_gradients() {
    let mut r = rng(211);
    let a = random_tensor(&mut r, &[3, 4]).requires_grad(true);
    let b = random_tensor(&mut r, &[4, 2]).requires_grad(true);
    let mut g = Graph::inference();
    let y = g.matmul(&a, &b).unwrap();
    let (av, bv, yv) = (a.to_vec(), b.to_vec(), y.to_vec());
    for i in 0..3 {
        for j in 0..2 {
            let mut acc = 0.0;
            for p in 0..4 {
                acc += av[i * 4 + p] * bv[p * 2 + j];
            }
            assert!((yv[i * 2 + j] - acc).abs() < 1e-12);
        }
    }
    let report = grad_check(
        &[a.clone(), b.clone()],
        |g| {
            let y = g.matmul(&a, &b)?;
            let sq = g.mul(&y, &y)?;
            g.sum_all(&sq)
        },
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{}", report.max_relative_error);

    let c = random_tensor(&mut r, &[2, 4]).requires_grad(true);
    let report = grad_check(
        &[a.clone(), c.clone()],
        |g| {
            let y = g.matmul_nt(&a, &c)?;
            let sq = g.mul(&y, &y)?;
            g.sum_all(&sq)
        },
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{}", report.max_relative_error);
}

#[test]
fn batch_index_stack_scatter_scale_gradients() {
    let mut r = rng(221);
    let x = random_tensor(&mut r, &[3, 2, 2]).requires_grad(true);
    let rows = random_tensor(&mut r, &[3, 2]).requires_grad(true);
    let labels = vec![0usize, 2, 2, 1];
    let factors = vec![1.0, 0.0, 2.0, -0.5];
    let report = grad_check(
        &[x.clone(), rows.clone()],
        |g| {
            let parts: Vec<_> = (0..3)
                .map(|i| g.batch_index(&x, i))
                .collect::<Result<_, _>>()?;
            let restacked = g.batch_stack(&parts)?;
            let total_a = g.sum_all(&restacked)?;
            let scattered = g.scatter_rows(&rows, &labels)?;
            let scaled = g.scale_rows(&scattered, &factors)?;
            let sq = g.mul(&scaled, &scaled)?;
            let total_b = g.sum_all(&sq)?;
            g.add(&total_a, &total_b)
        },
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{}", report.max_relative_error);
}

#[test]
fn l2_normalize_rows_normalizes_and_gradients() {
    let mut r = rng(231);
    let x = random_tensor(&mut r, &[4, 3]).requires_grad(true);
    let mut g = Graph::inference();
    let y = g.l2_normalize_rows(&x).unwrap();
    for i in 0..4 {
        let norm: f64 = y.to_vec()[i * 3..(i + 1) * 3].iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-9);
    }
    let weight = random_tensor(&mut r, &[4, 3]);
    // smaller step: the row-norm jacobian has a steep third derivative
    let report = grad_check(
        &[x.clone()],
        |g| {
            let y = g.l2_normalize_rows(&x)?;
            let z = g.mul(&y, &weight)?;
            g.sum_all(&z)
        },
        1e-4,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{}", report.max_relative_error);
}

// ---------------------------------------------------------------------------
// backward semantics
// ---------------------------------------------------------------------------

#[test]
fn backward_of_sum_is_all_ones() {
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3])
        .unwrap()
        .requires_grad(true);
    let mut g = Graph::new();
    let loss = g.sum_all(&x).unwrap();
    x.zero_grad();
    g.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_zero_scaled_loss_is_zero() {
    let x = Tensor::from_vec(vec![1.0, -2.0], &[2])
        .unwrap()
        .requires_grad(true);
    let mut g = Graph::new();
    let y = g.relu(&x).unwrap();
    let s = g.sum_all(&y).unwrap();
    let loss = g.scale(&s, 0.0).unwrap();
    x.zero_grad();
    g.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
}

#[test]
fn backward_twice_without_reset_errors() {
    let x = Tensor::from_vec(vec![1.0], &[1]).unwrap().requires_grad(true);
    let mut g = Graph::new();
    let loss = g.sum_all(&x).unwrap();
    g.backward(&loss).unwrap();
    assert!(g.backward(&loss).is_err());
    g.reset();
    let loss2 = g.sum_all(&x).unwrap();
    assert!(g.backward(&loss2).is_ok());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap().requires_grad(true);
    let mut g = Graph::new();
    let y = g.relu(&x).unwrap();
    assert!(g.backward(&y).is_err());
}

#[test]
fn unreachable_parameter_keeps_zero_gradient() {
    let used = Tensor::from_vec(vec![2.0], &[1]).unwrap().requires_grad(true);
    let unused = Tensor::from_vec(vec![5.0], &[1]).unwrap().requires_grad(true);
    let mut g = Graph::new();
    let loss = g.sum_all(&used).unwrap();
    used.zero_grad();
    unused.zero_grad();
    g.backward(&loss).unwrap();
    assert_eq!(unused.grad().unwrap(), vec![0.0]);
}

#[test]
fn composite_graph_matches_finite_differences() {
    let mut r = rng(241);
    let x = random_tensor(&mut r, &[3, 3, 4]).requires_grad(true);
    let w = random_tensor(&mut r, &[3, 3, 3, 3]).requires_grad(true);
    let pw = random_tensor(&mut r, &[2, 3]).requires_grad(true);
    let pb = random_tensor(&mut r, &[2]).requires_grad(true);
    let report = grad_check(
        &[x.clone(), w.clone(), pw.clone(), pb.clone()],
        |g| {
            let c = g.conv2d(&x, &w, 1, 1)?;
            let activated = g.relu(&c)?;
            let p = g.pointwise_linear(&activated, &pw, &pb)?;
            let pooled = g.global_avg_pool(&p)?;
            let sq = g.mul(&pooled, &pooled)?;
            g.sum_all(&sq)
        },
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-6, "{}", report.max_relative_error);
}

#[test]
fn same_graph_twice_is_bitwise_identical() {
    let mut r = rng(251);
    let x = random_tensor(&mut r, &[2, 4, 4]).requires_grad(true);
    let w = random_tensor(&mut r, &[2, 2, 3, 3]).requires_grad(true);
    let run = || {
        let mut g = Graph::new();
        let c = g.conv2d(&x, &w, 1, 1).unwrap();
        let rows = g.pixels_to_rows(&c).unwrap();
        let att = g.matmul_nt(&rows, &rows).unwrap();
        let soft = g.softmax_rows(&att).unwrap();
        let out = g.matmul(&soft, &rows).unwrap();
        let loss = g.sum_all(&out).unwrap();
        x.zero_grad();
        w.zero_grad();
        g.backward(&loss).unwrap();
        (out.to_vec(), x.grad().unwrap(), w.grad().unwrap())
    };
    let (o1, gx1, gw1) = run();
    let (o2, gx2, gw2) = run();
    assert_eq!(o1, o2);
    assert_eq!(gx1, gx2);
    assert_eq!(gw1, gw2);
}
