mod common;

use std::collections::BTreeMap;

use approx::assert_abs_diff_eq;
use common::*;
use rand::Rng;
use stylerecal::analysis::{correlation_matrix, sum_squared_corr, AnalysisRecord, LayerGates};
use stylerecal::nn::{batchnorm, global_pool, BatchNormState, BnMode, PoolKind, BN_EPS, POOL_EPS};
use stylerecal::params::Mode;
use stylerecal::recalib::{se_block, style_pool_values, BlockKey, SeParams, StyleIntegrationState};
use stylerecal::{Tape, Tensor};

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut r = rng(11);
    // (n, c, h, w, o, k, stride, pad)
    let cases = [
        (2, 3, 7, 7, 4, 3, 1, 1),
        (1, 2, 8, 6, 3, 3, 2, 1),
        (2, 4, 5, 5, 2, 1, 1, 0),
        (1, 3, 9, 9, 5, 1, 2, 0),
        (3, 1, 6, 7, 2, 3, 2, 0),
        (1, 2, 4, 4, 2, 7, 2, 3),
        (2, 2, 5, 3, 3, 3, 3, 2),
    ];
    for (n, c, h, w, o, k, stride, pad) in cases {
        let x = randn_vec(&mut r, n * c * h * w);
        let wt = randn_vec(&mut r, o * c * k * k);
        let (expected, shape) = conv2d(&x, [n, c, h, w], &wt, o, k, stride, pad);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(tensor(&[n, c, h, w], x));
        let wv = tape.constant(tensor(&[o, c, k, k], wt));
        let y = tape.conv2d(xv, wv, stride, pad).unwrap();
        assert_eq!(tape.shape(y), &shape[..]);
        assert!(max_abs_diff(tape.value(y).data(), &expected) < 1e-12, "case {:?}", (n, c, h, w, o, k, stride, pad));
    }
}

#[test]
fn conv2d_f32_tracks_f64() {
    let mut r = rng(12);
    let x = randn_vec(&mut r, 2 * 3 * 8 * 8);
    let wt = randn_vec(&mut r, 4 * 3 * 3 * 3);
    let (expected, _) = conv2d(&x, [2, 3, 8, 8], &wt, 4, 3, 1, 1);
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(tensor(&[2, 3, 8, 8], x).cast());
    let wv = tape.constant(tensor(&[4, 3, 3, 3], wt).cast());
    let y = tape.conv2d(xv, wv, 1, 1).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(&expected) {
        assert_abs_diff_eq!(f64::from(*a), *b, epsilon = 1e-4);
    }
}

#[test]
fn batch_norm_train_and_running_update() {
    let mut r = rng(13);
    let (n, c, s) = (4, 3, 10);
    let x = randn_vec(&mut r, n * c * s).iter().map(|v| 2.0 * v + 0.5).collect::<Vec<_>>();
    let gamma = randn_vec(&mut r, c);
    let beta = randn_vec(&mut r, c);
    let (expected, mean, unbiased) = batch_norm_train(&x, n, c, s, &gamma, &beta, BN_EPS);

    let mut state = BatchNormState::<f64>::new(c);
    state.gamma = gamma.clone();
    state.beta = beta.clone();
    let y = batchnorm(&tensor(&[n, c, 2, 5], x.clone()), &mut state).unwrap();
    assert!(max_abs_diff(y.data(), &expected) < 1e-12);
    for ch in 0..c {
        assert_abs_diff_eq!(state.running_mean[ch], 0.1 * mean[ch], epsilon = 1e-12);
        assert_abs_diff_eq!(state.running_var[ch], 0.9 + 0.1 * unbiased[ch], epsilon = 1e-12);
    }

    state.mode = BnMode::Eval;
    let y = batchnorm(&tensor(&[n, c, 2, 5], x.clone()), &mut state).unwrap();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..s {
                let idx = (b * c + ch) * s + i;
                let e = gamma[ch] * (x[idx] - state.running_mean[ch]) / (state.running_var[ch] + BN_EPS).sqrt() + beta[ch];
                assert_abs_diff_eq!(y.data()[idx], e, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn style_pooling_matches_plane_loops() {
    let mut r = rng(14);
    for (n, c, h, w) in [(2, 3, 4, 4), (1, 5, 1, 1), (3, 2, 7, 3), (1, 1, 8, 8)] {
        let mut x = randn_vec(&mut r, n * c * h * w);
        // constant plane
        for v in &mut x[..h * w] {
            *v = 1.25;
        }
        let xt = tensor(&[n, c, h, w], x.clone());
        let pooled = style_pool_values(&xt, &[PoolKind::Avg, PoolKind::Std, PoolKind::Max]).unwrap();
        assert_eq!(pooled.shape(), &[n, c, 3]);
        for i in 0..n * c {
            let (m, sd, mx) = plane_stats(&x[i * h * w..][..h * w], POOL_EPS);
            assert_abs_diff_eq!(pooled.data()[3 * i], m, epsilon = 1e-12);
            assert_abs_diff_eq!(pooled.data()[3 * i + 1], sd, epsilon = 1e-12);
            assert_abs_diff_eq!(pooled.data()[3 * i + 2], mx, epsilon = 1e-12);
        }
        let std = global_pool(&xt, PoolKind::Std).unwrap();
        assert!(std.data()[0] <= 1e-6);
    }
}

#[test]
fn srm_gates_match_scalar_oracle() {
    let mut r = rng(15);
    let (n, c, hw) = (3, 4, 9);
    let x = randn_vec(&mut r, n * c * hw);
    let w = randn_vec(&mut r, 2 * c);
    let gamma = randn_vec(&mut r, c);
    let beta = randn_vec(&mut r, c);
    let rmean = randn_vec(&mut r, c);
    let rvar: Vec<f64> = (0..c).map(|_| r.random_range(0.1..2.0)).collect();
    let mut bn = BatchNormState::new(c);
    bn.gamma = gamma.clone();
    bn.beta = beta.clone();
    bn.running_mean = rmean.clone();
    bn.running_var = rvar.clone();
    bn.mode = BnMode::Eval;
    let mut state = StyleIntegrationState {
        cfc_weights: tensor(&[c, 2], w.clone()),
        cfc_bias: None,
        bn: Some(bn),
        folded: None,
    };
    let t = style_pool_values(&tensor(&[n, c, 3, 3], x.clone()), &[PoolKind::Avg, PoolKind::Std]).unwrap();
    let gates = state.integrate(&t, Mode::Eval).unwrap();
    for b in 0..n {
        for ch in 0..c {
            let (m, sd, _) = plane_stats(&x[(b * c + ch) * hw..][..hw], POOL_EPS);
            let e = srm_gate(m, sd, [w[2 * ch], w[2 * ch + 1]], gamma[ch], beta[ch], rmean[ch], rvar[ch], BN_EPS);
            assert_abs_diff_eq!(gates.data()[b * c + ch], e, epsilon = 1e-12);
        }
    }
}

#[test]
fn se_block_matches_scalar_oracle() {
    let mut r = rng(16);
    let (n, c, hw, red) = (2, 8, 6, 4);
    let hidden = c / red;
    let x = randn_vec(&mut r, n * c * hw);
    let w1 = randn_vec(&mut r, hidden * c);
    let b1 = randn_vec(&mut r, hidden);
    let w2 = randn_vec(&mut r, c * hidden);
    let b2 = randn_vec(&mut r, c);
    let params = SeParams {
        w1: tensor(&[hidden, c], w1.clone()),
        b1: tensor(&[hidden], b1.clone()),
        w2: tensor(&[c, hidden], w2.clone()),
        b2: tensor(&[c], b2.clone()),
    };
    let y = se_block(&tensor(&[n, c, 2, 3], x.clone()), red, &params).unwrap();
    for b in 0..n {
        let e = se_example(&x[b * c * hw..][..c * hw], c, hw, &w1, &b1, &w2, &b2);
        assert!(max_abs_diff(&y.data()[b * c * hw..][..c * hw], &e) < 1e-12);
    }
}

#[test]
fn correlation_matches_two_pass_pearson() {
    let mut r = rng(17);
    let (rows, c) = (20, 5);
    let mut values: Vec<f64> = (0..rows * c).map(|_| r.random::<f64>()).collect();
    // channel 3 constant
    for i in 0..rows {
        values[i * c + 3] = 0.5;
    }
    let key = BlockKey { stage: 1, block: 0 };
    let record = AnalysisRecord::new(
        (0..rows as u64).collect(),
        BTreeMap::from([(key, LayerGates { channels: c, values: values.clone() })]),
    )
    .unwrap();
    let m = correlation_matrix(&record, key).unwrap();
    let col = |ch: usize| (0..rows).map(|i| values[i * c + ch]).collect::<Vec<_>>();
    let mut total = 0.0;
    for i in 0..c {
        for j in 0..c {
            let e = if i == j { 1.0 } else { pearson(&col(i), &col(j)).unwrap_or(0.0) };
            assert_abs_diff_eq!(m.at(i, j), e, epsilon = 1e-12);
            total += e * e;
        }
    }
    assert_abs_diff_eq!(sum_squared_corr(&record).unwrap(), total, epsilon = 1e-9);
}

#[test]
fn max_pool_matches_window_loops() {
    let mut r = rng(18);
    let (n, c, h, w) = (2, 2, 7, 6);
    let x = randn_vec(&mut r, n * c * h * w);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(tensor(&[n, c, h, w], x.clone()));
    let y = tape.max_pool2d(xv, 3, 2, 1).unwrap();
    let (oh, ow) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    assert_eq!(tape.shape(y), &[n, c, oh, ow]);
    for p in 0..n * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for di in 0..3 {
                    for dj in 0..3 {
                        let (yi, xj) = ((2 * i + di) as isize - 1, (2 * j + dj) as isize - 1);
                        if yi >= 0 && xj >= 0 && (yi as usize) < h && (xj as usize) < w {
                            best = best.max(x[p * h * w + yi as usize * w + xj as usize]);
                        }
                    }
                }
                assert_eq!(tape.value(y).data()[(p * oh + i) * ow + j], best);
            }
        }
    }
}

#[test]
fn cross_entropy_matches_log_softmax() {
    let mut r = rng(19);
    let (n, k) = (4, 5);
    let logits = randn_vec(&mut r, n * k);
    let labels = [0, 3, 4, 1];
    let mut expected = 0.0;
    for b in 0..n {
        let row = &logits[b * k..][..k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        expected += lse - row[labels[b]];
    }
    expected /= n as f64;
    let mut tape = Tape::<f64>::new();
    let l = tape.constant(tensor(&[n, k], logits));
    let loss = tape.cross_entropy(l, &labels).unwrap();
    assert_abs_diff_eq!(tape.value(loss).data()[0], expected, epsilon = 1e-12);
}
