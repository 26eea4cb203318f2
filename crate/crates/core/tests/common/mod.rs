//! Scalar-loop reference implementations used by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    // Box-Muller keeps the oracles free of the library's samplers.
    (0..n)
        .map(|_| {
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

/// Direct convolution: `x: [n, c, h, w]`, `w: [o, c, k, k]`.
pub fn conv2d(x: &[f64], xs: [usize; 4], w: &[f64], o: usize, k: usize, stride: usize, pad: usize) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let yi = (i * stride + ki) as isize - pad as isize;
                                let xj = (j * stride + kj) as isize - pad as isize;
                                if yi < 0 || xj < 0 || yi >= h as isize || xj >= wd as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ic) * h + yi as usize) * wd + xj as usize];
                                acc += xv * w[((oc * c + ic) * k + ki) * k + kj];
                            }
                        }
                    }
                    y[((b * o + oc) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (y, [n, o, oh, ow])
}

/// Per-channel training-mode normalization of `[n, c, s]` data with biased
/// batch variance. Returns output, batch mean and unbiased batch variance.
pub fn batch_norm_train(x: &[f64], n: usize, c: usize, s: usize, gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut means = vec![0.0; c];
    let mut unbiased = vec![0.0; c];
    let m = (n * s) as f64;
    for ch in 0..c {
        let mut sum = 0.0;
        for b in 0..n {
            for i in 0..s {
                sum += x[(b * c + ch) * s + i];
            }
        }
        let mean = sum / m;
        let mut sq = 0.0;
        for b in 0..n {
            for i in 0..s {
                let d = x[(b * c + ch) * s + i] - mean;
                sq += d * d;
            }
        }
        let var = sq / m;
        for b in 0..n {
            for i in 0..s {
                let idx = (b * c + ch) * s + i;
                y[idx] = gamma[ch] * (x[idx] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
        means[ch] = mean;
        unbiased[ch] = sq / (m - 1.0);
    }
    (y, means, unbiased)
}

/// Per-plane mean, `sqrt(biased var + eps)` and maximum.
pub fn plane_stats(plane: &[f64], eps: f64) -> (f64, f64, f64) {
    let n = plane.len() as f64;
    let mut mean = 0.0;
    for v in plane {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for v in plane {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    let mut max = f64::NEG_INFINITY;
    for &v in plane {
        if v > max {
            max = v;
        }
    }
    (mean, (var + eps).sqrt(), max)
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// SRM gate for one channel in inference mode: channel-wise weights over
/// `(mean, std)`, running-statistic normalization, sigmoid.
#[allow(clippy::too_many_arguments)]
pub fn srm_gate(mean: f64, std: f64, w: [f64; 2], gamma: f64, beta: f64, rmean: f64, rvar: f64, eps: f64) -> f64 {
    let z = w[0] * mean + w[1] * std;
    sigmoid(gamma * (z - rmean) / (rvar + eps).sqrt() + beta)
}

/// Squeeze-and-excitation on one example `[c, h, w]`.
pub fn se_example(x: &[f64], c: usize, hw: usize, w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]) -> Vec<f64> {
    let hidden = b1.len();
    let squeeze: Vec<f64> = (0..c).map(|ch| x[ch * hw..][..hw].iter().sum::<f64>() / hw as f64).collect();
    let mut h = vec![0.0; hidden];
    for j in 0..hidden {
        let mut acc = b1[j];
        for ch in 0..c {
            acc += w1[j * c + ch] * squeeze[ch];
        }
        h[j] = acc.max(0.0);
    }
    let mut out = x.to_vec();
    for ch in 0..c {
        let mut acc = b2[ch];
        for j in 0..hidden {
            acc += w2[ch * hidden + j] * h[j];
        }
        let g = sigmoid(acc);
        for v in &mut out[ch * hw..][..hw] {
            *v *= g;
        }
    }
    out
}

/// Two-pass Pearson correlation; `None` when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Gives every normalization layer non-trivial affine terms and running
/// statistics so eval-mode paths are exercised.
pub fn perturb_norms<T: stylerecal::Element>(store: &mut stylerecal::params::ParamStore<T>, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store
        .iter()
        .filter_map(|(id, e)| {
            let kind = ["gamma", "beta", "running_mean", "running_var"]
                .into_iter()
                .find(|k| e.name.ends_with(&format!(".{k}")))?;
            Some((id, e.value.shape().to_vec(), kind))
        })
        .collect();
    for (id, shape, kind) in ids {
        let t = match kind {
            "gamma" => stylerecal::Tensor::uniform(shape, 0.5, 1.5, &mut r),
            "running_var" => stylerecal::Tensor::uniform(shape, 0.5, 2.0, &mut r),
            _ => stylerecal::Tensor::randn(shape, 0.3, &mut r),
        };
        store.set(id, t.unwrap()).unwrap();
    }
}
