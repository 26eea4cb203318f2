//! Central finite-difference verification of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{ArchitectureConfig, BlockKind, ResNet, StageConfig, StemConfig, StemKind};
use crate::nn::{pool_on_tape, PoolKind};
use crate::params::{Init, Mode, ParamKind, ParamStore, Session};
use crate::recalib::{BlockKey, RecalibLayer, RecalibVariant};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over all input elements of
    /// `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step `eps`, element by element over every input.
///
/// `f` receives a fresh tape and one leaf per input (all requiring grad) and
/// must return a single-element output. It is called `1 + 2 * total_len`
/// times and must be deterministic.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("grad_check eps must be > 0, got {eps}")));
    }
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = scalar_of(&tape, out)?;
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !scalar_of(&tape, out)?.is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var).map(|g| g.data().to_vec());
        for ei in 0..inputs[ti].len() {
            let base = inputs[ti].data()[ei];
            probe[ti].data_mut()[ei] = base + eps;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[ei] = base - eps;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[ei] = base;

            let fd = (plus - minus) / (2.0 * eps);
            let an = analytic.as_ref().map_or(0.0, |g| g[ei]);
            let denom = an.abs().max(fd.abs()).max(1e-8);
            let rel = (an - fd).abs() / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Like [`grad_check`], but for code that reads its parameters from a
/// [`ParamStore`]: checks the gradient of the scalar `f` with respect to
/// the input `x` and every trainable tensor of `store`.
pub fn grad_check_store<F>(
    store: &ParamStore<f64>,
    mode: Mode,
    f: F,
    x: &Tensor<f64>,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_, f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("grad_check eps must be > 0, got {eps}")));
    }
    let eval = |store: &ParamStore<f64>, x: &Tensor<f64>| -> Result<f64> {
        let mut s = Session::new(store, mode, false);
        let xv = s.tape.constant(x.clone());
        let out = f(&mut s, xv)?;
        let v = scalar_of(&s.tape, out)?;
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok(v)
    };
    let mut s = Session::new(store, mode, true);
    let xv = s.tape.param(x.clone());
    let out = f(&mut s, xv)?;
    scalar_of(&s.tape, out)?;
    let grads = s.tape.backward(out)?;
    let x_grad = grads.get(xv).map(|g| g.data().to_vec());
    let mut param_grads: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for (id, g) in s.param_grads(&grads) {
        param_grads[id.index()] = Some(g.into_data());
    }
    drop(s);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut record = |slot: usize, ei: usize, an: f64, plus: f64, minus: f64| {
        let fd = (plus - minus) / (2.0 * eps);
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (slot, ei);
        }
        report.checked += 1;
    };

    let mut probe = x.clone();
    for ei in 0..x.len() {
        let base = x.data()[ei];
        probe.data_mut()[ei] = base + eps;
        let plus = eval(store, &probe)?;
        probe.data_mut()[ei] = base - eps;
        let minus = eval(store, &probe)?;
        probe.data_mut()[ei] = base;
        record(0, ei, x_grad.as_ref().map_or(0.0, |g| g[ei]), plus, minus);
    }
    let mut probe = store.clone();
    let ids: Vec<_> = store.trainable().collect();
    for id in ids {
        for ei in 0..store.get(id).len() {
            let base = store.get(id).data()[ei];
            probe.get_mut(id).data_mut()[ei] = base + eps;
            let plus = eval(&probe, x)?;
            probe.get_mut(id).data_mut()[ei] = base - eps;
            let minus = eval(&probe, x)?;
            probe.get_mut(id).data_mut()[ei] = base;
            let an = param_grads[id.index()].as_ref().map_or(0.0, |g| g[ei]);
            record(id.index() + 1, ei, an, plus, minus);
        }
    }
    Ok(report)
}

/// Named result of one check in [`suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

/// Step used by [`suite`].
pub const SUITE_EPS: f64 = 1e-5;

/// Finite-difference checks of every differentiable operation and of whole
/// recalibration layers and residual networks, on small random inputs
/// drawn from `seed`. Losses project outputs onto fixed random tensors so
/// no gradient is structurally zero.
pub fn suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        out.push(SuiteEntry {
            name: name.to_string(),
            report,
        })
    };
    let eps = SUITE_EPS;

    // Weighted sum of all elements of `y` with fixed random weights.
    fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::randn(t.shape(y).to_vec(), 1.0, &mut rng)?;
        let w = t.constant(w);
        let p = t.mul(y, w)?;
        Ok(t.sum_all(p))
    }
    let ps = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 1;

    let x = Tensor::<f64>::randn([2, 3, 5, 5], 1.0, &mut rng)?;
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let w = Tensor::randn([4, 3, 3, 3], 0.5, &mut rng)?;
        let r = grad_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], stride, pad)?;
                project(t, y, ps)
            },
            &[x.clone(), w],
            eps,
        )?;
        push(&format!("conv2d k3 s{stride} p{pad}"), r);
    }
    let w1 = Tensor::randn([4, 3, 1, 1], 0.5, &mut rng)?;
    push(
        "conv2d k1 s2",
        grad_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], 2, 0)?;
                project(t, y, ps)
            },
            &[x.clone(), w1],
            eps,
        )?,
    );

    let gamma = Tensor::uniform([3], 0.5, 1.5, &mut rng)?;
    let beta = Tensor::randn([3], 0.5, &mut rng)?;
    push(
        "batch_norm train",
        grad_check(
            |t, v| {
                let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                project(t, y, ps)
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            eps,
        )?,
    );
    let mean: Vec<f64> = (0..3).map(|i| 0.1 * i as f64).collect();
    let var: Vec<f64> = (0..3).map(|i| 0.5 + 0.3 * i as f64).collect();
    push(
        "batch_norm eval",
        grad_check(
            |t, v| {
                let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
                project(t, y, ps)
            },
            &[x.clone(), gamma, beta],
            eps,
        )?,
    );

    let a = Tensor::randn([3, 4], 1.0, &mut rng)?;
    let b = Tensor::randn([4, 5], 1.0, &mut rng)?;
    push(
        "matmul",
        grad_check(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, ps)
            },
            &[a.clone(), b],
            eps,
        )?,
    );
    push(
        "transpose",
        grad_check(
            |t, v| {
                let y = t.transpose(v[0])?;
                project(t, y, ps)
            },
            std::slice::from_ref(&a),
            eps,
        )?,
    );
    push(
        "relu",
        grad_check(
            |t, v| {
                let y = t.relu(v[0]);
                project(t, y, ps)
            },
            std::slice::from_ref(&x),
            eps,
        )?,
    );
    push(
        "sigmoid",
        grad_check(
            |t, v| {
                let y = t.sigmoid(v[0]);
                project(t, y, ps)
            },
            std::slice::from_ref(&x),
            eps,
        )?,
    );
    let pos = x.map(|v| v.abs() + 0.5);
    push(
        "sqrt",
        grad_check(
            |t, v| {
                let y = t.sqrt(v[0]);
                project(t, y, ps)
            },
            &[pos],
            eps,
        )?,
    );
    push(
        "max_pool2d k3 s2 p1",
        grad_check(
            |t, v| {
                let y = t.max_pool2d(v[0], 3, 2, 1)?;
                project(t, y, ps)
            },
            std::slice::from_ref(&x),
            eps,
        )?,
    );
    for kind in [PoolKind::Avg, PoolKind::Std, PoolKind::Max] {
        push(
            &format!("global {}", kind.name()),
            grad_check(
                |t, v| {
                    let y = pool_on_tape(t, v[0], kind)?;
                    project(t, y, ps)
                },
                std::slice::from_ref(&x),
                eps,
            )?,
        );
    }

    let gates = Tensor::uniform([2, 3], 0.1, 0.9, &mut rng)?;
    let per_channel = Tensor::randn([3], 1.0, &mut rng)?;
    push(
        "channel_mul",
        grad_check(
            |t, v| {
                let y = t.channel_mul(v[0], v[1])?;
                let y = t.channel_mul(y, v[2])?;
                project(t, y, ps)
            },
            &[x.clone(), gates, per_channel.clone()],
            eps,
        )?,
    );
    push(
        "channel_add",
        grad_check(
            |t, v| {
                let y = t.channel_add(v[0], v[1])?;
                project(t, y, ps)
            },
            &[x.clone(), per_channel],
            eps,
        )?,
    );
    let style = Tensor::randn([4, 3, 2], 1.0, &mut rng)?;
    let cfc_w = Tensor::randn([3, 2], 1.0, &mut rng)?;
    push(
        "cfc",
        grad_check(
            |t, v| {
                let y = t.cfc(v[0], v[1])?;
                project(t, y, ps)
            },
            &[style, cfc_w],
            eps,
        )?,
    );
    let logits = Tensor::randn([4, 5], 1.0, &mut rng)?;
    push(
        "cross_entropy",
        grad_check(|t, v| t.cross_entropy(v[0], &[0, 3, 4, 1]), &[logits], eps)?,
    );

    let xb = Tensor::<f64>::randn([4, 6, 4, 4], 1.0, &mut rng)?;
    let key = BlockKey { stage: 1, block: 0 };
    let variants = [
        ("SRM block", RecalibVariant::srm(), Mode::Train),
        ("SRM block eval", RecalibVariant::srm(), Mode::Eval),
        ("SE block r2", RecalibVariant::se(2), Mode::Train),
        ("avg+std+max cfc block", "avg+std+max/cfc".parse()?, Mode::Train),
        // With batch statistics the normalization cancels any per-channel
        // shift, so the FC biases have exactly zero gradient there.
        ("avg+std mlp+bn block eval", "avg+std/mlp+bn/r2".parse()?, Mode::Eval),
    ];
    for (name, variant, mode) in variants {
        let mut store = ParamStore::new();
        let mut init = Init::Random(ChaCha8Rng::seed_from_u64(seed ^ 0xB10C));
        let layer = RecalibLayer::new(&mut store, "r", 6, &variant, &mut init)?;
        randomize_affine(&mut store, &mut rng)?;
        let r = grad_check_store(
            &store,
            mode,
            |s, xv| {
                let y = layer.forward(s, xv, key)?;
                project(&mut s.tape, y, ps)
            },
            &xb,
            eps,
        )?;
        push(name, r);
    }

    for (name, kind, channels, recalib) in [
        ("SRM basic network", BlockKind::Basic, [4, 6], RecalibVariant::srm()),
        ("SRM bottleneck network", BlockKind::Bottleneck, [8, 12], RecalibVariant::srm()),
        ("SE basic network", BlockKind::Basic, [4, 6], RecalibVariant::se(2)),
    ] {
        let cfg = ArchitectureConfig {
            in_channels: 2,
            stem: StemConfig {
                kind: StemKind::Cifar,
                channels: 4,
            },
            stages: vec![
                StageConfig {
                    blocks: 1,
                    channels: channels[0],
                    stride: 1,
                },
                StageConfig {
                    blocks: 1,
                    channels: channels[1],
                    stride: 2,
                },
            ],
            block_kind: kind,
            recalib: Some(recalib),
            num_classes: 3,
        };
        let mut model = ResNet::<f64>::build(&cfg, seed)?;
        randomize_affine(&mut model.store, &mut rng)?;
        let xi = Tensor::randn([3, 2, 5, 5], 1.0, &mut rng)?;
        let r = grad_check_store(
            &model.store,
            Mode::Train,
            |s, xv| {
                let logits = model.forward(s, xv)?;
                s.tape.cross_entropy(logits, &[0, 2, 1])
            },
            &xi,
            eps,
        )?;
        push(name, r);
    }
    Ok(out)
}

/// Replaces normalization gamma/beta (initialized to 1/0) with random
/// values so their gradients are exercised away from the initial point.
fn randomize_affine(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> Result<()> {
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, e)| e.kind == ParamKind::Trainable && (e.name.ends_with(".gamma") || e.name.ends_with(".beta")))
        .map(|(id, e)| (id, e.value.shape().to_vec(), e.name.ends_with(".gamma")))
        .collect();
    for (id, shape, is_gamma) in ids {
        let t = if is_gamma {
            Tensor::uniform(shape, 0.5, 1.5, rng)?
        } else {
            Tensor::randn(shape, 0.3, rng)?
        };
        store.set(id, t)?;
    }
    Ok(())
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: "grad_check function must return a single element".into(),
        });
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_derivative_at_zero() {
        let x = Tensor::scalar(0.0);
        let mut tape = Tape::<f64>::new();
        let v = tape.param(x.clone());
        let y = tape.sigmoid(v);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[0.25]);

        let report = grad_check(|t, v| Ok(t.sigmoid(v[0])), &[x], 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn product_sum_gradients_swap_operands() {
        let x = Tensor::new([3], vec![1.0, 2.0, -3.0]).unwrap();
        let y = Tensor::new([3], vec![0.5, -4.0, 2.5]).unwrap();
        let mut tape = Tape::<f64>::new();
        let (xv, yv) = (tape.param(x.clone()), tape.param(y.clone()));
        let p = tape.mul(xv, yv).unwrap();
        let s = tape.sum_all(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(xv).unwrap(), &y);
        assert_eq!(g.get(yv).unwrap(), &x);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let x = Tensor::scalar(-1.0);
        let err = grad_check(|t, v| Ok(t.sqrt(v[0])), &[x], 1e-6).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn suite_passes_for_one_seed() {
        for e in suite(3).unwrap() {
            assert!(e.report.passes(1e-4), "{}: {:?}", e.name, e.report);
            assert!(e.report.checked > 0);
        }
    }

    #[test]
    fn rejects_non_positive_eps() {
        assert!(grad_check(|t, v| Ok(t.sum_all(v[0])), &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}
