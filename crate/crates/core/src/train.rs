//! SGD with momentum and weight decay, learning-rate schedules, the
//! training loop, evaluation and checkpoints.
//!
//! Every random choice in a run is derived from the seed and the step or
//! epoch index, so a run resumed from a checkpoint reproduces the
//! uninterrupted run bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::count_correct;
use crate::container::{Array, Container};
use crate::data::{augment, epoch_order, AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::models::{ArchitectureConfig, ResNet};
use crate::params::{Init, Mode, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::{DType, Element, Tensor};

const AUGMENT_SEED_SALT: u64 = 0xA076_1D64_78BD_642F;

/// Piecewise-constant learning rate: `(step, lr)` pairs, the first at
/// step 0, steps strictly increasing. Each rate applies from its step on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule(pub Vec<(u64, f64)>);

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Self(vec![(0, lr)])
    }

    /// 0.2, divided by 10 at 32k and 48k iterations.
    pub fn cifar() -> Self {
        Self(vec![(0, 0.2), (32_000, 0.02), (48_000, 0.002)])
    }

    /// 0.1, divided by 10 every 30 epochs.
    pub fn imagenet(steps_per_epoch: u64, epochs: u64) -> Self {
        let mut points = vec![(0, 0.1)];
        let mut e = 30;
        while e < epochs {
            let lr = points.last().unwrap().1 / 10.0;
            points.push((e * steps_per_epoch, lr));
            e += 30;
        }
        Self(points)
    }

    /// Multiplies every rate by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|&(s, lr)| (s, lr * factor)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("learning-rate schedule: {m}")));
        match self.0.first() {
            None => return bad("empty"),
            Some(&(s, _)) if s != 0 => return bad("first entry must be at step 0"),
            _ => {}
        }
        if self.0.windows(2).any(|w| w[1].0 <= w[0].0) {
            return bad("steps must be strictly increasing");
        }
        if self.0.iter().any(|&(_, lr)| !lr.is_finite() || lr < 0.0) {
            return bad("rates must be finite and non-negative");
        }
        Ok(())
    }

    pub fn initial(&self) -> f64 {
        self.0.first().map_or(0.0, |p| p.1)
    }
}

/// Rate in effect at `step`.
pub fn lr_at(schedule: &Schedule, step: u64) -> f64 {
    schedule
        .0
        .iter()
        .take_while(|&&(s, _)| s <= step)
        .last()
        .map_or(0.0, |&(_, lr)| lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Total optimization steps.
    pub steps: u64,
    pub seed: u64,
    pub augment: AugmentPolicy,
    /// Steps per metrics row.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::cifar(),
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            steps: 64_000,
            seed: 0,
            augment: AugmentPolicy::PadCropFlip { pad: 4 },
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be finite and non-negative");
        }
        if self.batch_size < 2 {
            return bad("batch size must be >= 2 for batch statistics");
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// SHA-256 (hex) of the architecture and training configuration, with the
/// run length excluded so a run can be extended from its checkpoint.
pub fn config_hash(arch: &ArchitectureConfig, cfg: &TrainConfig) -> Result<String> {
    let mut cfg = cfg.clone();
    cfg.steps = 0;
    let mut h = Sha256::new();
    h.update(serde_json::to_string(arch)?.as_bytes());
    h.update(b"\n");
    h.update(serde_json::to_string(&cfg)?.as_bytes());
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Momentum buffers, indexed by parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub buffers: Vec<Option<Tensor<T>>>,
}

impl<T: Element> SgdState<T> {
    pub fn new(store: &ParamStore<T>) -> Result<Self> {
        let buffers = store
            .iter()
            .map(|(_, e)| match e.kind {
                ParamKind::Trainable => Tensor::zeros(e.value.shape().to_vec()).map(Some),
                ParamKind::RunningStat => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Self { buffers })
    }
}

/// One SGD update of every trainable parameter:
/// `g' = g + wd * p; buf = momentum * buf + g'; p -= lr * buf`.
/// Parameters without a gradient are treated as having zero gradient, so
/// weight decay reaches the whole trainable set. Non-finite gradients abort
/// the step before anything is modified. Returns the number of tensors
/// updated.
pub fn sgd_step<T: Element>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<usize> {
    let mut by_id: Vec<Option<&Tensor<T>>> = vec![None; store.len()];
    for (id, g) in grads {
        if store.entry(*id).kind != ParamKind::Trainable {
            return Err(Error::InvalidArgument(format!("gradient for non-trainable {}", store.entry(*id).name)));
        }
        if g.shape() != store.get(*id).shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: store.get(*id).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", store.entry(*id).name)));
        }
        by_id[id.index()] = Some(g);
    }
    let (lr, mom, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    let ids: Vec<ParamId> = store.trainable().collect();
    for &id in &ids {
        let buf = state.buffers[id.index()]
            .as_mut()
            .ok_or_else(|| Error::InvalidArgument("optimizer state does not match the model".into()))?;
        let grad = by_id[id.index()];
        let p = store.get_mut(id);
        for (i, (pv, bv)) in p.data_mut().iter_mut().zip(buf.data_mut()).enumerate() {
            let g = grad.map_or(T::zero(), |g| g.data()[i]) + wd * *pv;
            *bv = mom * *bv + g;
            *pv = *pv - lr * *bv;
        }
    }
    Ok(ids.len())
}

/// One metrics row, averaged over the steps since the previous row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub top1: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,lr,loss,top1\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.step, r.lr, r.loss, r.top1).unwrap();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Steps completed after this one.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Interval {
    loss: f64,
    correct: f64,
    seen: f64,
    steps: f64,
}

/// Model plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: ResNet<T>,
    pub config: TrainConfig,
    pub state: SgdState<T>,
    pub step: u64,
    pub history: Vec<MetricsRow>,
    interval: Interval,
    order: Vec<(u64, Vec<usize>)>,
}

impl<T: Element> Trainer<T> {
    pub fn new(model: ResNet<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = SgdState::new(&model.store)?;
        Ok(Self {
            model,
            config,
            state,
            step: 0,
            history: Vec::new(),
            interval: Interval::default(),
            order: Vec::new(),
        })
    }

    /// Example indices of the current step: position `step * B + i` of the
    /// concatenation of per-epoch shuffles.
    fn batch_indices(&mut self, n: usize) -> Vec<usize> {
        let b = self.config.batch_size as u64;
        let n64 = n as u64;
        (0..b)
            .map(|i| {
                let p = self.step * b + i;
                let epoch = p / n64;
                if !self.order.iter().any(|(e, _)| *e == epoch) {
                    self.order.retain(|(e, _)| *e + 1 >= epoch);
                    self.order.push((epoch, epoch_order(n, self.config.seed, epoch)));
                }
                let order = &self.order.iter().find(|(e, _)| *e == epoch).unwrap().1;
                order[(p % n64) as usize]
            })
            .collect()
    }

    /// One optimization step. On a non-finite loss or gradient nothing is
    /// modified and an error is returned.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        if data.num_classes != self.model.config.num_classes {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} classes, model {}",
                data.num_classes, self.model.config.num_classes
            )));
        }
        let idx = self.batch_indices(data.len());
        let (x, labels) = data.batch::<T>(&idx)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ AUGMENT_SEED_SALT);
        rng.set_stream(self.step);
        let x = augment(&x, self.config.augment, &mut rng)?;

        let lr = lr_at(&self.config.schedule, self.step);
        let mut s = Session::new(&self.model.store, Mode::Train, true);
        let xv = s.tape.constant(x);
        let logits = self.model.forward(&mut s, xv)?;
        let loss_var = s.tape.cross_entropy(logits, &labels)?;
        let loss = s.tape.value(loss_var).data()[0].as_f64();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step)));
        }
        let correct = count_correct(s.tape.value(logits).data(), self.model.config.num_classes, &labels);
        let grads = s.tape.backward(loss_var)?;
        let param_grads = s.param_grads(&grads);
        let updates = s.take_stat_updates();
        drop(s);

        sgd_step(
            &mut self.model.store,
            &param_grads,
            &mut self.state,
            lr,
            self.config.momentum,
            self.config.weight_decay,
        )?;
        self.model.apply_stat_updates(updates)?;
        self.step += 1;

        let n = labels.len() as f64;
        self.interval.loss += loss;
        self.interval.correct += correct as f64;
        self.interval.seen += n;
        self.interval.steps += 1.0;
        if self.step.is_multiple_of(self.config.log_every) || self.step == self.config.steps {
            self.flush_row(lr);
        }
        Ok(StepStats {
            step: self.step,
            lr,
            loss,
            top1: correct as f64 / n,
        })
    }

    fn flush_row(&mut self, lr: f64) {
        let iv = std::mem::take(&mut self.interval);
        if iv.steps > 0.0 {
            self.history.push(MetricsRow {
                step: self.step,
                lr,
                loss: iv.loss / iv.steps,
                top1: iv.correct / iv.seen,
            });
        }
    }

    /// Runs until `config.steps` steps are done or the loss diverges. On
    /// divergence the trainer keeps the last good state and the reason is
    /// returned.
    pub fn run(&mut self, data: &Dataset) -> Result<Option<String>> {
        while self.step < self.config.steps {
            match self.train_step(data) {
                Ok(_) => {}
                Err(Error::NonFinite(what)) => {
                    log::error!("halting: non-finite {what}");
                    return Ok(Some(what));
                }
                Err(e) => return Err(e),
            }
        }
        Ok(None)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<T>> {
        let store = &self.model.store;
        let params = store.iter().map(|(_, e)| (e.name.clone(), e.value.clone())).collect();
        let momentum = store
            .iter()
            .filter_map(|(id, e)| Some((e.name.clone(), self.state.buffers[id.index()].clone()?)))
            .collect();
        Ok(Checkpoint {
            arch: self.model.config.clone(),
            train: self.config.clone(),
            config_hash: config_hash(&self.model.config, &self.config)?,
            step: self.step,
            params,
            momentum,
            history: self.history.clone(),
            interval: [self.interval.loss, self.interval.correct, self.interval.seen, self.interval.steps],
        })
    }

    /// Restores model and optimizer state. `config` may differ from the
    /// stored one only in its step count.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config_hash(&ckpt.arch, &config)? != ckpt.config_hash {
            return Err(Error::InvalidArgument(
                "checkpoint was written with a different configuration".into(),
            ));
        }
        let model = ckpt.model()?;
        let mut state = SgdState::new(&model.store)?;
        for (name, buf) in &ckpt.momentum {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown momentum buffer {name}")))?;
            let slot = state.buffers[id.index()]
                .as_mut()
                .ok_or_else(|| Error::InvalidArgument(format!("momentum buffer for non-trainable {name}")))?;
            if slot.shape() != buf.shape() {
                return Err(Error::ShapeMismatch {
                    op: "momentum buffer",
                    lhs: slot.shape().to_vec(),
                    rhs: buf.shape().to_vec(),
                });
            }
            *slot = buf.clone();
        }
        let [loss, correct, seen, steps] = ckpt.interval;
        Ok(Self {
            model,
            config,
            state,
            step: ckpt.step,
            history: ckpt.history.clone(),
            interval: Interval {
                loss,
                correct,
                seen,
                steps,
            },
            order: Vec::new(),
        })
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub trainer: Trainer<T>,
    /// Set when the run stopped on a non-finite loss or gradient.
    pub halted: Option<String>,
}

pub fn train<T: Element>(model: ResNet<T>, data: &Dataset, config: TrainConfig) -> Result<TrainOutcome<T>> {
    let mut trainer = Trainer::new(model, config)?;
    let halted = trainer.run(data)?;
    Ok(TrainOutcome { trainer, halted })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub loss: f64,
    pub top1: f64,
}

/// Mean cross-entropy and top-1 accuracy in inference mode.
pub fn evaluate<T: Element>(model: &ResNet<T>, data: &Dataset, mode: Mode, batch_size: usize) -> Result<EvalResult> {
    if mode == Mode::Train {
        return Err(Error::InvalidArgument("evaluation requires eval or folded mode".into()));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch::<T>(chunk)?;
        let mut s = Session::new(&model.store, mode, false);
        let xv = s.tape.constant(x);
        let logits = model.forward(&mut s, xv)?;
        let l = s.tape.cross_entropy(logits, &labels)?;
        loss += s.tape.value(l).data()[0].as_f64() * chunk.len() as f64;
        correct += count_correct(s.tape.value(logits).data(), model.config.num_classes, &labels);
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        loss: loss / n,
        top1: correct as f64 / n,
    })
}

/// Everything needed to resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub arch: ArchitectureConfig,
    pub train: TrainConfig,
    pub config_hash: String,
    pub step: u64,
    /// Every stored tensor, trainable and running statistics.
    pub params: Vec<(String, Tensor<T>)>,
    pub momentum: Vec<(String, Tensor<T>)>,
    pub history: Vec<MetricsRow>,
    interval: [f64; 4],
}

impl<T: Element> Checkpoint<T> {
    /// Rebuilds the model with the stored values.
    pub fn model(&self) -> Result<ResNet<T>> {
        let mut model = ResNet::<T>::build_with(&self.arch, &mut Init::Zeros)?;
        if model.store.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds {} tensors, architecture expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
            model.store.set(id, value.clone())?;
        }
        Ok(model)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("checkpoint");
        let dtype = match T::DTYPE {
            DType::F32 => "f32",
            DType::F64 => "f64",
        };
        c.push("meta/dtype", Array::text(dtype));
        c.push("meta/arch", Array::text(&serde_json::to_string(&self.arch)?));
        c.push("meta/train", Array::text(&serde_json::to_string(&self.train)?));
        c.push("meta/config_hash", Array::text(&self.config_hash));
        c.push("meta/history", Array::text(&serde_json::to_string(&self.history)?));
        c.push("step", Array::u64s(vec![self.step]));
        c.push(
            "interval",
            Array::from_tensor(&Tensor::<f64>::new([4], self.interval.to_vec())?),
        );
        for (name, t) in &self.params {
            c.push(format!("param/{name}"), Array::from_tensor(t));
        }
        for (name, t) in &self.momentum {
            c.push(format!("momentum/{name}"), Array::from_tensor(t));
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let arch = ArchitectureConfig::from_json(c.require("meta/arch")?.as_text()?)?;
        let train: TrainConfig = serde_json::from_str(c.require("meta/train")?.as_text()?)?;
        let history = serde_json::from_str(c.require("meta/history")?.as_text()?)?;
        let step = *c
            .require("step")?
            .as_u64()?
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty step entry".into()))?;
        let iv = c.require("interval")?.to_tensor::<f64>()?;
        let interval: [f64; 4] = iv
            .data()
            .try_into()
            .map_err(|_| Error::InvalidArgument("interval entry must hold 4 values".into()))?;
        let mut params = Vec::new();
        let mut momentum = Vec::new();
        for (name, a) in &c.entries {
            if let Some(n) = name.strip_prefix("param/") {
                params.push((n.to_string(), a.to_tensor::<T>()?));
            } else if let Some(n) = name.strip_prefix("momentum/") {
                momentum.push((n.to_string(), a.to_tensor::<T>()?));
            }
        }
        Ok(Self {
            arch,
            train,
            config_hash: c.require("meta/config_hash")?.as_text()?.to_string(),
            step,
            params,
            momentum,
            history,
            interval,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?.expect_kind("checkpoint")?)
    }
}

/// Element type a checkpoint file was written with.
pub fn checkpoint_dtype(c: &Container) -> Result<DType> {
    match c.require("meta/dtype")?.as_text()? {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::InvalidArgument(format!("unknown checkpoint dtype {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_style, SynthStyleSpec};
    use crate::recalib::RecalibVariant;

    fn store_with(values: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store
            .add("w", Tensor::new([values.len()], values.to_vec()).unwrap(), ParamKind::Trainable)
            .unwrap();
        (store, id)
    }

    #[test]
    fn plain_gradient_step() {
        let (mut store, id) = store_with(&[1.0, -2.0]);
        let mut st = SgdState::new(&store).unwrap();
        let g = Tensor::new([2], vec![0.5, 0.25]).unwrap();
        sgd_step(&mut store, &[(id, g)], &mut st, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(store.get(id).data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
    }

    #[test]
    fn decay_only_step() {
        let (mut store, id) = store_with(&[2.0]);
        let mut st = SgdState::new(&store).unwrap();
        sgd_step(&mut store, &[], &mut st, 0.1, 0.9, 0.01).unwrap();
        assert_eq!(store.get(id).data()[0], 2.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn momentum_hand_trace() {
        let (mut store, id) = store_with(&[0.0]);
        let mut st = SgdState::new(&store).unwrap();
        for _ in 0..2 {
            let g = Tensor::new([1], vec![1.0]).unwrap();
            sgd_step(&mut store, &[(id, g)], &mut st, 0.1, 0.9, 0.0).unwrap();
        }
        assert!((store.get(id).data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut store, id) = store_with(&[1.0]);
        let mut st = SgdState::new(&store).unwrap();
        let g = Tensor::new([1], vec![f64::NAN]).unwrap();
        let err = sgd_step(&mut store, &[(id, g)], &mut st, 0.1, 0.9, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(store.get(id).data(), &[1.0]);
    }

    #[test]
    fn schedules() {
        let c = Schedule::cifar();
        assert_eq!(lr_at(&c, 0), 0.2);
        assert_eq!(lr_at(&c, 31_999), 0.2);
        assert_eq!(lr_at(&c, 32_000), 0.02);
        assert_eq!(lr_at(&c, 48_000), 0.002);
        let i = Schedule::imagenet(10, 90);
        assert_eq!(i.0, vec![(0, 0.1), (300, 0.01), (600, 0.001)]);
        assert_eq!(lr_at(&Schedule::constant(0.3), 1_000_000), 0.3);
        assert!(Schedule(vec![(0, 0.1), (5, 0.1), (5, 0.01)]).validate().is_err());
        assert!(Schedule(vec![(1, 0.1)]).validate().is_err());
        assert!(Schedule(vec![(0, -0.1)]).validate().is_err());
    }

    fn tiny_setup(steps: u64, lr: f64) -> (ResNet<f32>, Dataset, TrainConfig) {
        let cfg = ArchitectureConfig::cifar_resnet(1, 2).with_recalib(Some(RecalibVariant::srm()));
        let model = ResNet::build(&cfg, 1).unwrap();
        let data = synth_style(&SynthStyleSpec::grid(2, 8, 8, 3)).unwrap();
        let tc = TrainConfig {
            schedule: Schedule::constant(lr),
            batch_size: 4,
            steps,
            seed: 5,
            log_every: 2,
            augment: AugmentPolicy::PadCropFlip { pad: 1 },
            ..TrainConfig::default()
        };
        (model, data, tc)
    }

    #[test]
    fn zero_lr_keeps_trainable_parameters() {
        let (model, data, mut tc) = tiny_setup(3, 0.0);
        tc.weight_decay = 1e-2;
        let before = model.store.clone();
        let out = train(model, &data, tc).unwrap();
        for (id, e) in before.iter() {
            if e.kind == ParamKind::Trainable {
                assert_eq!(out.trainer.model.store.get(id), &e.value, "{}", e.name);
            }
        }
    }

    #[test]
    fn resume_is_bit_exact() {
        let (model, data, tc) = tiny_setup(5, 0.05);
        let full = train(model.clone(), &data, tc.clone()).unwrap().trainer;

        let mut first = Trainer::new(model, tc.clone()).unwrap();
        for _ in 0..3 {
            first.train_step(&data).unwrap();
        }
        let bytes = first.checkpoint().unwrap().to_container().unwrap().to_bytes();
        let ckpt = Checkpoint::<f32>::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        let mut resumed = Trainer::from_checkpoint(&ckpt, tc).unwrap();
        resumed.run(&data).unwrap();

        assert_eq!(metrics_csv(&resumed.history), metrics_csv(&full.history));
        let a = resumed.checkpoint().unwrap().to_container().unwrap().to_bytes();
        let b = full.checkpoint().unwrap().to_container().unwrap().to_bytes();
        assert_eq!(a, b);
    }

    #[test]
    fn history_survives_serialization_exactly() {
        let (model, _, tc) = tiny_setup(2, 0.05);
        let mut ckpt = Trainer::new(model, tc).unwrap().checkpoint().unwrap();
        ckpt.history.push(MetricsRow {
            step: 3,
            lr: 0.05,
            loss: 1.3045491377512617,
            top1: 1.0 / 3.0,
        });
        let back = Checkpoint::<f32>::from_container(&ckpt.to_container().unwrap()).unwrap();
        assert_eq!(metrics_csv(&back.history), metrics_csv(&ckpt.history));
    }

    #[test]
    fn changed_config_rejected_on_resume() {
        let (model, _, tc) = tiny_setup(2, 0.05);
        let ckpt = Trainer::new(model, tc.clone()).unwrap().checkpoint().unwrap();
        let mut other = tc.clone();
        other.steps = 100;
        assert!(Trainer::from_checkpoint(&ckpt, other).is_ok());
        let mut other = tc;
        other.seed += 1;
        assert!(Trainer::from_checkpoint(&ckpt, other).is_err());
    }

    #[test]
    fn divergence_halts_with_last_good_state() {
        let (model, data, tc) = tiny_setup(20, 1e30);
        let out = train(model, &data, tc).unwrap();
        assert!(out.halted.is_some());
        assert!(out.trainer.step < 20);
        assert!(out.trainer.model.store.iter().all(|(_, e)| e.value.all_finite()));
    }
}
