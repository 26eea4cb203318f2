//! Trainable layers: convolution, batch normalization, linear, pooling.

use serde::{Deserialize, Serialize};

use crate::autograd::{conv_out_hw, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, Mode, ParamId, ParamKind, ParamStore, Session};
use crate::tensor::{Element, Tensor};

/// Normalization epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the batch statistic in the running average.
pub const BN_MOMENTUM: f64 = 0.1;
/// Added under the square root of std pooling so constant channels have a
/// finite gradient.
pub const POOL_EPS: f64 = 1e-12;

/// `(channels, height, width)` of one example.
pub type Chw = [usize; 3];

/// Global spatial statistic of a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Avg,
    Std,
    Max,
}

impl PoolKind {
    pub fn name(self) -> &'static str {
        match self {
            PoolKind::Avg => "avg",
            PoolKind::Std => "std",
            PoolKind::Max => "max",
        }
    }
}

impl std::str::FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(PoolKind::Avg),
            "std" => Ok(PoolKind::Std),
            "max" => Ok(PoolKind::Max),
            other => Err(Error::InvalidArgument(format!("unknown pooling kind {other:?}"))),
        }
    }
}

/// Records `[N, C, H, W] -> [N, C]` pooling of the given kind.
pub fn pool_on_tape<T: Element>(tape: &mut Tape<T>, x: Var, kind: PoolKind) -> Result<Var> {
    match kind {
        PoolKind::Avg => tape.global_avg(x),
        PoolKind::Std => tape.global_std(x, POOL_EPS),
        PoolKind::Max => tape.global_max(x),
    }
}

/// Per-example, per-channel spatial statistic of `x`.
pub fn global_pool<T: Element>(x: &Tensor<T>, kind: PoolKind) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = pool_on_tape(&mut tape, v, kind)?;
    Ok(tape.value(out).clone())
}

/// Square-kernel convolution without bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-normal initialization with fan-out scaling.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: &mut Init,
    ) -> Result<Self> {
        let shape = [out_channels, in_channels, kernel, kernel];
        let std = (2.0 / (out_channels * kernel * kernel) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), init.normal(&shape, std)?, ParamKind::Trainable)?;
        Ok(Self {
            weight,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        s.tape.conv2d(x, w, self.stride, self.padding)
    }

    pub fn out_shape(&self, input: Chw) -> Result<Chw> {
        if input[0] != self.in_channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: vec![self.out_channels, self.in_channels, self.kernel, self.kernel],
            });
        }
        let (h, w) = conv_out_hw(input[1], input[2], self.kernel, self.stride, self.padding)
            .ok_or_else(|| Error::InvalidArgument(format!("conv kernel does not fit input {input:?}")))?;
        Ok([self.out_channels, h, w])
    }

    /// Multiply-accumulates for one example.
    pub fn macs(&self, input: Chw) -> Result<u64> {
        let [_, h, w] = self.out_shape(input)?;
        Ok((self.out_channels * h * w * self.in_channels * self.kernel * self.kernel) as u64)
    }
}

/// Batch normalization over every axis except channels.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let c = [channels];
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(c)?, ParamKind::Trainable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(c)?, ParamKind::Trainable)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(c)?, ParamKind::RunningStat)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(c)?, ParamKind::RunningStat)?,
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        match s.mode() {
            Mode::Train => {
                let count = s.tape.value(x).len() / self.channels;
                let (y, mean, var) = s.tape.batch_norm_train(x, gamma, beta, self.eps)?;
                let (m, v) = ema_update(
                    s.buffer(self.running_mean).data(),
                    s.buffer(self.running_var).data(),
                    &mean,
                    &var,
                    count,
                    self.momentum,
                );
                s.push_stat_update(self.running_mean, Tensor::from_parts(vec![self.channels], m));
                s.push_stat_update(self.running_var, Tensor::from_parts(vec![self.channels], v));
                Ok(y)
            }
            Mode::Eval | Mode::Folded => {
                let mean = s.buffer(self.running_mean).data();
                let var = s.buffer(self.running_var).data();
                s.tape.batch_norm_eval(x, gamma, beta, mean, var, self.eps)
            }
        }
    }

    pub fn state<T: Element>(&self, store: &ParamStore<T>, mode: BnMode) -> BatchNormState<T> {
        BatchNormState {
            gamma: store.get(self.gamma).data().to_vec(),
            beta: store.get(self.beta).data().to_vec(),
            running_mean: store.get(self.running_mean).data().to_vec(),
            running_var: store.get(self.running_var).data().to_vec(),
            momentum: self.momentum,
            eps: self.eps,
            mode,
        }
    }
}

/// Exponential moving average of the running statistics. The variance
/// estimate stored is the unbiased one (`count / (count - 1)` correction).
fn ema_update<T: Element>(
    old_mean: &[T],
    old_var: &[T],
    mean: &[T],
    var: &[T],
    count: usize,
    momentum: f64,
) -> (Vec<T>, Vec<T>) {
    let m = T::of(momentum);
    let keep = T::one() - m;
    let correction = T::of(count as f64 / (count.max(2) - 1) as f64);
    let new_mean = old_mean.iter().zip(mean).map(|(&o, &b)| keep * o + m * b).collect();
    let new_var = old_var
        .iter()
        .zip(var)
        .map(|(&o, &b)| keep * o + m * b * correction)
        .collect();
    (new_mean, new_var)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Standalone normalization state: affine terms plus running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: BnMode,
}

impl<T: Element> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            mode: BnMode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Normalizes `x` (`[N, C, ...]`). Train mode uses biased batch statistics
/// and updates the running averages in `state`; eval mode only reads them.
pub fn batchnorm<T: Element>(x: &Tensor<T>, state: &mut BatchNormState<T>) -> Result<Tensor<T>> {
    let c = state.channels();
    if x.rank() < 2 || x.shape()[1] != c {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: x.shape().to_vec(),
            rhs: vec![c],
        });
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::from_parts(vec![c], state.gamma.clone()));
    let b = tape.constant(Tensor::from_parts(vec![c], state.beta.clone()));
    match state.mode {
        BnMode::Train => {
            let (y, mean, var) = tape.batch_norm_train(xv, g, b, state.eps)?;
            let (m, v) = ema_update(
                &state.running_mean,
                &state.running_var,
                &mean,
                &var,
                x.len() / c,
                state.momentum,
            );
            state.running_mean = m;
            state.running_var = v;
            Ok(tape.value(y).clone())
        }
        BnMode::Eval => {
            let y = tape.batch_norm_eval(xv, g, b, &state.running_mean, &state.running_var, state.eps)?;
            Ok(tape.value(y).clone())
        }
    }
}

/// Fully connected layer, `y = x W^T + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Uniform init with bound `1/sqrt(in_features)` for weight and bias.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        init: &mut Init,
    ) -> Result<Self> {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            init.uniform(&[out_features, in_features], bound)?,
            ParamKind::Trainable,
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), init.uniform(&[out_features], bound)?, ParamKind::Trainable)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let wt = s.tape.transpose(w)?;
        let y = s.tape.matmul(x, wt)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.tape.channel_add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn macs(&self) -> u64 {
        (self.in_features * self.out_features) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_two_values_normalize_to_plus_minus_one() {
        let x = Tensor::<f64>::new([2, 1], vec![1.0, -1.0]).unwrap();
        let mut state = BatchNormState::new(1);
        let y = batchnorm(&x, &mut state).unwrap();
        let expect = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-15);
        assert!((y.data()[1] + expect).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_unit_stats_is_identity() {
        let x = Tensor::<f64>::from_fn([3, 2, 2, 2], |i| i as f64 * 0.37 - 2.0).unwrap();
        let mut state = BatchNormState::new(2);
        state.mode = BnMode::Eval;
        state.eps = 0.0;
        assert_eq!(batchnorm(&x, &mut state).unwrap(), x);
    }

    #[test]
    fn eval_mode_ignores_batch_composition() {
        let x = Tensor::<f64>::from_fn([4, 2, 3, 3], |i| ((i * 7) % 11) as f64).unwrap();
        let mut state = BatchNormState::new(2);
        state.mode = BnMode::Eval;
        state.running_mean = vec![0.3, -1.0];
        state.running_var = vec![2.0, 0.5];
        let full = batchnorm(&x, &mut state).unwrap();
        let first = Tensor::new([1, 2, 3, 3], x.data()[..18].to_vec()).unwrap();
        let single = batchnorm(&first, &mut state).unwrap();
        assert_eq!(&full.data()[..18], single.data());
    }

    #[test]
    fn train_mode_rejects_batch_of_one() {
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]).unwrap();
        let mut state = BatchNormState::new(3);
        assert!(batchnorm(&x, &mut state).is_err());
    }

    #[test]
    fn running_stats_follow_ema() {
        let x = Tensor::<f64>::new([2, 1], vec![3.0, 1.0]).unwrap();
        let mut state = BatchNormState::new(1);
        batchnorm(&x, &mut state).unwrap();
        // batch mean 2, unbiased var 2
        assert!((state.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((state.running_var[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn pooling_two_level_channel() {
        let x = Tensor::<f64>::new([1, 1, 2, 2], vec![1.0, 3.0, 3.0, 1.0]).unwrap();
        assert_eq!(global_pool(&x, PoolKind::Avg).unwrap().data(), &[2.0]);
        let std = global_pool(&x, PoolKind::Std).unwrap().data()[0];
        assert!((std - 1.0).abs() < 1e-12);
        assert_eq!(global_pool(&x, PoolKind::Max).unwrap().data(), &[3.0]);
    }

    #[test]
    fn pooling_constant_channel() {
        let x = Tensor::<f64>::full([2, 3, 4, 4], -1.5).unwrap();
        assert!(global_pool(&x, PoolKind::Avg).unwrap().data().iter().all(|&v| v == -1.5));
        assert!(global_pool(&x, PoolKind::Std)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v <= POOL_EPS.sqrt() * 1.0001));
        assert!(global_pool(&x, PoolKind::Max).unwrap().data().iter().all(|&v| v == -1.5));
    }

    #[test]
    fn linear_maps_rows() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "fc", 2, 3, true, &mut Init::Zeros).unwrap();
        store
            .set(lin.weight, Tensor::new([3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap())
            .unwrap();
        store.set(lin.bias.unwrap(), Tensor::new([3], vec![0.0, 0.0, 10.0]).unwrap()).unwrap();
        let mut s = Session::new(&store, Mode::Eval, false);
        let x = s.tape.constant(Tensor::new([1, 2], vec![2.0, 5.0]).unwrap());
        let y = lin.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.value(y).data(), &[2.0, 5.0, 17.0]);
    }
}
