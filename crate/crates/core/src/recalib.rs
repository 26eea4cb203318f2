//! Channel recalibration layers.
//!
//! A recalibration layer pools per-channel statistics of a feature map,
//! turns them into one gate `g ∈ (0, 1)` per example and channel, and
//! multiplies every channel by its gate.
//!
//! * SRM: `[avg, std]` style pooling, a channel-wise fully connected map
//!   (one `d -> 1` linear map per channel, no cross-channel weights), batch
//!   normalization over the batch axis and a sigmoid. At inference the
//!   normalization folds into the channel-wise map.
//! * SE: average pooling followed by a two-layer bottleneck MLP with
//!   reduction ratio `r`.
//!
//! Any pooling subset can be combined with either integrator, with or
//! without normalization, which covers the pooling and integration
//! ablations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{pool_on_tape, BatchNorm, BatchNormState, BnMode, Linear, PoolKind};
use crate::params::{Init, Mode, ParamKind, ParamStore, Session};
use crate::tensor::{Element, Tensor};

/// SE reduction ratio used when a variant does not specify one.
pub const DEFAULT_SE_REDUCTION: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integration {
    /// Channel-wise fully connected.
    Cfc,
    /// Two fully connected layers over the concatenated statistics.
    Mlp,
}

/// Which statistics are pooled and how they are turned into gates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecalibVariant {
    pub pooling: Vec<PoolKind>,
    pub integration: Integration,
    pub use_bn: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub se_reduction: Option<usize>,
}

impl RecalibVariant {
    pub fn srm() -> Self {
        Self {
            pooling: vec![PoolKind::Avg, PoolKind::Std],
            integration: Integration::Cfc,
            use_bn: true,
            se_reduction: None,
        }
    }

    pub fn se(reduction: usize) -> Self {
        Self {
            pooling: vec![PoolKind::Avg],
            integration: Integration::Mlp,
            use_bn: false,
            se_reduction: Some(reduction),
        }
    }

    /// Pooling kinds in canonical order (avg, std, max), deduplicated.
    pub fn pooling_set(&self) -> Vec<PoolKind> {
        let mut p = self.pooling.clone();
        p.sort();
        p.dedup();
        p
    }

    /// Number of style features per channel.
    pub fn d(&self) -> usize {
        self.pooling_set().len()
    }

    pub fn reduction(&self) -> usize {
        self.se_reduction.unwrap_or(DEFAULT_SE_REDUCTION)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pooling.is_empty() {
            return Err(Error::InvalidArgument("recalibration pooling set is empty".into()));
        }
        if self.pooling_set().len() != self.pooling.len() {
            return Err(Error::InvalidArgument(format!(
                "recalibration pooling set {:?} has duplicates",
                self.pooling
            )));
        }
        if let Some(r) = self.se_reduction {
            if r < 1 {
                return Err(Error::InvalidArgument("SE reduction ratio must be >= 1".into()));
            }
            if self.integration == Integration::Cfc {
                return Err(Error::InvalidArgument(
                    "reduction ratio only applies to MLP integration".into(),
                ));
            }
        }
        Ok(())
    }
}

impl fmt::Display for RecalibVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pools: Vec<_> = self.pooling_set().iter().map(|p| p.name()).collect();
        let integ = match self.integration {
            Integration::Cfc => "cfc",
            Integration::Mlp => "mlp",
        };
        write!(f, "{}/{}", pools.join("+"), integ)?;
        if self.use_bn {
            write!(f, "+bn")?;
        }
        if self.integration == Integration::Mlp {
            write!(f, "/r{}", self.reduction())?;
        }
        Ok(())
    }
}

/// Parses `srm`, `se`, `se/r8`, or `<pools>/<cfc|mlp>[+bn][/r<N>]` where
/// `<pools>` is a `+`-joined subset of `avg`, `std`, `max`.
impl FromStr for RecalibVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("cannot parse recalibration variant {s:?}"));
        let mut parts = s.trim().split('/');
        let head = parts.next().ok_or_else(bad)?;
        let mut variant = match head {
            "srm" => Self::srm(),
            "se" => Self::se(DEFAULT_SE_REDUCTION),
            pools => {
                let pooling = pools.split('+').map(PoolKind::from_str).collect::<Result<Vec<_>>>()?;
                let integ = parts.next().ok_or_else(bad)?;
                let mut it = integ.split('+');
                let integration = match it.next() {
                    Some("cfc") => Integration::Cfc,
                    Some("mlp") => Integration::Mlp,
                    _ => return Err(bad()),
                };
                let use_bn = match it.next() {
                    None => false,
                    Some("bn") => true,
                    Some(_) => return Err(bad()),
                };
                if it.next().is_some() {
                    return Err(bad());
                }
                Self {
                    pooling,
                    integration,
                    use_bn,
                    se_reduction: None,
                }
            }
        };
        if let Some(r) = parts.next() {
            let r: usize = r.strip_prefix('r').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            variant.se_reduction = Some(r);
        }
        if parts.next().is_some() {
            return Err(bad());
        }
        if variant.integration == Integration::Mlp && variant.se_reduction.is_none() {
            variant.se_reduction = Some(DEFAULT_SE_REDUCTION);
        }
        variant.validate()?;
        Ok(variant)
    }
}

/// Per-example, per-channel style features `[N, C, d]` on a tape. Feature
/// order follows the canonical pooling order avg, std, max.
#[derive(Debug, Clone, Copy)]
pub struct StyleRepresentation {
    pub values: Var,
    pub d: usize,
}

/// Pools the selected statistics of `x` and stacks them per channel.
pub fn style_pool<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    pooling: &[PoolKind],
) -> Result<StyleRepresentation> {
    if pooling.is_empty() {
        return Err(Error::InvalidArgument("style_pool needs at least one statistic".into()));
    }
    let mut kinds = pooling.to_vec();
    kinds.sort();
    kinds.dedup();
    let stats = kinds
        .iter()
        .map(|&k| pool_on_tape(tape, x, k))
        .collect::<Result<Vec<_>>>()?;
    let values = tape.stack_last(&stats)?;
    Ok(StyleRepresentation { values, d: kinds.len() })
}

/// Value-level [`style_pool`]: `[N, C, H, W] -> [N, C, d]`.
pub fn style_pool_values<T: Element>(x: &Tensor<T>, pooling: &[PoolKind]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let t = style_pool(&mut tape, v, pooling)?;
    Ok(tape.value(t.values).clone())
}

/// Channel-wise multiplication `x̂[n, c] = g[n, c] * x[n, c]`.
pub fn recalibrate<T: Element>(tape: &mut Tape<T>, x: Var, gates: Var) -> Result<Var> {
    if tape.shape(gates).len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "recalibrate",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(gates).to_vec(),
        });
    }
    tape.channel_mul(x, gates)
}

/// Value-level [`recalibrate`].
pub fn recalibrate_values<T: Element>(x: &Tensor<T>, gates: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(gates.clone());
    let out = recalibrate(&mut tape, xv, g)?;
    Ok(tape.value(out).clone())
}

/// Inference-time affine map replacing CFC + BN: `z = w'·t + b'`.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedAffine<T> {
    /// `[C, d]`
    pub weight: Tensor<T>,
    /// `[C]`
    pub bias: Tensor<T>,
}

/// Channel-wise fully connected integration with optional normalization.
#[derive(Debug, Clone)]
pub struct StyleIntegration<T> {
    pub channels: usize,
    pub d: usize,
    pub cfc: crate::params::ParamId,
    /// Only present without normalization; otherwise the shift is the
    /// normalization's beta.
    pub bias: Option<crate::params::ParamId>,
    pub bn: Option<BatchNorm>,
    pub folded: Option<FoldedAffine<T>>,
}

impl<T: Element> StyleIntegration<T> {
    /// CFC weights uniform in `±1/sqrt(d)`, BN gamma 1 and beta 0.
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        d: usize,
        use_bn: bool,
        init: &mut Init,
    ) -> Result<Self> {
        let bound = 1.0 / (d as f64).sqrt();
        let cfc = store.add(format!("{name}.cfc.weight"), init.uniform(&[channels, d], bound)?, ParamKind::Trainable)?;
        let (bias, bn) = if use_bn {
            (None, Some(BatchNorm::new(store, &format!("{name}.bn"), channels)?))
        } else {
            let b = store.add(format!("{name}.cfc.bias"), Tensor::zeros([channels])?, ParamKind::Trainable)?;
            (Some(b), None)
        };
        Ok(Self {
            channels,
            d,
            cfc,
            bias,
            bn,
            folded: None,
        })
    }

    /// Gates `[N, C]` from style features `[N, C, d]`.
    pub fn forward(&self, s: &mut Session<'_, T>, t: StyleRepresentation) -> Result<Var> {
        if t.d != self.d {
            return Err(Error::ShapeMismatch {
                op: "style_integrate",
                lhs: s.tape.shape(t.values).to_vec(),
                rhs: vec![self.channels, self.d],
            });
        }
        if s.mode() == Mode::Folded {
            let folded = self.folded.as_ref().ok_or_else(|| {
                Error::Unsupported("fold_bn before running in folded mode".into())
            })?;
            let w = s.tape.constant(folded.weight.clone());
            let b = s.tape.constant(folded.bias.clone());
            let z = s.tape.cfc(t.values, w)?;
            let z = s.tape.channel_add(z, b)?;
            return Ok(s.tape.sigmoid(z));
        }
        let w = s.param(self.cfc);
        let mut z = s.tape.cfc(t.values, w)?;
        if let Some(b) = self.bias {
            let b = s.param(b);
            z = s.tape.channel_add(z, b)?;
        }
        if let Some(bn) = &self.bn {
            z = bn.forward(s, z)?;
        }
        Ok(s.tape.sigmoid(z))
    }

    /// Snapshot of the parameters as a standalone state.
    pub fn state(&self, store: &ParamStore<T>) -> StyleIntegrationState<T> {
        StyleIntegrationState {
            cfc_weights: store.get(self.cfc).clone(),
            cfc_bias: self.bias.map(|b| store.get(b).data().to_vec()),
            bn: self.bn.as_ref().map(|bn| bn.state(store, BnMode::Eval)),
            folded: self.folded.clone(),
        }
    }

    /// Recomputes the folded affine map from the current parameters.
    pub fn fold(&mut self, store: &ParamStore<T>) -> Result<()> {
        self.folded = self.state(store).fold_bn()?.folded;
        Ok(())
    }
}

/// Standalone channel-wise integration parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleIntegrationState<T> {
    /// `[C, d]`
    pub cfc_weights: Tensor<T>,
    pub cfc_bias: Option<Vec<T>>,
    pub bn: Option<BatchNormState<T>>,
    pub folded: Option<FoldedAffine<T>>,
}

impl<T: Element> StyleIntegrationState<T> {
    pub fn channels(&self) -> usize {
        self.cfc_weights.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.cfc_weights.shape()[1]
    }

    /// Merges the normalization (running statistics) into the channel-wise
    /// map: `w' = γ w / sqrt(var + ε)`, `b' = β − γ μ / sqrt(var + ε)`.
    pub fn fold_bn(&self) -> Result<Self> {
        let (c, d) = (self.channels(), self.d());
        let w = self.cfc_weights.data();
        let zero_bias = vec![T::zero(); c];
        let pre_bias = self.cfc_bias.as_deref().unwrap_or(&zero_bias);
        let (weight, bias) = match &self.bn {
            None => (w.to_vec(), pre_bias.to_vec()),
            Some(bn) => {
                if bn.running_var.iter().chain(&bn.running_mean).any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("fold_bn running statistics".into()));
                }
                if bn.running_var.iter().any(|&v| v < T::zero()) {
                    return Err(Error::InvalidArgument("fold_bn: negative running variance".into()));
                }
                let eps = T::of(bn.eps);
                let mut weight = vec![T::zero(); c * d];
                let mut bias = vec![T::zero(); c];
                for ch in 0..c {
                    let scale = bn.gamma[ch] / (bn.running_var[ch] + eps).sqrt();
                    for k in 0..d {
                        weight[ch * d + k] = scale * w[ch * d + k];
                    }
                    bias[ch] = bn.beta[ch] + scale * (pre_bias[ch] - bn.running_mean[ch]);
                }
                (weight, bias)
            }
        };
        Ok(Self {
            folded: Some(FoldedAffine {
                weight: Tensor::from_parts(vec![c, d], weight),
                bias: Tensor::from_parts(vec![c], bias),
            }),
            ..self.clone()
        })
    }

    /// Gates `[N, C]` for style features `t: [N, C, d]`. Train mode updates
    /// the running statistics held in `self`.
    pub fn integrate(&mut self, t: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (c, d) = (self.channels(), self.d());
        let mut store = ParamStore::new();
        let mut layer = StyleIntegration::new(&mut store, "si", c, d, self.bn.is_some(), &mut Init::Zeros)?;
        store.set(layer.cfc, self.cfc_weights.clone())?;
        if let (Some(id), Some(b)) = (layer.bias, &self.cfc_bias) {
            store.set(id, Tensor::new([c], b.clone())?)?;
        }
        // A bias ahead of the normalization is the same as a running mean
        // shifted by -bias (batch statistics cancel it in train mode).
        let shift = match (&self.bn, &self.cfc_bias) {
            (Some(_), Some(b)) => b.clone(),
            _ => vec![T::zero(); c],
        };
        if let (Some(bn), Some(st)) = (&layer.bn, &self.bn) {
            let mean: Vec<T> = st.running_mean.iter().zip(&shift).map(|(&m, &b)| m - b).collect();
            store.set(bn.gamma, Tensor::new([c], st.gamma.clone())?)?;
            store.set(bn.beta, Tensor::new([c], st.beta.clone())?)?;
            store.set(bn.running_mean, Tensor::new([c], mean)?)?;
            store.set(bn.running_var, Tensor::new([c], st.running_var.clone())?)?;
        }
        layer.folded = self.folded.clone();

        let mut s = Session::new(&store, mode, false);
        let tv = s.tape.constant(t.clone());
        let g = layer.forward(&mut s, StyleRepresentation { values: tv, d })?;
        let gates = s.tape.value(g).clone();
        let updates = s.take_stat_updates();
        if let (Some(bn), Some(st)) = (&layer.bn, &mut self.bn) {
            for (id, value) in updates {
                if id == bn.running_mean {
                    st.running_mean = value.into_data().into_iter().zip(&shift).map(|(m, &b)| m + b).collect();
                } else if id == bn.running_var {
                    st.running_var = value.into_data();
                }
            }
        }
        Ok(gates)
    }
}

/// Fully connected integration over the concatenated statistics
/// (SE excitation when the pooling set is `{avg}`).
#[derive(Debug, Clone)]
pub struct MlpIntegration {
    pub channels: usize,
    pub d: usize,
    pub hidden: usize,
    pub fc1: Linear,
    pub fc2: Linear,
    pub bn: Option<BatchNorm>,
}

impl MlpIntegration {
    /// Hidden width `max(1, C / r)`.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        d: usize,
        reduction: usize,
        use_bn: bool,
        init: &mut Init,
    ) -> Result<Self> {
        if reduction < 1 {
            return Err(Error::InvalidArgument("SE reduction ratio must be >= 1".into()));
        }
        let hidden = (channels / reduction).max(1);
        let fc1 = Linear::new(store, &format!("{name}.fc1"), channels * d, hidden, true, init)?;
        let fc2 = Linear::new(store, &format!("{name}.fc2"), hidden, channels, true, init)?;
        let bn = if use_bn {
            Some(BatchNorm::new(store, &format!("{name}.bn"), channels)?)
        } else {
            None
        };
        Ok(Self {
            channels,
            d,
            hidden,
            fc1,
            fc2,
            bn,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, t: StyleRepresentation) -> Result<Var> {
        let n = s.tape.shape(t.values)[0];
        let flat = s.tape.reshape(t.values, &[n, self.channels * self.d])?;
        let h = self.fc1.forward(s, flat)?;
        let h = s.tape.relu(h);
        let mut z = self.fc2.forward(s, h)?;
        if let Some(bn) = &self.bn {
            z = bn.forward(s, z)?;
        }
        Ok(s.tape.sigmoid(z))
    }
}

#[derive(Debug, Clone)]
pub enum Integrator<T> {
    Cfc(StyleIntegration<T>),
    Mlp(MlpIntegration),
}

/// Position of a residual block: 1-based stage, 0-based block within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockKey {
    pub stage: usize,
    pub block: usize,
}

impl fmt::Display for BlockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage{}.block{}", self.stage, self.block)
    }
}

/// Replacement applied to gates before they multiply the features.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum GateOverride {
    #[default]
    None,
    /// Every gate set to the constant.
    Constant(f64),
    /// Per example, the `floor(ratio * C)` lowest gates of every block in
    /// `stage` are set to zero (ties broken by channel index).
    PruneLowest { stage: usize, ratio: f64 },
}

/// Gates observed at one block during a forward pass.
#[derive(Debug, Clone)]
pub struct CapturedGates<T> {
    pub key: BlockKey,
    /// `[N, C]`, before any override.
    pub gates: Tensor<T>,
    /// Features entering the recalibration layer, when requested.
    pub input: Option<Tensor<T>>,
}

/// Gate instrumentation carried by a [`Session`].
#[derive(Debug, Clone, Default)]
pub struct GateControl<T> {
    pub override_gates: GateOverride,
    pub capture: Option<Vec<CapturedGates<T>>>,
    pub capture_inputs: bool,
}

impl<T: Element> GateControl<T> {
    fn apply(&mut self, tape: &mut Tape<T>, key: BlockKey, x: Var, gates: Var) -> Result<Var> {
        if let Some(records) = &mut self.capture {
            records.push(CapturedGates {
                key,
                gates: tape.value(gates).clone(),
                input: self.capture_inputs.then(|| tape.value(x).clone()),
            });
        }
        match self.override_gates {
            GateOverride::None => Ok(gates),
            GateOverride::Constant(v) => {
                let shape = tape.shape(gates).to_vec();
                Ok(tape.constant(Tensor::full(shape, T::of(v))?))
            }
            GateOverride::PruneLowest { stage, ratio } if stage == key.stage => {
                let mask = prune_mask(tape.value(gates), ratio)?;
                let mask = tape.constant(mask);
                tape.mul(gates, mask)
            }
            GateOverride::PruneLowest { .. } => Ok(gates),
        }
    }
}

/// Number of channels pruned at `ratio`.
pub fn pruned_count(channels: usize, ratio: f64) -> usize {
    ((ratio * channels as f64).floor() as usize).min(channels)
}

/// 0/1 mask `[N, C]` zeroing each row's `floor(ratio * C)` smallest gates.
pub fn prune_mask<T: Element>(gates: &Tensor<T>, ratio: f64) -> Result<Tensor<T>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("prune ratio {ratio} outside [0, 1]")));
    }
    let &[n, c] = gates.shape() else {
        return Err(Error::InvalidShape {
            shape: gates.shape().to_vec(),
            reason: "gates must be [N, C]".into(),
        });
    };
    let k = pruned_count(c, ratio);
    let mut mask = vec![T::one(); n * c];
    let mut order: Vec<usize> = Vec::with_capacity(c);
    for b in 0..n {
        let row = &gates.data()[b * c..][..c];
        order.clear();
        order.extend(0..c);
        order.sort_by(|&i, &j| row[i].partial_cmp(&row[j]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
        for &ch in &order[..k] {
            mask[b * c + ch] = T::zero();
        }
    }
    Tensor::new([n, c], mask)
}

/// A recalibration layer built from a [`RecalibVariant`].
#[derive(Debug, Clone)]
pub struct RecalibLayer<T> {
    pub variant: RecalibVariant,
    pub channels: usize,
    pub integrator: Integrator<T>,
}

impl<T: Element> RecalibLayer<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        variant: &RecalibVariant,
        init: &mut Init,
    ) -> Result<Self> {
        variant.validate()?;
        let d = variant.d();
        let integrator = match variant.integration {
            Integration::Cfc => Integrator::Cfc(StyleIntegration::new(store, name, channels, d, variant.use_bn, init)?),
            Integration::Mlp => Integrator::Mlp(MlpIntegration::new(
                store,
                name,
                channels,
                d,
                variant.reduction(),
                variant.use_bn,
                init,
            )?),
        };
        Ok(Self {
            variant: variant.clone(),
            channels,
            integrator,
        })
    }

    /// Gates `[N, C]` for features `x`.
    pub fn gates(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let t = style_pool(&mut s.tape, x, &self.variant.pooling_set())?;
        match &self.integrator {
            Integrator::Cfc(si) => si.forward(s, t),
            Integrator::Mlp(mlp) => mlp.forward(s, t),
        }
    }

    /// Recalibrated features; gates pass through the session's
    /// instrumentation under `key`.
    pub fn forward(&self, s: &mut Session<'_, T>, x: Var, key: BlockKey) -> Result<Var> {
        let g = self.gates(s, x)?;
        let g = s.gates.apply(&mut s.tape, key, x, g)?;
        recalibrate(&mut s.tape, x, g)
    }

    pub fn fold(&mut self, store: &ParamStore<T>) -> Result<()> {
        if let Integrator::Cfc(si) = &mut self.integrator {
            si.fold(store)?;
        }
        Ok(())
    }

    /// Elementwise operation count for one example with `hw` spatial
    /// positions: pooling reads every input once per statistic, the
    /// integrator's multiply-adds, normalization and sigmoid once per
    /// channel, and the final product once per output element.
    pub fn flops(&self, hw: usize) -> u64 {
        let c = self.channels as u64;
        let hw = hw as u64;
        let pooling = self.variant.d() as u64 * c * hw;
        let integ = match &self.integrator {
            Integrator::Cfc(si) => si.d as u64 * c + u64::from(si.bias.is_some()) * c,
            Integrator::Mlp(m) => m.fc1.macs() + m.fc2.macs() + m.hidden as u64 + c,
        };
        let bn = if self.variant.use_bn { c } else { 0 };
        pooling + integ + bn + c + c * hw
    }
}

/// SE excitation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SeParams<T> {
    /// `[C/r, C]`
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    /// `[C, C/r]`
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

/// Squeeze-and-excitation: average pool, `FC -> ReLU -> FC -> sigmoid`,
/// channel product.
pub fn se_block<T: Element>(x: &Tensor<T>, r: usize, params: &SeParams<T>) -> Result<Tensor<T>> {
    if r < 1 {
        return Err(Error::InvalidArgument("SE reduction ratio must be >= 1".into()));
    }
    let (_, c, _, _) = x.dims4()?;
    let mut store = ParamStore::new();
    let layer = RecalibLayer::new(&mut store, "se", c, &RecalibVariant::se(r), &mut Init::Zeros)?;
    let Integrator::Mlp(mlp) = &layer.integrator else { unreachable!() };
    store.set(mlp.fc1.weight, params.w1.clone())?;
    store.set(mlp.fc1.bias.expect("SE uses biases"), params.b1.clone())?;
    store.set(mlp.fc2.weight, params.w2.clone())?;
    store.set(mlp.fc2.bias.expect("SE uses biases"), params.b2.clone())?;
    let mut s = Session::new(&store, Mode::Eval, false);
    let xv = s.tape.constant(x.clone());
    let y = layer.forward(&mut s, xv, BlockKey { stage: 0, block: 0 })?;
    Ok(s.tape.value(y).clone())
}
