//! Residual network builder with optional per-block recalibration.
//!
//! The recalibration layer sits on the residual branch after its last
//! normalization and before the shortcut addition.

use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisRecord;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Chw, Conv2d, Linear};
use crate::params::{Init, Mode, ParamId, ParamStore, Session};
use crate::recalib::{BlockKey, CapturedGates, GateOverride, RecalibLayer, RecalibVariant};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand (expansion 4).
    Bottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StemKind {
    /// 3x3 conv, stride 1.
    Cifar,
    /// 7x7 conv stride 2, then 3x3 max pool stride 2.
    Imagenet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConfig {
    pub kind: StemKind,
    pub channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    /// Number of residual blocks `N_s`.
    pub blocks: usize,
    /// Output channels `C_s`.
    pub channels: usize,
    /// Stride of the stage's first block.
    pub stride: usize,
}

/// Structure of a residual network. Serialized as JSON, e.g.
///
/// ```json
/// {
///   "in_channels": 3,
///   "stem": {"kind": "cifar", "channels": 16},
///   "stages": [
///     {"blocks": 3, "channels": 16, "stride": 1},
///     {"blocks": 3, "channels": 32, "stride": 2},
///     {"blocks": 3, "channels": 64, "stride": 2}
///   ],
///   "block_kind": "basic",
///   "recalib": {"pooling": ["avg", "std"], "integration": "cfc", "use_bn": true},
///   "num_classes": 10
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stem: StemConfig,
    pub stages: Vec<StageConfig>,
    pub block_kind: BlockKind,
    #[serde(default)]
    pub recalib: Option<RecalibVariant>,
    pub num_classes: usize,
}

fn default_in_channels() -> usize {
    3
}

impl ArchitectureConfig {
    /// CIFAR basic-block ResNet of depth `6n + 2` with 16/32/64 stages.
    pub fn cifar_resnet(n: usize, num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            stem: StemConfig {
                kind: StemKind::Cifar,
                channels: 16,
            },
            stages: vec![
                StageConfig { blocks: n, channels: 16, stride: 1 },
                StageConfig { blocks: n, channels: 32, stride: 2 },
                StageConfig { blocks: n, channels: 64, stride: 2 },
            ],
            block_kind: BlockKind::Basic,
            recalib: None,
            num_classes,
        }
    }

    pub fn resnet20(num_classes: usize) -> Self {
        Self::cifar_resnet(3, num_classes)
    }

    pub fn resnet32(num_classes: usize) -> Self {
        Self::cifar_resnet(5, num_classes)
    }

    pub fn resnet56(num_classes: usize) -> Self {
        Self::cifar_resnet(9, num_classes)
    }

    /// ImageNet ResNet-50: bottleneck stages of 3/4/6/3 blocks with
    /// 256/512/1024/2048 output channels.
    pub fn resnet50(num_classes: usize) -> Self {
        let stage = |blocks, channels, stride| StageConfig { blocks, channels, stride };
        Self {
            in_channels: 3,
            stem: StemConfig {
                kind: StemKind::Imagenet,
                channels: 64,
            },
            stages: vec![stage(3, 256, 1), stage(4, 512, 2), stage(6, 1024, 2), stage(3, 2048, 2)],
            block_kind: BlockKind::Bottleneck,
            recalib: None,
            num_classes,
        }
    }

    /// Small CIFAR-sized bottleneck network, 2 blocks per stage,
    /// 64/128/256 output channels.
    pub fn cifar_bottleneck(num_classes: usize) -> Self {
        let stage = |channels, stride| StageConfig { blocks: 2, channels, stride };
        Self {
            in_channels: 3,
            stem: StemConfig {
                kind: StemKind::Cifar,
                channels: 16,
            },
            stages: vec![stage(64, 1), stage(128, 2), stage(256, 2)],
            block_kind: BlockKind::Bottleneck,
            recalib: None,
            num_classes,
        }
    }

    pub fn with_recalib(mut self, recalib: Option<RecalibVariant>) -> Self {
        self.recalib = recalib;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.stages.is_empty() {
            return bad("architecture needs at least one stage".into());
        }
        if self.in_channels == 0 || self.stem.channels == 0 || self.num_classes == 0 {
            return bad("in_channels, stem channels and num_classes must be >= 1".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 || s.stride == 0 {
                return bad(format!("stage {} has a zero blocks/channels/stride entry", i + 1));
            }
            if self.block_kind == BlockKind::Bottleneck && s.channels < 4 {
                return bad(format!("bottleneck stage {} needs >= 4 channels", i + 1));
            }
        }
        if let Some(v) = &self.recalib {
            v.validate()?;
        }
        Ok(())
    }

    /// `(N_s, C_s)` per stage.
    pub fn stage_dims(&self) -> Vec<(usize, usize)> {
        self.stages.iter().map(|s| (s.blocks, s.channels)).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub enum BranchLayers {
    Basic {
        conv1: Conv2d,
        bn1: BatchNorm,
        conv2: Conv2d,
        bn2: BatchNorm,
    },
    Bottleneck {
        conv1: Conv2d,
        bn1: BatchNorm,
        conv2: Conv2d,
        bn2: BatchNorm,
        conv3: Conv2d,
        bn3: BatchNorm,
    },
}

#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub key: BlockKey,
    pub branch: BranchLayers,
    pub recalib: Option<RecalibLayer<T>>,
    /// 1x1 conv + BN projection; `None` is an identity shortcut.
    pub projection: Option<(Conv2d, BatchNorm)>,
    pub out_channels: usize,
}

impl<T: Element> ResidualBlock<T> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore<T>,
        key: BlockKey,
        kind: BlockKind,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        recalib: Option<&RecalibVariant>,
        init: &mut Init,
    ) -> Result<Self> {
        let name = key.to_string();
        let n = |s: &str| format!("{name}.{s}");
        let branch = match kind {
            BlockKind::Basic => {
                let conv1 = Conv2d::new(store, &n("conv1"), in_ch, out_ch, 3, stride, 1, init)?;
                let bn1 = BatchNorm::new(store, &n("bn1"), out_ch)?;
                let conv2 = Conv2d::new(store, &n("conv2"), out_ch, out_ch, 3, 1, 1, init)?;
                let bn2 = BatchNorm::new(store, &n("bn2"), out_ch)?;
                BranchLayers::Basic { conv1, bn1, conv2, bn2 }
            }
            BlockKind::Bottleneck => {
                let mid = out_ch / 4;
                let conv1 = Conv2d::new(store, &n("conv1"), in_ch, mid, 1, stride, 0, init)?;
                let bn1 = BatchNorm::new(store, &n("bn1"), mid)?;
                let conv2 = Conv2d::new(store, &n("conv2"), mid, mid, 3, 1, 1, init)?;
                let bn2 = BatchNorm::new(store, &n("bn2"), mid)?;
                let conv3 = Conv2d::new(store, &n("conv3"), mid, out_ch, 1, 1, 0, init)?;
                let bn3 = BatchNorm::new(store, &n("bn3"), out_ch)?;
                BranchLayers::Bottleneck {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    conv3,
                    bn3,
                }
            }
        };
        let recalib = recalib
            .map(|v| RecalibLayer::new(store, &n("recalib"), out_ch, v, init))
            .transpose()?;
        let projection = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2d::new(store, &n("shortcut.conv"), in_ch, out_ch, 1, stride, 0, init)?,
                BatchNorm::new(store, &n("shortcut.bn"), out_ch)?,
            ))
        } else {
            None
        };
        Ok(Self {
            key,
            branch,
            recalib,
            projection,
            out_channels: out_ch,
        })
    }

    /// Residual branch up to (and excluding) recalibration.
    pub fn branch_forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match &self.branch {
            BranchLayers::Basic { conv1, bn1, conv2, bn2 } => {
                let y = conv1.forward(s, x)?;
                let y = bn1.forward(s, y)?;
                let y = s.tape.relu(y);
                let y = conv2.forward(s, y)?;
                bn2.forward(s, y)
            }
            BranchLayers::Bottleneck {
                conv1,
                bn1,
                conv2,
                bn2,
                conv3,
                bn3,
            } => {
                let y = conv1.forward(s, x)?;
                let y = bn1.forward(s, y)?;
                let y = s.tape.relu(y);
                let y = conv2.forward(s, y)?;
                let y = bn2.forward(s, y)?;
                let y = s.tape.relu(y);
                let y = conv3.forward(s, y)?;
                bn3.forward(s, y)
            }
        }
    }

    pub fn forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.branch_forward(s, x)?;
        if let Some(r) = &self.recalib {
            y = r.forward(s, y, self.key)?;
        }
        let shortcut = match &self.projection {
            Some((conv, bn)) => {
                let p = conv.forward(s, x)?;
                bn.forward(s, p)?
            }
            None => x,
        };
        let sum = s.tape.add(y, shortcut)?;
        Ok(s.tape.relu(sum))
    }

    fn convs(&self) -> Vec<&Conv2d> {
        match &self.branch {
            BranchLayers::Basic { conv1, conv2, .. } => vec![conv1, conv2],
            BranchLayers::Bottleneck { conv1, conv2, conv3, .. } => vec![conv1, conv2, conv3],
        }
    }
}

/// One entry of a per-layer operation count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub name: String,
    pub flops: u64,
    /// Whether the entry belongs to a recalibration layer.
    pub recalib: bool,
}

/// A residual network and its parameters.
#[derive(Debug, Clone)]
pub struct ResNet<T> {
    pub config: ArchitectureConfig,
    pub store: ParamStore<T>,
    stem_conv: Conv2d,
    stem_bn: BatchNorm,
    stem_pool: bool,
    blocks: Vec<ResidualBlock<T>>,
    fc: Linear,
}

impl<T: Element> ResNet<T> {
    pub fn build(config: &ArchitectureConfig, seed: u64) -> Result<Self> {
        Self::build_with(config, &mut Init::seeded(seed))
    }

    pub fn build_with(config: &ArchitectureConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (stem_conv, stem_pool) = match config.stem.kind {
            StemKind::Cifar => (
                Conv2d::new(&mut store, "stem.conv", config.in_channels, config.stem.channels, 3, 1, 1, init)?,
                false,
            ),
            StemKind::Imagenet => (
                Conv2d::new(&mut store, "stem.conv", config.in_channels, config.stem.channels, 7, 2, 3, init)?,
                true,
            ),
        };
        let stem_bn = BatchNorm::new(&mut store, "stem.bn", config.stem.channels)?;
        let mut blocks = Vec::new();
        let mut in_ch = config.stem.channels;
        for (si, stage) in config.stages.iter().enumerate() {
            for b in 0..stage.blocks {
                let stride = if b == 0 { stage.stride } else { 1 };
                let key = BlockKey { stage: si + 1, block: b };
                blocks.push(ResidualBlock::new(
                    &mut store,
                    key,
                    config.block_kind,
                    in_ch,
                    stage.channels,
                    stride,
                    config.recalib.as_ref(),
                    init,
                )?);
                in_ch = stage.channels;
            }
        }
        let fc = Linear::new(&mut store, "fc", in_ch, config.num_classes, true, init)?;
        Ok(Self {
            config: config.clone(),
            store,
            stem_conv,
            stem_bn,
            stem_pool,
            blocks,
            fc,
        })
    }

    pub fn blocks(&self) -> &[ResidualBlock<T>] {
        &self.blocks
    }

    pub fn block(&self, key: BlockKey) -> Option<&ResidualBlock<T>> {
        self.blocks.iter().find(|b| b.key == key)
    }

    pub fn has_recalib(&self) -> bool {
        self.blocks.iter().any(|b| b.recalib.is_some())
    }

    pub fn stage_has_recalib(&self, stage: usize) -> bool {
        self.blocks.iter().any(|b| b.key.stage == stage && b.recalib.is_some())
    }

    /// Weighted layers on the main path (stem, branch convolutions,
    /// classifier); projection shortcuts are not counted.
    pub fn depth(&self) -> usize {
        1 + self.blocks.iter().map(|b| b.convs().len()).sum::<usize>() + 1
    }

    pub fn stem_forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.stem_conv.forward(s, x)?;
        let y = self.stem_bn.forward(s, y)?;
        let y = s.tape.relu(y);
        if self.stem_pool {
            s.tape.max_pool2d(y, 3, 2, 1)
        } else {
            Ok(y)
        }
    }

    pub fn head_forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let pooled = s.tape.global_avg(x)?;
        self.fc.forward(s, pooled)
    }

    /// Logits `[N, num_classes]` for NCHW input `x`.
    pub fn forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut y = self.stem_forward(s, x)?;
        for b in &self.blocks {
            y = b.forward(s, y)?;
        }
        self.head_forward(s, y)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: x.shape().to_vec(),
                rhs: vec![self.config.in_channels],
            });
        }
        Ok(())
    }

    /// Inference logits.
    pub fn logits(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.logits_with(x, mode, GateOverride::None)
    }

    pub fn logits_with(&self, x: &Tensor<T>, mode: Mode, gates: GateOverride) -> Result<Tensor<T>> {
        if mode == Mode::Train {
            return Err(Error::InvalidArgument("inference requires eval or folded mode".into()));
        }
        self.check_input(x)?;
        let mut s = Session::new(&self.store, mode, false);
        s.gates.override_gates = gates;
        let xv = s.tape.constant(x.clone());
        let y = self.forward(&mut s, xv)?;
        Ok(s.tape.value(y).clone())
    }

    /// Logits plus every recalibration layer's gates per image, keyed by
    /// block. `image_ids` label the rows of the record.
    pub fn forward_with_capture(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        image_ids: &[u64],
    ) -> Result<(Tensor<T>, AnalysisRecord)> {
        let (logits, captured) = self.capture_raw(x, mode, false)?;
        if captured.is_empty() {
            log::warn!("gate capture requested on a model without recalibration layers");
        }
        let record = AnalysisRecord::from_captures(image_ids, &captured)?;
        Ok((logits, record))
    }

    /// Logits plus the raw captured gates (and optionally the features that
    /// entered each recalibration layer).
    pub fn capture_raw(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        with_inputs: bool,
    ) -> Result<(Tensor<T>, Vec<CapturedGates<T>>)> {
        if mode == Mode::Train {
            return Err(Error::InvalidArgument("gate capture requires eval or folded mode".into()));
        }
        self.check_input(x)?;
        let mut s = Session::new(&self.store, mode, false);
        s.gates.capture = Some(Vec::new());
        s.gates.capture_inputs = with_inputs;
        let xv = s.tape.constant(x.clone());
        let y = self.forward(&mut s, xv)?;
        let logits = s.tape.value(y).clone();
        Ok((logits, s.gates.capture.take().unwrap_or_default()))
    }

    /// Folds recalibration normalization into the channel-wise maps using
    /// the current running statistics. Must be re-run after further
    /// training.
    pub fn fold_bn(&mut self) -> Result<()> {
        for b in &mut self.blocks {
            if let Some(r) = &mut b.recalib {
                r.fold(&self.store)?;
            }
        }
        Ok(())
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
        for (id, value) in updates {
            self.store.set(id, value)?;
        }
        Ok(())
    }

    /// Per-layer operation counts for one example of shape `input`.
    /// Convolutions and the classifier count one multiply-accumulate as one
    /// operation; normalization, activations, pooling, residual additions
    /// and gate products count one per output element, reductions one per
    /// input element.
    pub fn flops(&self, input: Chw) -> Result<Vec<LayerFlops>> {
        let mut out = Vec::new();
        let mut push = |name: String, flops: u64, recalib: bool| out.push(LayerFlops { name, flops, recalib });
        let numel = |s: Chw| (s[0] * s[1] * s[2]) as u64;

        let mut shape = self.stem_conv.out_shape(input)?;
        push("stem.conv".into(), self.stem_conv.macs(input)?, false);
        push("stem.bn".into(), numel(shape), false);
        push("stem.relu".into(), numel(shape), false);
        if self.stem_pool {
            let (h, w) = crate::autograd::conv_out_hw(shape[1], shape[2], 3, 2, 1)
                .ok_or_else(|| Error::InvalidArgument("input too small for stem pooling".into()))?;
            shape = [shape[0], h, w];
            push("stem.maxpool".into(), numel(shape), false);
        }
        for b in &self.blocks {
            let name = b.key.to_string();
            let block_in = shape;
            let mut cur = shape;
            for (i, conv) in b.convs().into_iter().enumerate() {
                push(format!("{name}.conv{}", i + 1), conv.macs(cur)?, false);
                cur = conv.out_shape(cur)?;
                push(format!("{name}.bn{}", i + 1), numel(cur), false);
                if i + 1 < b.convs().len() {
                    push(format!("{name}.relu{}", i + 1), numel(cur), false);
                }
            }
            if let Some(r) = &b.recalib {
                push(format!("{name}.recalib"), r.flops(cur[1] * cur[2]), true);
            }
            if let Some((conv, _)) = &b.projection {
                push(format!("{name}.shortcut.conv"), conv.macs(block_in)?, false);
                push(format!("{name}.shortcut.bn"), numel(cur), false);
            }
            push(format!("{name}.add"), numel(cur), false);
            push(format!("{name}.relu"), numel(cur), false);
            shape = cur;
        }
        push("head.avgpool".into(), numel(shape), false);
        push("fc".into(), self.fc.macs() + self.fc.out_features as u64, false);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_depths() {
        let m = ResNet::<f32>::build_with(&ArchitectureConfig::resnet20(10), &mut Init::Zeros).unwrap();
        assert_eq!(m.depth(), 20);
        let m = ResNet::<f32>::build_with(&ArchitectureConfig::resnet56(10), &mut Init::Zeros).unwrap();
        assert_eq!(m.depth(), 56);
        assert_eq!(m.blocks().len(), 27);
    }

    #[test]
    fn projection_only_where_shape_changes() {
        let m = ResNet::<f32>::build_with(&ArchitectureConfig::resnet20(10), &mut Init::Zeros).unwrap();
        let projected: Vec<_> = m.blocks().iter().filter(|b| b.projection.is_some()).map(|b| b.key).collect();
        assert_eq!(
            projected,
            vec![BlockKey { stage: 2, block: 0 }, BlockKey { stage: 3, block: 0 }]
        );
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let cfg = ArchitectureConfig::resnet20(10).with_recalib(Some(RecalibVariant::srm()));
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(ArchitectureConfig::from_json(&text).unwrap(), cfg);
        let mut bad = cfg.clone();
        bad.stages.clear();
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.recalib.as_mut().unwrap().pooling.clear();
        assert!(ResNet::<f32>::build(&bad, 0).is_err());
    }

    #[test]
    fn logits_shape() {
        let cfg = ArchitectureConfig::cifar_resnet(1, 7).with_recalib(Some(RecalibVariant::srm()));
        let m = ResNet::<f32>::build(&cfg, 3).unwrap();
        let x = Tensor::zeros([3, 3, 8, 8]).unwrap();
        assert_eq!(m.logits(&x, Mode::Eval).unwrap().shape(), &[3, 7]);
        assert!(m.logits(&x, Mode::Train).is_err());
    }
}
