//! Post-hoc gate analysis: per-image channel pruning, gate correlation
//! statistics and top-activated example retrieval.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::container::{Array, ArrayData, Container};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::ResNet;
use crate::params::{Mode, Session};
use crate::recalib::{BlockKey, CapturedGates, GateOverride};
use crate::tensor::{Element, Tensor};

/// Gate matrix of one layer, `rows x channels`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGates {
    pub channels: usize,
    pub values: Vec<f64>,
}

impl LayerGates {
    pub fn rows(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    pub fn column(&self, ch: usize) -> Vec<f64> {
        self.values.iter().skip(ch).step_by(self.channels).copied().collect()
    }
}

/// Per-image gate vectors of every recalibration layer over one evaluation
/// set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnalysisRecord {
    pub image_ids: Vec<u64>,
    pub layers: BTreeMap<BlockKey, LayerGates>,
}

impl AnalysisRecord {
    pub fn new(image_ids: Vec<u64>, layers: BTreeMap<BlockKey, LayerGates>) -> Result<Self> {
        let r = Self { image_ids, layers };
        r.validate()?;
        Ok(r)
    }

    pub fn from_captures<T: Element>(image_ids: &[u64], captured: &[CapturedGates<T>]) -> Result<Self> {
        let mut layers = BTreeMap::new();
        for cap in captured {
            let &[_, c] = cap.gates.shape() else {
                return Err(Error::InvalidShape {
                    shape: cap.gates.shape().to_vec(),
                    reason: "captured gates must be [N, C]".into(),
                });
            };
            let values = cap.gates.data().iter().map(|v| v.as_f64()).collect();
            if layers.insert(cap.key, LayerGates { channels: c, values }).is_some() {
                return Err(Error::InvalidArgument(format!("layer {} captured twice", cap.key)));
            }
        }
        Self::new(image_ids.to_vec(), layers)
    }

    /// Checks that every layer has one row per image and gates lie in
    /// `[0, 1]` (the open interval in exact arithmetic; a saturated sigmoid
    /// may round to an endpoint).
    pub fn validate(&self) -> Result<()> {
        let n = self.image_ids.len();
        for (key, layer) in &self.layers {
            if layer.channels == 0 || layer.values.len() != n * layer.channels {
                return Err(Error::InvalidArgument(format!(
                    "layer {key}: {} values for {n} images x {} channels",
                    layer.values.len(),
                    layer.channels
                )));
            }
            if let Some(v) = layer.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidArgument(format!("layer {key}: gate {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn layer(&self, key: BlockKey) -> Result<&LayerGates> {
        self.layers
            .get(&key)
            .ok_or_else(|| Error::InvalidArgument(format!("record has no layer {key}")))
    }

    /// Appends the rows of `other`, which must cover the same layers.
    pub fn append(&mut self, other: AnalysisRecord) -> Result<()> {
        if self.layers.is_empty() && self.image_ids.is_empty() {
            *self = other;
            return Ok(());
        }
        let same = self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|((ka, a), (kb, b))| ka == kb && a.channels == b.channels);
        if !same {
            return Err(Error::InvalidArgument("appended record covers different layers".into()));
        }
        self.image_ids.extend(other.image_ids);
        for (key, layer) in other.layers {
            self.layers.get_mut(&key).unwrap().values.extend(layer.values);
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("analysis");
        c.push("image_ids", Array::u64s(self.image_ids.clone()));
        for (key, layer) in &self.layers {
            c.push(
                format!("gates/{key}"),
                Array {
                    shape: vec![self.image_ids.len(), layer.channels],
                    data: ArrayData::F64(layer.values.clone()),
                },
            );
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let image_ids = c.require("image_ids")?.as_u64()?.to_vec();
        let mut layers = BTreeMap::new();
        for (name, array) in &c.entries {
            let Some(rest) = name.strip_prefix("gates/") else {
                continue;
            };
            let key = parse_key(rest)?;
            let &[_, channels] = array.shape.as_slice() else {
                return Err(Error::InvalidArgument(format!("{name} must be rank 2")));
            };
            layers.insert(
                key,
                LayerGates {
                    channels,
                    values: array.as_f64()?.to_vec(),
                },
            );
        }
        Self::new(image_ids, layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?.expect_kind("analysis")?)
    }
}

/// Parses `stage{s}.block{b}`.
pub fn parse_key(s: &str) -> Result<BlockKey> {
    let bad = || Error::InvalidArgument(format!("bad layer key {s:?}, expected stage<S>.block<B>"));
    let (a, b) = s.split_once('.').ok_or_else(bad)?;
    let stage = a.strip_prefix("stage").and_then(|v| v.parse().ok()).ok_or_else(bad)?;
    let block = b.strip_prefix("block").and_then(|v| v.parse().ok()).ok_or_else(bad)?;
    Ok(BlockKey { stage, block })
}

/// Top-1 accuracy of `model` over `dataset`, evaluated in batches of
/// `batch_size` with the given gate override.
pub fn accuracy<T: Element>(
    model: &ResNet<T>,
    dataset: &Dataset,
    mode: Mode,
    gates: GateOverride,
    batch_size: usize,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let batch_size = batch_size.max(1);
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, labels) = dataset.batch::<T>(chunk)?;
        let logits = model.logits_with(&x, mode, gates)?;
        correct += count_correct(logits.data(), model.config.num_classes, &labels);
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Number of rows whose arg-max (first maximum) equals the label.
pub fn count_correct<T: Element>(logits: &[T], classes: usize, labels: &[usize]) -> usize {
    logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy with the `floor(ratio * C)` lowest gates of every block in
/// `stage` zeroed per image.
pub fn prune_eval<T: Element>(
    model: &ResNet<T>,
    dataset: &Dataset,
    stage: usize,
    ratio: f64,
    batch_size: usize,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("prune ratio {ratio} outside [0, 1]")));
    }
    if !model.stage_has_recalib(stage) {
        return Err(Error::InvalidArgument(format!("stage {stage} has no recalibration layers")));
    }
    accuracy(model, dataset, Mode::Eval, GateOverride::PruneLowest { stage, ratio }, batch_size)
}

/// Runs `x` through `model` with every gate of `stage` pruned and returns,
/// for each identity-shortcut block of that stage, the largest absolute
/// difference between its output and its input.
pub fn pruned_block_deviation<T: Element>(model: &ResNet<T>, x: &Tensor<T>, stage: usize) -> Result<Vec<(BlockKey, f64)>> {
    if !model.stage_has_recalib(stage) {
        return Err(Error::InvalidArgument(format!("stage {stage} has no recalibration layers")));
    }
    let mut s = Session::new(&model.store, Mode::Eval, false);
    s.gates.override_gates = GateOverride::PruneLowest { stage, ratio: 1.0 };
    let mut y = s.tape.constant(x.clone());
    y = model.stem_forward(&mut s, y)?;
    let mut out = Vec::new();
    for b in model.blocks() {
        let next = b.forward(&mut s, y)?;
        if b.key.stage == stage && b.projection.is_none() {
            out.push((b.key, s.tape.value(next).max_abs_diff(s.tape.value(y))?));
        }
        y = next;
    }
    Ok(out)
}

/// Accuracy at each ratio, as `(ratio, top1)` rows.
pub fn prune_curve<T: Element>(
    model: &ResNet<T>,
    dataset: &Dataset,
    stage: usize,
    ratios: &[f64],
    batch_size: usize,
) -> Result<Vec<(f64, f64)>> {
    ratios
        .iter()
        .map(|&r| Ok((r, prune_eval(model, dataset, stage, r, batch_size)?)))
        .collect()
}

pub fn prune_curve_csv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from("ratio,top1\n");
    for (r, a) in rows {
        writeln!(out, "{r},{a}").unwrap();
    }
    out
}

/// Square matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl Matrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| self.at(i, j).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Pearson correlation across images between every pair of channels of
/// one layer. Channels whose gates do not vary get correlation 0 with every
/// other channel and 1 on the diagonal.
pub fn correlation_matrix(record: &AnalysisRecord, key: BlockKey) -> Result<Matrix> {
    let layer = record.layer(key)?;
    let n = layer.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs at least 2 images, record has {n}"
        )));
    }
    let c = layer.channels;
    let mut centered = vec![0.0; n * c];
    let mut norms = vec![0.0; c];
    for ch in 0..c {
        let mean = (0..n).map(|i| layer.values[i * c + ch]).sum::<f64>() / n as f64;
        for i in 0..n {
            let d = layer.values[i * c + ch] - mean;
            centered[ch * n + i] = d;
            norms[ch] += d * d;
        }
        norms[ch] = norms[ch].sqrt();
    }
    let constant: Vec<usize> = (0..c).filter(|&ch| norms[ch] == 0.0).collect();
    if !constant.is_empty() {
        log::warn!(
            "layer {key}: {} constant-gate channel(s) assigned correlation 0",
            constant.len()
        );
    }
    let mut values = vec![0.0; c * c];
    for i in 0..c {
        values[i * c + i] = 1.0;
        if norms[i] == 0.0 {
            continue;
        }
        let ci = &centered[i * n..(i + 1) * n];
        for j in i + 1..c {
            if norms[j] == 0.0 {
                continue;
            }
            let cj = &centered[j * n..(j + 1) * n];
            let dot: f64 = ci.iter().zip(cj).map(|(a, b)| a * b).sum();
            let r = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            values[i * c + j] = r;
            values[j * c + i] = r;
        }
    }
    Ok(Matrix { n: c, values })
}

/// Sum over layers of the squared entries of each correlation matrix.
pub fn sum_squared_corr(record: &AnalysisRecord) -> Result<f64> {
    let mut total = 0.0;
    for &key in record.layers.keys() {
        total += correlation_matrix(record, key)?.values.iter().map(|r| r * r).sum::<f64>();
    }
    Ok(total)
}

/// Identifiers of the `k` images with the highest gate on `channel`,
/// descending, ties broken by lower image index.
pub fn top_activated(record: &AnalysisRecord, key: BlockKey, channel: usize, k: usize) -> Result<Vec<u64>> {
    let layer = record.layer(key)?;
    if channel >= layer.channels {
        return Err(Error::InvalidArgument(format!(
            "channel {channel} out of range for layer {key} with {} channels",
            layer.channels
        )));
    }
    if k > record.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds record size {}", record.len())));
    }
    let col = layer.column(channel);
    let mut order: Vec<usize> = (0..col.len()).collect();
    order.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
    Ok(order[..k].iter().map(|&i| record.image_ids[i]).collect())
}

/// Mean Jaccard similarity of the top-`k` image sets over all channel pairs
/// of one layer. Lower means channels respond to more diverse images.
pub fn top_k_overlap(record: &AnalysisRecord, key: BlockKey, k: usize) -> Result<f64> {
    let c = record.layer(key)?.channels;
    if c < 2 {
        return Err(Error::InvalidArgument("overlap needs at least 2 channels".into()));
    }
    let sets: Vec<BTreeSet<u64>> = (0..c)
        .map(|ch| Ok(top_activated(record, key, ch, k)?.into_iter().collect()))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..c {
        for j in i + 1..c {
            let inter = sets[i].intersection(&sets[j]).count() as f64;
            let union = sets[i].union(&sets[j]).count() as f64;
            total += if union == 0.0 { 0.0 } else { inter / union };
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Per-layer summary rows: `layer,channels,sum_sq_corr,top1_overlap`.
pub fn layer_summary_csv(record: &AnalysisRecord) -> Result<String> {
    let mut out = String::from("layer,channels,sum_sq_corr,top1_overlap\n");
    for (&key, layer) in &record.layers {
        let ss: f64 = correlation_matrix(record, key)?.values.iter().map(|r| r * r).sum();
        let overlap = if layer.channels >= 2 && !record.is_empty() {
            top_k_overlap(record, key, 1)?.to_string()
        } else {
            String::new()
        };
        writeln!(out, "{key},{},{ss},{overlap}", layer.channels).unwrap();
    }
    Ok(out)
}
