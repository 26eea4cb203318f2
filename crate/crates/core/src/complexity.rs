//! Parameter and operation accounting.
//!
//! Parameters are counted by enumerating the model's named tensors;
//! closed forms for the recalibration overhead are provided alongside so
//! the two can be reconciled. Operation counts use one multiply-accumulate
//! = one FLOP for convolutions and fully connected layers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::models::{ArchitectureConfig, LayerFlops, ResNet};
use crate::nn::Chw;
use crate::params::{Init, ParamKind};
use crate::recalib::{Integration, RecalibVariant};
use crate::tensor::Element;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub name: String,
    pub count: u64,
    pub running_stat: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    /// Whether `total_params` and `added_by_recalib` include normalization
    /// running statistics.
    pub include_running_stats: bool,
    pub total_params: u64,
    pub trainable_params: u64,
    /// `total_params` minus that of the same architecture without
    /// recalibration.
    pub added_by_recalib: u64,
    pub params: Vec<ParamCount>,
    /// Input `[C, H, W]` the operation counts refer to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<Chw>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recalib_flops: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerFlops>,
}

fn total<T: Element>(model: &ResNet<T>, include_running_stats: bool) -> u64 {
    model.store.num_values(include_running_stats) as u64
}

/// Enumerated parameter counts of `model`.
pub fn count_params<T: Element>(model: &ResNet<T>, include_running_stats: bool) -> Result<ComplexityReport> {
    let total_params = total(model, include_running_stats);
    let added_by_recalib = if model.config.recalib.is_some() {
        let base = ResNet::<T>::build_with(&model.config.clone().with_recalib(None), &mut Init::Zeros)?;
        total_params - total(&base, include_running_stats)
    } else {
        0
    };
    let params = model
        .store
        .iter()
        .map(|(_, e)| ParamCount {
            name: e.name.clone(),
            count: e.value.len() as u64,
            running_stat: e.kind == ParamKind::RunningStat,
        })
        .collect();
    Ok(ComplexityReport {
        include_running_stats,
        total_params,
        trainable_params: total(model, false),
        added_by_recalib,
        params,
        input: None,
        flops: None,
        recalib_flops: None,
        layers: Vec::new(),
    })
}

/// Parameter counts plus per-layer operation counts for one example of
/// shape `input`.
pub fn count_flops<T: Element>(model: &ResNet<T>, input: Chw, include_running_stats: bool) -> Result<ComplexityReport> {
    let mut report = count_params(model, include_running_stats)?;
    let layers = model.flops(input)?;
    report.flops = Some(layers.iter().map(|l| l.flops).sum());
    report.recalib_flops = Some(layers.iter().filter(|l| l.recalib).map(|l| l.flops).sum());
    report.input = Some(input);
    report.layers = layers;
    Ok(report)
}

/// Builds `config` with zero weights and reports its complexity.
pub fn analyze(config: &ArchitectureConfig, input: Chw, include_running_stats: bool) -> Result<ComplexityReport> {
    let model = ResNet::<f32>::build_with(config, &mut Init::Zeros)?;
    count_flops(&model, input, include_running_stats)
}

/// `(4 or 6) * sum_s N_s * C_s`: channel-wise weights (2 per channel) and
/// normalization affine terms (2), plus running mean and variance (2) when
/// included.
pub fn srm_closed_form(stages: &[(usize, usize)], include_running_stats: bool) -> u64 {
    let coeff = if include_running_stats { 6 } else { 4 };
    coeff * stages.iter().map(|&(n, c)| (n * c) as u64).sum::<u64>()
}

/// `2/r * sum_s N_s * C_s^2 + sum_s N_s * (C_s/r + C_s)`: both excitation
/// weight matrices and their biases. Assumes `r` divides every `C_s`.
pub fn se_closed_form(stages: &[(usize, usize)], r: usize) -> u64 {
    let r = r as u64;
    let weights: u64 = stages.iter().map(|&(n, c)| 2 * (n * c * c) as u64 / r).sum();
    let biases: u64 = stages.iter().map(|&(n, c)| n as u64 * (c as u64 / r + c as u64)).sum();
    weights + biases
}

/// Parameters one recalibration layer of `variant` adds on `c` channels.
pub fn variant_layer_params(variant: &RecalibVariant, c: usize, include_running_stats: bool) -> u64 {
    let c = c as u64;
    let d = variant.d() as u64;
    let bn = if variant.use_bn {
        if include_running_stats {
            4 * c
        } else {
            2 * c
        }
    } else {
        0
    };
    match variant.integration {
        Integration::Cfc => {
            let bias = if variant.use_bn { 0 } else { c };
            d * c + bias + bn
        }
        Integration::Mlp => {
            let h = (c / variant.reduction() as u64).max(1);
            c * d * h + h + h * c + c + bn
        }
    }
}

/// Closed-form overhead of `variant` over all blocks.
pub fn variant_closed_form(variant: &RecalibVariant, stages: &[(usize, usize)], include_running_stats: bool) -> u64 {
    stages
        .iter()
        .map(|&(n, c)| n as u64 * variant_layer_params(variant, c, include_running_stats))
        .sum()
}

impl ComplexityReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text summary and per-layer table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let running = if self.include_running_stats { "yes" } else { "no" };
        writeln!(out, "{:<28}{:>16}", "total params", self.total_params).unwrap();
        writeln!(out, "{:<28}{:>16}", "trainable params", self.trainable_params).unwrap();
        writeln!(out, "{:<28}{:>16}", "added by recalibration", self.added_by_recalib).unwrap();
        writeln!(out, "{:<28}{:>16}", "running stats counted", running).unwrap();
        if let (Some(f), Some(rf)) = (self.flops, self.recalib_flops) {
            writeln!(out, "{:<28}{:>16}", "flops", f).unwrap();
            writeln!(out, "{:<28}{:>16.4}", "gflops", f as f64 / 1e9).unwrap();
            writeln!(out, "{:<28}{:>16}", "recalibration flops", rf).unwrap();
        }
        if !self.layers.is_empty() {
            let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(0).max(5);
            writeln!(out).unwrap();
            writeln!(out, "{:<width$}  {:>14}", "layer", "flops").unwrap();
            for l in &self.layers {
                writeln!(out, "{:<width$}  {:>14}", l.name, l.flops).unwrap();
            }
        }
        out
    }
}
