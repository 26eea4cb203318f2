mod common;

use common::perturb_norms;
use stylerecal::analysis::{accuracy, prune_eval, pruned_block_deviation};
use stylerecal::data::{synth_style, Split, SynthStyleSpec};
use stylerecal::models::{ArchitectureConfig, ResNet};
use stylerecal::params::Mode;
use stylerecal::recalib::{GateOverride, RecalibVariant};
use stylerecal::Tensor;

fn small(recalib: &str) -> ArchitectureConfig {
    let mut cfg = ArchitectureConfig::cifar_resnet(2, 4);
    cfg.recalib = Some(recalib.parse::<RecalibVariant>().unwrap());
    cfg
}

fn input(n: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn([n, 3, 12, 12], 1.0, &mut common::rng(seed)).unwrap()
}

#[test]
fn pruning_nothing_is_bit_identical() {
    for v in ["srm", "se"] {
        let mut m = ResNet::<f64>::build(&small(v), 3).unwrap();
        perturb_norms(&mut m.store, 4);
        let x = input(4, 5);
        let base = m.logits(&x, Mode::Eval).unwrap();
        for stage in 1..=3 {
            let pruned = m.logits_with(&x, Mode::Eval, GateOverride::PruneLowest { stage, ratio: 0.0 }).unwrap();
            assert_eq!(base.data(), pruned.data(), "{v} stage {stage}");
        }
    }
}

#[test]
fn full_pruning_turns_identity_blocks_into_identities() {
    for v in ["srm", "se", "avg+std+max/cfc"] {
        let mut m = ResNet::<f32>::build(&small(v), 6).unwrap();
        perturb_norms(&mut m.store, 7);
        let x = input(3, 8).cast();
        for stage in 1..=3 {
            let devs = pruned_block_deviation(&m, &x, stage).unwrap();
            // stage 1 has no projection at all; later stages only on block 0
            assert_eq!(devs.len(), if stage == 1 { 2 } else { 1 });
            for (key, d) in devs {
                assert_eq!(d, 0.0, "{v} {key}");
            }
        }
    }
}

#[test]
fn partial_pruning_changes_outputs() {
    let mut m = ResNet::<f64>::build(&small("srm"), 9).unwrap();
    perturb_norms(&mut m.store, 10);
    let x = input(2, 11);
    let base = m.logits(&x, Mode::Eval).unwrap();
    let pruned = m.logits_with(&x, Mode::Eval, GateOverride::PruneLowest { stage: 2, ratio: 0.5 }).unwrap();
    assert!(base.max_abs_diff(&pruned).unwrap() > 0.0);
}

#[test]
fn prune_eval_rejects_stage_without_recalibration() {
    let m = ResNet::<f32>::build(&ArchitectureConfig::cifar_resnet(1, 2), 0).unwrap();
    let spec = SynthStyleSpec::grid(2, 4, 8, 1);
    let ds = synth_style(&spec).unwrap();
    assert!(prune_eval(&m, &ds, 1, 0.5, 8).is_err());
}

#[test]
fn prune_ratio_zero_reproduces_accuracy() {
    let mut m = ResNet::<f32>::build(&small("srm"), 12).unwrap();
    perturb_norms(&mut m.store, 13);
    let ds = synth_style(&SynthStyleSpec::grid(4, 16, 12, 2).with_split(Split::Test, 3)).unwrap();
    let base = accuracy(&m, &ds, Mode::Eval, GateOverride::None, 16).unwrap();
    for stage in 1..=3 {
        assert_eq!(prune_eval(&m, &ds, stage, 0.0, 16).unwrap(), base);
    }
}

#[test]
fn folded_model_matches_eval_model() {
    for v in ["srm", "avg/cfc+bn", "avg+std+max/cfc+bn", "avg+std/cfc"] {
        let mut m = ResNet::<f64>::build(&small(v), 14).unwrap();
        perturb_norms(&mut m.store, 15);
        m.fold_bn().unwrap();
        let x = input(3, 16);
        let eval = m.logits(&x, Mode::Eval).unwrap();
        let folded = m.logits(&x, Mode::Folded).unwrap();
        assert!(eval.max_abs_diff(&folded).unwrap() < 1e-10, "{v}");
    }
}

#[test]
fn folded_mode_requires_folding() {
    let m = ResNet::<f32>::build(&small("srm"), 0).unwrap();
    assert!(m.logits(&input(1, 0).cast(), Mode::Folded).is_err());
}

#[test]
fn builds_are_deterministic_per_seed() {
    let a = ResNet::<f32>::build(&small("srm"), 21).unwrap();
    let b = ResNet::<f32>::build(&small("srm"), 21).unwrap();
    let c = ResNet::<f32>::build(&small("srm"), 22).unwrap();
    let values = |m: &ResNet<f32>| m.store.iter().flat_map(|(_, e)| e.value.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(values(&a), values(&b));
    assert_ne!(values(&a), values(&c));
}

#[test]
fn gate_capture_covers_every_block() {
    let m = ResNet::<f32>::build(&small("srm"), 1).unwrap();
    let x: Tensor<f32> = input(5, 2).cast();
    let (logits, record) = m.forward_with_capture(&x, Mode::Eval, &[10, 11, 12, 13, 14]).unwrap();
    assert_eq!(logits.shape(), &[5, 4]);
    assert_eq!(record.layers.len(), 6);
    for (key, layer) in &record.layers {
        assert_eq!(layer.rows(), 5);
        assert_eq!(layer.channels, m.block(*key).unwrap().out_channels);
        assert!(layer.values.iter().all(|g| (0.0..=1.0).contains(g)));
    }
}
