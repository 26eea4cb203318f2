use stylerecal::complexity::{analyze, count_params, se_closed_form, srm_closed_form, variant_closed_form};
use stylerecal::models::{ArchitectureConfig, ResNet};
use stylerecal::params::Init;
use stylerecal::recalib::RecalibVariant;

fn r50(v: Option<RecalibVariant>) -> ArchitectureConfig {
    ArchitectureConfig::resnet50(1000).with_recalib(v)
}

#[test]
fn resnet50_srm_and_se_overheads() {
    let srm = ResNet::<f32>::build_with(&r50(Some(RecalibVariant::srm())), &mut Init::Zeros).unwrap();
    assert_eq!(count_params(&srm, false).unwrap().added_by_recalib, 60_416);
    assert_eq!(count_params(&srm, true).unwrap().added_by_recalib, 90_624);
    let stages = r50(None).stage_dims();
    assert_eq!(srm_closed_form(&stages, false), 60_416);

    let se = ResNet::<f32>::build_with(&r50(Some(RecalibVariant::se(16))), &mut Init::Zeros).unwrap();
    assert_eq!(count_params(&se, false).unwrap().added_by_recalib, 2_530_992);
    assert_eq!(se_closed_form(&stages, 16), 2_530_992);
}

#[test]
fn resnet50_baseline_param_count() {
    // 25,557,032 trainable parameters for the standard 1000-class model
    let base = ResNet::<f32>::build_with(&r50(None), &mut Init::Zeros).unwrap();
    assert_eq!(count_params(&base, false).unwrap().trainable_params, 25_557_032);
}

#[test]
fn resnet50_flops() {
    let base = analyze(&r50(None), [3, 224, 224], false).unwrap();
    let g = base.flops.unwrap() as f64 / 1e9;
    println!("resnet50 gflops {g:.4}");
    assert!((g - 3.86).abs() <= 0.05 * 3.86, "{g}");
    let srm = analyze(&r50(Some(RecalibVariant::srm())), [3, 224, 224], false).unwrap();
    let extra = (srm.flops.unwrap() - base.flops.unwrap()) as f64 / 1e9;
    println!("srm overhead gflops {extra:.5}");
    assert_eq!(srm.recalib_flops.unwrap() as f64 / 1e9, extra);
    assert!(extra > 0.0 && extra <= 0.03, "{extra}");
}

#[test]
fn widening_a_stage_increases_counts() {
    let cfg = ArchitectureConfig::resnet20(10).with_recalib(Some(RecalibVariant::srm()));
    let mut wide = cfg.clone();
    wide.stages[1].channels += 8;
    let a = analyze(&cfg, [3, 32, 32], true).unwrap();
    let b = analyze(&wide, [3, 32, 32], true).unwrap();
    assert!(b.total_params > a.total_params);
    assert!(b.flops > a.flops);
    assert!(b.added_by_recalib > a.added_by_recalib);
    assert_eq!(b.added_by_recalib, variant_closed_form(&RecalibVariant::srm(), &wide.stage_dims(), true));
}
