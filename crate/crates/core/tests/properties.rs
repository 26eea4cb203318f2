mod common;

use proptest::prelude::*;
use stylerecal::container::{Array, Container};
use stylerecal::data::{epoch_order, hflip, pad_crop};
use stylerecal::nn::{global_pool, PoolKind};
use stylerecal::recalib::{prune_mask, pruned_count, recalibrate_values, style_pool_values};
use stylerecal::Tensor;

fn nchw() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..4, 1usize..5, 1usize..6, 1usize..6)
}

fn tensor_of(shape: (usize, usize, usize, usize), seed: u64) -> Tensor<f64> {
    let (n, c, h, w) = shape;
    Tensor::new([n, c, h, w], common::randn_vec(&mut common::rng(seed), n * c * h * w)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shift_moves_mean_and_keeps_std(shape in nchw(), seed in any::<u64>(), shift in -5.0f64..5.0) {
        let x = tensor_of(shape, seed);
        let y = x.map(|v| v + shift);
        let (px, py) = (style_pool_values(&x, &[PoolKind::Avg, PoolKind::Std]).unwrap(),
                        style_pool_values(&y, &[PoolKind::Avg, PoolKind::Std]).unwrap());
        for (a, b) in px.data().chunks(2).zip(py.data().chunks(2)) {
            prop_assert!((b[0] - a[0] - shift).abs() < 1e-9);
            prop_assert!((b[1] - a[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn std_is_positive_and_bounded_by_range(shape in nchw(), seed in any::<u64>()) {
        let x = tensor_of(shape, seed);
        let std = global_pool(&x, PoolKind::Std).unwrap();
        let max = global_pool(&x, PoolKind::Max).unwrap();
        let neg = global_pool(&x.map(|v| -v), PoolKind::Max).unwrap();
        for i in 0..std.len() {
            let range = max.data()[i] + neg.data()[i];
            prop_assert!(std.data()[i] > 0.0);
            prop_assert!(std.data()[i] <= range / 2.0 + 1e-6);
        }
    }

    #[test]
    fn unit_gates_are_identity(shape in nchw(), seed in any::<u64>()) {
        let x = tensor_of(shape, seed);
        let g = Tensor::ones([shape.0, shape.1]).unwrap();
        prop_assert_eq!(recalibrate_values(&x, &g).unwrap(), x);
    }

    #[test]
    fn prune_mask_zeroes_the_lowest(n in 1usize..5, c in 1usize..40, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let gates: Vec<f64> = common::randn_vec(&mut r, n * c).iter().map(|v| common::sigmoid(*v)).collect();
        let mask = prune_mask(&Tensor::new([n, c], gates.clone()).unwrap(), ratio).unwrap();
        let k = pruned_count(c, ratio);
        prop_assert_eq!(k, (ratio * c as f64).floor() as usize);
        for b in 0..n {
            let row = &mask.data()[b * c..][..c];
            prop_assert_eq!(row.iter().filter(|&&m| m == 0.0).count(), k);
            let kept_min = (0..c).filter(|&i| row[i] == 1.0).map(|i| gates[b * c + i]).fold(f64::INFINITY, f64::min);
            let dropped_max = (0..c).filter(|&i| row[i] == 0.0).map(|i| gates[b * c + i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(dropped_max <= kept_min);
        }
    }

    #[test]
    fn container_round_trips(values in prop::collection::vec(-1e6f32..1e6, 1..50), ids in prop::collection::vec(any::<u64>(), 0..20), name in "[a-z]{1,8}") {
        let mut c = Container::new("test");
        c.push(format!("{name}/f"), Array::from_tensor(&Tensor::new([values.len()], values.clone()).unwrap()));
        c.push("ids", Array::u64s(ids.clone()));
        c.push("note", Array::text(&name));
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        let f = back.require(&format!("{name}/f")).unwrap().to_tensor::<f32>().unwrap();
        prop_assert_eq!(f.data(), &values[..]);
        prop_assert_eq!(back.require("ids").unwrap().as_u64().unwrap(), &ids[..]);
        prop_assert_eq!(back.require("note").unwrap().as_text().unwrap(), name.as_str());
        prop_assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn truncated_containers_are_rejected(values in prop::collection::vec(any::<u32>(), 1..20), cut in 1usize..16) {
        let mut c = Container::new("test");
        c.push("v", Array::u32s(values));
        let bytes = c.to_bytes();
        let cut = cut.min(bytes.len());
        prop_assert!(Container::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn epoch_order_is_a_permutation(n in 0usize..200, seed in any::<u64>(), epoch in 0u64..100) {
        let mut o = epoch_order(n, seed, epoch);
        prop_assert_eq!(o.clone(), epoch_order(n, seed, epoch));
        o.sort_unstable();
        prop_assert_eq!(o, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn centered_crop_and_double_flip_are_identity(c in 1usize..4, h in 1usize..9, w in 1usize..9, pad in 0usize..5, seed in any::<u64>()) {
        let img: Vec<f32> = common::randn_vec(&mut common::rng(seed), c * h * w).iter().map(|&v| v as f32).collect();
        prop_assert_eq!(pad_crop(&img, c, h, w, pad, pad, pad), img.clone());
        prop_assert_eq!(hflip(&hflip(&img, c, h, w), c, h, w), img);
    }
}
