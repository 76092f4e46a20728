use proptest::prelude::*;
use relab_core::erasing::{
    apply_mask, augment_batch, make_mask, mask_sample, region_dims, sample_erase_region, EraseRegion, SampleSite,
};
use relab_core::rng::stream;
use relab_core::{ErasePolicy, FillStrategy, Geometry, ImageBatch, MaskSpec, Scheme};

/// Largest gap between `w * h` and the real-valued target area `a * W * H`
/// that rounding each side to the nearest integer can produce.
fn rounding_slack(r: &EraseRegion, width: usize, height: usize) -> f64 {
    (r.width + r.height + 1) as f64 / (width * height) as f64
}

#[test]
fn ten_thousand_draws_stay_inside_with_bounded_area() {
    let p = ErasePolicy::random_erase(0.1, 0.4);
    let mut rng = stream(11, &[]);
    let slack = 2.0 * 65.0 / 4096.0;
    for _ in 0..10_000 {
        let r = sample_erase_region(64, 64, &p, &mut rng).unwrap();
        assert!(r.x + r.width <= 64 && r.y + r.height <= 64, "{r:?}");
        assert!(r.width >= 1 && r.height >= 1);
        let frac = r.area() as f64 / 4096.0;
        assert!(frac >= 0.1 - slack && frac <= 0.4 + slack, "{frac}");
    }
}

#[test]
fn forced_full_area_sits_at_origin() {
    let p = ErasePolicy::random_erase(1.0, 1.0);
    let r = sample_erase_region(64, 64, &p, &mut stream(3, &[])).unwrap();
    assert_eq!(r, EraseRegion { x: 0, y: 0, width: 64, height: 64 });
}

#[test]
fn region_dims_follow_rounded_square_root() {
    assert_eq!(region_dims(64, 64, 0.25, 1.0), (32, 32));
    // 0.1 * 4096 = 409.6, sqrt = 20.24
    assert_eq!(region_dims(64, 64, 0.1, 1.0), (20, 20));
    // aspect 4: sqrt(409.6 * 4) = 40.48, sqrt(409.6 / 4) = 10.12
    assert_eq!(region_dims(64, 64, 0.1, 4.0), (40, 10));
    assert_eq!(region_dims(8, 8, 1e-6, 1.0), (1, 1));
}

#[test]
fn non_single_region_schemes_are_rejected_by_the_region_sampler() {
    let p = ErasePolicy::entire_erase(0.5);
    assert!(sample_erase_region(64, 64, &p, &mut stream(0, &[])).is_err());
    assert!(sample_erase_region(3, 64, &ErasePolicy::random_erase(0.1, 0.2), &mut stream(0, &[])).is_err());
}

#[test]
fn invalid_policies_are_rejected() {
    for p in [
        ErasePolicy::random_erase(0.5, 0.2),
        ErasePolicy::random_erase(0.0, 0.2),
        ErasePolicy::random_erase(0.1, 1.5),
        ErasePolicy { aspect: 0.0, ..ErasePolicy::random_erase(0.1, 0.4) },
        ErasePolicy::random_pixels(1.5),
        ErasePolicy { patches: 0, ..ErasePolicy::multi_patch(4, 0.1, 0.4) },
        ErasePolicy::random_erase(0.1, 0.4).with_fill(FillStrategy::constant(2.0)),
    ] {
        assert!(p.validate().is_err(), "{p:?}");
    }
    assert!(ErasePolicy::no_defense().validate().is_ok());
}

#[test]
fn four_by_four_constant_fill_example() {
    let g = Geometry::new(4, 4, 1);
    let img = vec![1.0f32; 16];
    let mask = MaskSpec::Regions(vec![EraseRegion { x: 1, y: 1, width: 2, height: 2 }]);
    let out = apply_mask(&img, g, &mask, &FillStrategy::constant(0.0), &mut stream(0, &[])).unwrap();
    for row in 0..4 {
        for col in 0..4 {
            let expect = if (1..3).contains(&row) && (1..3).contains(&col) { 0.0 } else { 1.0 };
            assert_eq!(out[row * 4 + col], expect, "({row}, {col})");
        }
    }
}

#[test]
fn whole_mask_with_imagenet_means_sets_every_channel() {
    let means = vec![0.485, 0.456, 0.406];
    let g = Geometry::new(5, 3, 3);
    let img: Vec<f32> = (0..g.len()).map(|i| (i % 7) as f32 / 7.0).collect();
    let out = apply_mask(&img, g, &MaskSpec::Whole, &FillStrategy::channel_mean(means.clone()), &mut stream(0, &[]))
        .unwrap();
    for (c, m) in means.iter().enumerate() {
        assert!(out[c * 15..(c + 1) * 15].iter().all(|v| v == m));
    }
}

#[test]
fn empty_mask_and_no_defense_are_identities() {
    let g = Geometry::new(6, 6, 2);
    let img: Vec<f32> = (0..g.len()).map(|i| (i as f32 * 0.37).fract()).collect();
    let out = apply_mask(&img, g, &MaskSpec::Empty, &FillStrategy::uniform(), &mut stream(0, &[])).unwrap();
    assert_eq!(out, img);
    let batch = ImageBatch::new(g, img.repeat(3), vec![0, 1, 0]).unwrap();
    assert_eq!(augment_batch(&batch, &ErasePolicy::no_defense(), 4, 9).unwrap(), batch);
}

#[test]
fn mask_geometry_mismatch_is_shape_error() {
    let g = Geometry::new(4, 4, 1);
    let mask = MaskSpec::Regions(vec![EraseRegion { x: 3, y: 0, width: 2, height: 1 }]);
    assert!(apply_mask(&[0.5; 16], g, &mask, &FillStrategy::constant(0.0), &mut stream(0, &[])).is_err());
    assert!(apply_mask(&[0.5; 15], g, &MaskSpec::Whole, &FillStrategy::constant(0.0), &mut stream(0, &[])).is_err());
}

#[test]
fn random_pixels_hit_their_rate() {
    let p = ErasePolicy::random_pixels(0.3);
    let mut rng = stream(5, &[]);
    let site = SampleSite { index: 0, label: 0, rank: 0, class_size: 1 };
    let mut total = 0usize;
    for _ in 0..1000 {
        total += make_mask(&p, &site, 0, 64, 64, 1, &mut rng).unwrap().masked_count(64, 64);
    }
    let frac = total as f64 / (1000.0 * 4096.0);
    // binomial sd over 4.1e6 pixels is about 2.3e-4
    assert!((frac - 0.3).abs() < 0.01, "{frac}");
}

#[test]
fn random_erase_epoch_covers_a_quarter_on_average() {
    let g = Geometry::new(32, 32, 1);
    let n = 2048;
    let batch = ImageBatch::new(g, vec![0.5; n * g.len()], vec![0; n]).unwrap();
    let p = ErasePolicy::random_erase(0.1, 0.4).with_fill(FillStrategy::constant(0.0));
    let out = augment_batch(&batch, &p, 0, 17).unwrap();
    let zeros = out.data.iter().filter(|&&v| v == 0.0).count();
    let frac = zeros as f64 / out.data.len() as f64;
    assert!((0.24..=0.26).contains(&frac), "{frac}");
    assert_eq!(out.labels, batch.labels);
}

#[test]
fn fixed_erase_is_stable_across_epochs() {
    let p = ErasePolicy::fixed_erase(0.1, 0.4);
    for index in 0..20 {
        let site = SampleSite { index, label: 0, rank: index, class_size: 20 };
        let a = make_mask(&p, &site, 0, 32, 32, 99, &mut stream(1, &[0])).unwrap();
        let b = make_mask(&p, &site, 57, 32, 32, 99, &mut stream(2, &[57])).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn entire_erase_whitens_the_configured_share_per_identity() {
    let p = ErasePolicy::entire_erase(0.4);
    let labels: Vec<u32> = (0..3).flat_map(|l| std::iter::repeat_n(l, 10)).collect();
    let sites = SampleSite::from_labels(&labels);
    for epoch in 0..5 {
        let mut per_label = [0usize; 3];
        let mut rng = stream(0, &[]);
        for s in &sites {
            match make_mask(&p, s, epoch, 8, 8, 4, &mut rng).unwrap() {
                MaskSpec::Whole => per_label[s.label as usize] += 1,
                MaskSpec::Empty => {}
                other => panic!("unexpected {other:?}"),
            }
        }
        assert_eq!(per_label, [4, 4, 4]);
    }
}

#[test]
fn serial_and_parallel_masking_agree() {
    let g = Geometry::new(16, 16, 3);
    let n = 64;
    let data: Vec<f32> = (0..n * g.len()).map(|i| ((i * 31) % 101) as f32 / 100.0).collect();
    let labels: Vec<u32> = (0..n as u32).map(|i| i % 4).collect();
    let batch = ImageBatch::new(g, data, labels).unwrap();
    let p = ErasePolicy::random_erase(0.1, 0.5).with_fill(FillStrategy::uniform());
    let parallel = augment_batch(&batch, &p, 3, 21).unwrap();
    let mut serial = batch.clone();
    let fill = p.fill.resolved(&batch.channel_means());
    for site in SampleSite::from_labels(&batch.labels) {
        mask_sample(serial.image_mut(site.index), g, &site, &p, &fill, 3, 21).unwrap();
    }
    assert_eq!(parallel, serial);
    assert_eq!(parallel, augment_batch(&batch, &p, 3, 21).unwrap());
    assert_ne!(parallel, augment_batch(&batch, &p, 4, 21).unwrap());
}

#[test]
fn unresolved_mean_fill_uses_batch_means() {
    let g = Geometry::new(8, 8, 2);
    let mut data = vec![0.2f32; 64];
    data.extend(vec![0.7f32; 64]);
    let batch = ImageBatch::new(g, data, vec![0]).unwrap();
    let out = augment_batch(&batch, &ErasePolicy::random_erase(0.5, 0.5), 0, 1).unwrap();
    assert!(out.data.iter().all(|&v| (v - 0.2).abs() < 1e-6 || (v - 0.7).abs() < 1e-6));
}

fn policy_strategy() -> impl Strategy<Value = ErasePolicy> {
    (0.01f64..1.0, 0.0f64..1.0, 0usize..5, 1usize..9, 0.25f64..4.0).prop_map(|(a, b, kind, patches, aspect)| {
        let (lo, hi) = (a.min(a + b * (1.0 - a)), a + b * (1.0 - a));
        match kind {
            0 => ErasePolicy::random_erase(lo, hi),
            1 => ErasePolicy::fixed_erase(lo, hi),
            2 => ErasePolicy::multi_patch(patches, lo, hi),
            3 => ErasePolicy::random_pixels(b),
            _ => ErasePolicy::entire_erase(b),
        }
        .with_fill(FillStrategy::constant(0.0))
        .with_aspect(aspect)
    })
}

trait WithAspect {
    fn with_aspect(self, aspect: f64) -> Self;
}

impl WithAspect for ErasePolicy {
    fn with_aspect(self, aspect: f64) -> Self {
        ErasePolicy { aspect, ..self }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn regions_are_contained_and_follow_the_area_law(
        w in 4usize..96, h in 4usize..96, a in 0.01f64..1.0, b in 0.0f64..1.0, seed: u64,
    ) {
        let hi = a + b * (1.0 - a);
        let p = ErasePolicy::random_erase(a, hi);
        let mut rng = stream(seed, &[]);
        for _ in 0..20 {
            let r = sample_erase_region(w, h, &p, &mut rng).unwrap();
            prop_assert!(r.x + r.width <= w && r.y + r.height <= h);
            prop_assert!(r.width >= 1 && r.height >= 1);
            let frac = r.area() as f64 / (w * h) as f64;
            let slack = rounding_slack(&r, w, h);
            // clamping to the image can only shrink a region below its target
            let clamped = r.width == w || r.height == h || r.width == 1 || r.height == 1;
            prop_assert!(frac <= hi + slack || clamped, "{frac} > {hi} + {slack}");
            prop_assert!(frac >= a - slack || clamped, "{frac} < {a} - {slack}");
        }
    }

    #[test]
    fn square_regions_match_an_enumerated_area(side in 4usize..80, seed: u64) {
        let area = (side * side) as f64;
        let p = ErasePolicy::random_erase(0.1, 0.8);
        let r = sample_erase_region(side, side, &p, &mut stream(seed, &[])).unwrap();
        prop_assert_eq!(r.width, r.height);
        // sides reachable by some a_e in [0.1, 0.8], by enumeration on a fine grid
        let reachable: Vec<usize> = (0..=7000)
            .map(|k| ((0.1 + 0.7 * k as f64 / 7000.0) * area).sqrt().round() as usize)
            .collect();
        prop_assert!(reachable.contains(&r.width), "side {} unreachable", r.width);
    }

    #[test]
    fn every_scheme_preserves_unmasked_pixels(p in policy_strategy(), seed: u64, epoch in 0u64..50) {
        let g = Geometry::new(12, 10, 3);
        let img: Vec<f32> = (0..g.len()).map(|i| 0.05 + 0.9 * ((i * 7919) % 97) as f32 / 97.0).collect();
        let site = SampleSite { index: 3, label: 1, rank: 2, class_size: 5 };
        let mut rng = stream(seed, &[]);
        let mask = make_mask(&p, &site, epoch, g.width, g.height, seed, &mut rng).unwrap();
        let out = apply_mask(&img, g, &mask, &p.fill, &mut rng).unwrap();
        let bits = mask.to_bitmap(g.width, g.height);
        for c in 0..3 {
            for (i, &hit) in bits.iter().enumerate() {
                let (a, b) = (img[c * 120 + i], out[c * 120 + i]);
                if hit {
                    prop_assert_eq!(b, 0.0);
                } else {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        if let MaskSpec::Regions(rs) = &mask {
            for r in rs {
                prop_assert!(r.fits(g.width, g.height));
            }
        }
    }

    #[test]
    fn multi_patch_regions_use_scaled_ranges(patches in 1usize..9, seed: u64) {
        let p = ErasePolicy::multi_patch(patches, 0.1, 0.4);
        let site = SampleSite { index: 0, label: 0, rank: 0, class_size: 1 };
        let mask = make_mask(&p, &site, 0, 64, 64, 0, &mut stream(seed, &[])).unwrap();
        let MaskSpec::Regions(rs) = mask else { panic!("expected regions") };
        prop_assert_eq!(rs.len(), patches);
        let (lo, hi) = (0.1 / patches as f64, 0.4 / patches as f64);
        for r in &rs {
            let frac = r.area() as f64 / 4096.0;
            let slack = rounding_slack(r, 64, 64);
            prop_assert!(frac >= lo - slack && frac <= hi + slack, "{frac} vs [{lo}, {hi}]");
        }
    }

    #[test]
    fn masks_are_deterministic_in_their_seeds(p in policy_strategy(), seed: u64, epoch in 0u64..10) {
        let site = SampleSite { index: 1, label: 0, rank: 1, class_size: 4 };
        let a = make_mask(&p, &site, epoch, 20, 20, seed, &mut stream(seed, &[epoch])).unwrap();
        let b = make_mask(&p, &site, epoch, 20, 20, seed, &mut stream(seed, &[epoch])).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn uniform_fill_draws_differ_between_pixels() {
    let g = Geometry::new(8, 8, 1);
    let out = apply_mask(&[0.5; 64], g, &MaskSpec::Whole, &FillStrategy::uniform(), &mut stream(8, &[])).unwrap();
    let mut sorted = out.clone();
    sorted.sort_by(f32::total_cmp);
    sorted.dedup();
    assert!(sorted.len() > 60);
    assert!(out.iter().all(|v| (0.0..1.0).contains(v)));
}

#[test]
fn scheme_names_round_trip_through_json() {
    let p = ErasePolicy::random_erase(0.1, 0.4);
    let v: serde_json::Value = serde_json::to_value(&p).unwrap();
    for key in ["scheme", "a_lo", "a_hi", "aspect", "patches", "pixel_prob", "ee_fraction", "fill"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert!(v["fill"].get("kind").is_some() && v["fill"].get("constant_value").is_some());
    let with_means = p.with_fill(FillStrategy::channel_mean(vec![0.485, 0.456, 0.406]));
    let v = serde_json::to_value(&with_means).unwrap();
    assert_eq!(v["fill"]["channel_means"].as_array().unwrap().len(), 3);
    assert_eq!(serde_json::from_value::<ErasePolicy>(v).unwrap(), with_means);
    assert_eq!(serde_json::to_value(Scheme::RandomErase).unwrap(), "RandomErase");
}
