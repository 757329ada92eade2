use proptest::prelude::*;

use super::*;

fn vol(dims: Dims, channels: usize, f: impl Fn(usize) -> f32) -> Volume {
    Volume::new(dims, Spacing::ABDOMEN, channels, (0..dims.voxels() * channels).map(f).collect()).unwrap()
}

#[test]
fn contrast_clips_at_nearest_rank_99th_percentile() {
    let slice: Vec<f32> = (1..=100).map(|v| v as f32).collect();
    assert_eq!(nearest_rank_percentile(&slice, 0.99), Some(99.0));
    let out = contrast_adjust(&slice);
    assert_eq!(out[99], 1.0);
    assert_eq!(out[98], 1.0);
    assert!((out[49] - 50.0 / 99.0).abs() < 1e-7);
    assert_eq!(out.iter().cloned().fold(f32::MIN, f32::max), 1.0);
}

#[test]
fn contrast_degenerate_slices() {
    assert!(contrast_adjust(&[3.5; 20]).iter().all(|&v| v == 1.0));
    assert!(contrast_adjust(&[0.0; 20]).iter().all(|&v| v == 0.0));
    assert!(contrast_adjust(&[]).is_empty());
}

#[test]
fn contrast_volume_leaves_fat_fraction_alone() {
    let dims = Dims::new(2, 4, 5);
    let v = vol(dims, 3, |i| (i % 17) as f32 * 0.06);
    let out = contrast_adjust_volume(&v);
    assert_eq!(out.channel(2), v.channel(2));
    for c in 0..2 {
        for z in 0..2 {
            assert_eq!(out.slice(c, z), contrast_adjust(v.slice(c, z)).as_slice());
        }
    }
}

proptest! {
    #[test]
    fn contrast_is_idempotent(values in prop::collection::vec(0.0f32..1000.0, 1..300)) {
        let once = contrast_adjust(&values);
        let twice = contrast_adjust(&once);
        let q = nearest_rank_percentile(&once, 0.99).unwrap();
        prop_assert!(q <= 1.0);
        if q == 1.0 {
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn ff_threshold_only_shrinks(labels in prop::collection::vec(0u8..3, 24), ff in prop::collection::vec(0.0f32..1.0, 24)) {
        let dims = Dims::new(2, 3, 4);
        let mask = LabelMask::new(dims, Spacing::ABDOMEN, labels).unwrap();
        let mut data = vec![0.0; 48];
        data.extend(ff);
        let v = Volume::new(dims, Spacing::ABDOMEN, 3, data).unwrap();
        let out = ff_threshold(&mask, &v).unwrap();
        let labeled = |m: &LabelMask| m.data().iter().filter(|&&l| l != 0).count();
        prop_assert!(labeled(&out) <= labeled(&mask));
        for (a, b) in mask.data().iter().zip(out.data()) {
            prop_assert!(*b == *a || *b == 0);
        }
    }
}

#[test]
fn assemble_orders_channels_and_round_trips() {
    let dims = Dims::new(3, 2, 2);
    let water = vol(dims, 1, |i| i as f32 * 0.1);
    let fat = vol(dims, 1, |i| 1.0 - i as f32 * 0.01);
    let ff = vol(dims, 1, |i| [0.0, 0.5, 1.0][i % 3]);
    let v = assemble_channels(&water, &fat, &ff).unwrap();
    assert_eq!(v.channels(), 3);
    assert_eq!(v.extract_channel(0), water);
    assert_eq!(v.extract_channel(1), fat);
    assert_eq!(v.extract_channel(2), ff);

    let short = vol(Dims::new(2, 2, 2), 1, |_| 0.0);
    let err = assemble_channels(&water, &fat, &short).unwrap_err();
    assert!(matches!(err, PreprocessError::DimMismatch { axis: "depth", .. }), "{err}");
    assert!(err.to_string().contains("depth"));
}

#[test]
fn pad_xy_centers_and_crops_back() {
    let dims = Dims::new(21, 256, 176);
    let v = vol(dims, 1, |i| (i % 251) as f32 + 1.0);
    let (p, pad) = pad_xy(&v, (256, 256)).unwrap();
    assert_eq!(p.dims(), Dims::new(21, 256, 256));
    assert_eq!((pad.top, pad.left), (0, 40));
    for z in [0, 20] {
        for y in [0, 128, 255] {
            for x in (0..40).chain(216..256) {
                assert_eq!(p.at(0, z, y, x), 0.0);
            }
            assert_eq!(p.at(0, z, y, 40), v.at(0, z, y, 0));
            assert_eq!(p.at(0, z, y, 215), v.at(0, z, y, 175));
        }
    }
    assert_eq!(crop_xy(&p, &pad).unwrap(), v);

    let square = vol(Dims::new(2, 256, 256), 3, |i| i as f32);
    let (same, pad) = pad_xy(&square, (256, 256)).unwrap();
    assert_eq!(same, square);
    assert_eq!(pad, XyPadding::none(square.dims()));

    let err = pad_xy(&vol(Dims::new(1, 300, 10), 1, |_| 0.0), (256, 256)).unwrap_err();
    assert!(matches!(err, PreprocessError::Oversize { axis: "height", .. }));
}

#[test]
fn label_pad_xy_round_trip() {
    let dims = Dims::new(2, 5, 3);
    let m = LabelMask::new(dims, Spacing::ABDOMEN, (0..30).map(|i| (i % 3) as u8).collect()).unwrap();
    let (p, pad) = m.pad_xy((8, 8)).unwrap();
    assert_eq!(p.count(Label::Background), 64 * 2 - 20);
    assert_eq!(p.crop_xy(&pad).unwrap(), m);
}

#[test]
fn pad_slices_repeats_last_slice() {
    for (depth, added) in [(20, 4), (21, 3), (24, 0)] {
        let dims = Dims::new(depth, 3, 3);
        let v = vol(dims, 3, |i| i as f32);
        let (p, pad) = pad_slices(&v, 24).unwrap();
        assert_eq!(p.dims().depth, 24);
        assert_eq!(pad.added, added);
        for c in 0..3 {
            for z in depth..24 {
                assert_eq!(p.slice(c, z), v.slice(c, depth - 1));
            }
        }
        assert_eq!(crop_slices(&p, &pad).unwrap(), v);
        if added == 0 {
            assert_eq!(p, v);
        }
    }
    let err = pad_slices(&vol(Dims::new(25, 1, 1), 1, |_| 0.0), 24).unwrap_err();
    assert!(matches!(err, PreprocessError::Oversize { axis: "depth", .. }));
}

#[test]
fn mask_background_full_and_empty() {
    let dims = Dims::new(2, 3, 3);
    let v = vol(dims, 3, |i| i as f32 + 1.0);
    assert_eq!(mask_background(&v, &BodyMask::full(dims)).unwrap(), v);
    let empty = BodyMask::new(dims, vec![false; 18]).unwrap();
    assert!(mask_background(&v, &empty).unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn ff_threshold_is_strict_below_half() {
    let dims = Dims::new(1, 1, 4);
    let mask = LabelMask::new(dims, Spacing::ABDOMEN, vec![1, 2, 1, 0]).unwrap();
    let mut data = vec![0.0; 8];
    data.extend([0.49, 0.5, 0.99, 0.1]);
    let v = Volume::new(dims, Spacing::ABDOMEN, 3, data).unwrap();
    assert_eq!(ff_threshold(&mask, &v).unwrap().data(), &[0, 2, 1, 0]);

    let mut ones = vec![0.0; 8];
    ones.extend([1.0; 4]);
    let v = Volume::new(dims, Spacing::ABDOMEN, 3, ones).unwrap();
    assert_eq!(ff_threshold(&mask, &v).unwrap(), mask);
}

#[test]
fn label_mask_rejects_out_of_domain_values() {
    let err = LabelMask::new(Dims::new(1, 1, 2), Spacing::ABDOMEN, vec![0, 3]).unwrap_err();
    assert_eq!(err, PreprocessError::InvalidLabel(3));
}

#[test]
fn prepare_scan_preserves_fat_fraction_inside_body() {
    let dims = Dims::new(2, 6, 4);
    let raw = vol(dims, 3, |i| ((i * 37) % 101) as f32 / 100.0);
    let body = BodyMask::new(dims, (0..48).map(|i| i % 5 != 0).collect()).unwrap();
    let prepared = prepare_scan(&raw, Some(&body), PreprocessOptions { pad_xy: (8, 8), mask_background: true }).unwrap();
    let back = crop_xy(&prepared.volume, &prepared.xy_padding).unwrap();
    for (i, &inside) in body.data().iter().enumerate() {
        let ff = back.channel(2)[i];
        if inside {
            assert_eq!(ff.to_bits(), raw.channel(2)[i].to_bits());
        } else {
            assert_eq!(ff, 0.0);
        }
    }
    let unmasked = prepare_scan(&raw, Some(&body), PreprocessOptions { pad_xy: (6, 4), mask_background: false }).unwrap();
    assert_eq!(unmasked.volume.channel(2), raw.channel(2));
}
