use bseg::data::mvol::{decode, encode_labels, encode_volume};
use bseg::data::*;
use bseg::error::MvolError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn volume_of(values: &[f32]) -> Volume {
    Volume::new([values.len(), 1, 1], [1.0; 3], values.to_vec()).unwrap()
}

#[test]
fn normalisation_table() {
    let v = normalize_intensities(&volume_of(&[1000.0, -1000.0, 0.0, 2500.0, -3000.0]));
    assert_eq!(v.data(), &[1.0, -1.0, 0.0, 1.0, -1.0]);
    assert!(v.is_normalized());
}

#[test]
fn identity_resample_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = Volume::new([5, 4, 3], [1.0; 3], (0..60).map(|_| rng.random()).collect()).unwrap();
    assert_eq!(v.resample_isotropic([1.0; 3], Interpolation::Trilinear).unwrap(), v);
}

#[test]
fn two_mm_to_one_mm_doubles_dims() {
    let v = Volume::new([10; 3], [2.0; 3], vec![0.5; 1000]).unwrap();
    let r = v.resample_isotropic([1.0; 3], Interpolation::Trilinear).unwrap();
    assert_eq!(r.dims(), [20; 3]);
    assert!(r.data().iter().all(|&x| x == 0.5));
}

#[test]
fn non_positive_spacing_rejected() {
    let v = Volume::new([2; 3], [1.0; 3], vec![0.0; 8]).unwrap();
    assert!(v.resample_isotropic([0.0, 1.0, 1.0], Interpolation::Trilinear).is_err());
    assert!(v.resample_isotropic([-1.0, 1.0, 1.0], Interpolation::Nearest).is_err());
    assert!(Volume::new([2; 3], [1.0, 0.0, 1.0], vec![0.0; 8]).is_err());
}

#[test]
fn labels_reject_trilinear() {
    let l = LabelVolume::new([2; 3], [1.0; 3], vec![0; 8]).unwrap();
    assert!(l.resample_isotropic([0.5; 3], Interpolation::Trilinear).is_err());
}

#[test]
fn boundary_simple_cases() {
    let empty = LabelVolume::new([6; 3], [1.0; 3], vec![0; 216]).unwrap();
    let e: bseg::Tensor<f32> = extract_boundary_targets(&empty);
    assert!(e.data().iter().all(|&v| v == 0.0));

    let mut labels = vec![0u8; 216];
    labels[2 + 6 * (3 + 6 * 2)] = KIDNEY;
    let single = LabelVolume::new([6; 3], [1.0; 3], labels).unwrap();
    let e: bseg::Tensor<f32> = extract_boundary_targets(&single);
    assert_eq!(e.data()[..216].iter().filter(|&&v| v == 1.0).count(), 1);
    assert_eq!(e.data()[2 + 6 * (3 + 6 * 2)], 1.0);
    assert!(e.data()[216..].iter().all(|&v| v == 0.0));
}

#[test]
fn phantom_is_deterministic_and_sphere_sized() {
    let spec = PhantomSpec::centered(48, 5);
    let (v1, l1) = generate_phantom(&spec).unwrap();
    let (v2, l2) = generate_phantom(&spec).unwrap();
    assert_eq!(v1, v2);
    assert_eq!(l1, l2);

    let r = spec.tumor.as_ref().unwrap().radius_mm;
    assert!(r >= 4.0);
    let analytic = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
    let counted = l1.count(TUMOR) as f64;
    assert!((counted / analytic - 1.0).abs() < 0.10, "{counted} vs {analytic}");
}

#[test]
fn phantom_geometry_errors() {
    let mut spec = PhantomSpec::centered(24, 0);
    spec.tumor.as_mut().unwrap().center_mm = [1.0, 1.0, 1.0];
    spec.tumor.as_mut().unwrap().radius_mm = 0.5;
    assert!(generate_phantom(&spec).is_err());
    let mut spec = PhantomSpec::centered(24, 0);
    spec.kidneys[0].semi_axes_mm[0] = -1.0;
    assert!(generate_phantom(&spec).is_err());
}

#[test]
fn crop_centred_on_tumor_voxel() {
    let (img, lbl) = generate_phantom(&PhantomSpec::centered(24, 1)).unwrap();
    let flat = lbl.labels().iter().position(|&l| l == TUMOR).unwrap();
    let center = [flat % 24, (flat / 24) % 24, flat / 576];
    let case = PreparedCase::new(normalize_intensities(&img), lbl).unwrap();
    let crop = case.crop_at(center, 9).unwrap();
    let mid = 4 + 9 * (4 + 9 * 4);
    assert_eq!(crop.seg_targets.data()[729 + mid], 1.0);
    assert_eq!(crop.seg_targets.data()[mid], 1.0);
}

#[test]
fn border_crops_are_zero_padded() {
    let img = Volume::new([4; 3], [1.0; 3], vec![0.5; 64]).unwrap();
    let lbl = LabelVolume::new([4; 3], [1.0; 3], vec![1; 64]).unwrap();
    let case = PreparedCase::new(img, lbl).unwrap();
    let crop = case.crop_at([0, 0, 0], 4).unwrap();
    let nonzero = crop.image.data().iter().filter(|&&v| v != 0.0).count();
    assert_eq!(nonzero, 8);
}

#[test]
fn mvol_round_trips_and_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = Volume::new([8; 3], [0.8, 1.0, 2.5], (0..512).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let bytes = encode_volume(&v);
    match decode(&bytes).unwrap() {
        MvolData::Intensity(back) => {
            assert_eq!(back, v);
            assert_eq!(encode_volume(&back), bytes);
        }
        other => panic!("unexpected {other:?}"),
    }
    let l = LabelVolume::new([2; 3], [1.0; 3], vec![0, 1, 2, 0, 1, 2, 0, 1]).unwrap();
    let lb = encode_labels(&l);
    assert_eq!(decode(&lb).unwrap(), MvolData::Labels(l));

    // 2×2×2 header, seven f32 values.
    let small = encode_volume(&Volume::new([2; 3], [1.0; 3], vec![0.0; 8]).unwrap());
    let cut = &small[..small.len() - 4];
    assert!(matches!(decode(cut), Err(MvolError::TruncatedPayload { expected: 32, got: 28 })));
    let mut bad = small.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(MvolError::BadMagic { .. })));
}

#[test]
fn mvol_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = generate_phantom(&PhantomSpec::centered(12, 2)).unwrap();
    let (ip, lp) = (dir.path().join("a.img.mvol"), dir.path().join("a.lbl.mvol"));
    write_volume(&ip, &img).unwrap();
    write_labels(&lp, &lbl).unwrap();
    assert_eq!(read_volume(&ip).unwrap(), img);
    assert_eq!(read_labels(&lp).unwrap(), lbl);
    assert!(read_labels(&ip).is_err());
}

fn random_labels(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> LabelVolume {
    let n = dims.iter().product();
    LabelVolume::new(dims, [1.0; 3], (0..n).map(|_| rng.random_range(0..3u8)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn normalisation_is_idempotent_and_bounded(v in prop::collection::vec(-5000.0f32..5000.0, 1..64)) {
        let once = normalize_intensities(&volume_of(&v));
        let twice = normalize_intensities(&once);
        prop_assert_eq!(&once, &twice);
        prop_assert!(once.data().iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn nearest_resampling_never_invents_classes(seed in any::<u64>(), sp in 0.4f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = random_labels(&mut rng, [5, 4, 6]);
        let down = l.resample_isotropic([sp; 3], Interpolation::Nearest).unwrap();
        let back = down.resample_isotropic([1.0; 3], Interpolation::Nearest).unwrap();
        for lab in 0..3u8 {
            if l.count(lab) == 0 {
                prop_assert_eq!(back.count(lab), 0);
            }
        }
        prop_assert!(back.labels().iter().all(|&x| x <= TUMOR));
    }

    #[test]
    fn edges_are_subsets_of_classes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = random_labels(&mut rng, [6, 5, 4]);
        let seg: bseg::Tensor<f32> = l.class_targets();
        let edges: bseg::Tensor<f32> = extract_boundary_targets(&l);
        for (e, s) in edges.data().iter().zip(seg.data()) {
            prop_assert!(*e <= *s);
        }
    }

    #[test]
    fn crops_have_requested_size(seed in any::<u64>(), size in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = random_labels(&mut rng, [7, 6, 5]);
        let img = Volume::new([7, 6, 5], [1.0; 3], vec![0.25; 210]).unwrap();
        let case = PreparedCase::new(img, l).unwrap();
        let crop = case.sample_crop(size, &mut rng).unwrap();
        prop_assert_eq!(crop.image.shape(), &[1, 1, size, size, size][..]);
        prop_assert_eq!(crop.edge_targets.shape(), &[1, 2, size, size, size][..]);
    }
}
