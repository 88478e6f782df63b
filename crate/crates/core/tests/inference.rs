use bseg::boundary_net::{BoundaryAwareNet, NetworkConfig};
use bseg::data::{LabelVolume, Volume};
use bseg::inference::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> NetworkConfig {
    NetworkConfig {
        input_size: 8,
        base_filters: 2,
        levels: 1,
        bottleneck_blocks: 1,
    }
}

fn random_volume(seed: u64, dims: [usize; 3]) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Volume::new(dims, [1.0; 3], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap()
        .assume_normalized()
}

#[test]
fn single_window_equals_forward() {
    let net = BoundaryAwareNet::<f32>::build(small_config(), 1).unwrap();
    let v = random_volume(2, [8; 3]);
    let field = predict_volume(&net, &v, 8, DEFAULT_OVERLAP).unwrap();
    let out = net.predict(&v.to_tensor()).unwrap();
    let n = 512;
    assert_eq!(field.foreground(), &out.seg_probs.data()[..n]);
    assert_eq!(field.tumor(), &out.seg_probs.data()[n..]);
}

#[test]
fn constant_input_stitches_to_constant_interior() {
    // Windows that see the same content produce the same output; use a volume
    // where every window is identical (constant intensity) along x.
    let net = BoundaryAwareNet::<f32>::build(small_config(), 3).unwrap();
    let v = Volume::new([12, 8, 8], [1.0; 3], vec![0.3; 12 * 64]).unwrap().assume_normalized();
    let field = predict_volume(&net, &v, 8, 0.5).unwrap();
    let single = predict_volume(&net, &Volume::new([8; 3], [1.0; 3], vec![0.3; 512]).unwrap().assume_normalized(), 8, 0.5)
        .unwrap();
    // Both windows (x starts 0 and 4) are the same crop, so every voxel averages equal values.
    for z in 0..8 {
        for y in 0..8 {
            for x in 0..12 {
                let sx = if x < 4 { x } else if x >= 8 { x - 4 } else { usize::MAX };
                if sx != usize::MAX {
                    assert_eq!(field.at(x, y, z), single.at(sx, y, z));
                }
            }
        }
    }
}

#[test]
fn configuration_errors() {
    let net = BoundaryAwareNet::<f32>::build(small_config(), 1).unwrap();
    let v = random_volume(2, [8; 3]);
    assert!(predict_volume(&net, &v, 16, 0.5).is_err());
    assert!(predict_volume(&net, &v, 8, 1.0).is_err());
    let raw = Volume::new([8; 3], [1.0; 3], vec![0.0; 512]).unwrap();
    assert!(predict_volume(&net, &raw, 8, 0.5).is_err());
}

#[test]
fn small_volumes_are_padded() {
    let net = BoundaryAwareNet::<f32>::build(small_config(), 1).unwrap();
    let v = random_volume(5, [5, 6, 3]);
    let field = predict_volume(&net, &v, 8, 0.5).unwrap();
    assert_eq!(field.dims(), [5, 6, 3]);
}

#[test]
fn flip_tta_is_two_branch_mean() {
    let net = BoundaryAwareNet::<f32>::build(small_config(), 4).unwrap();
    let v = random_volume(6, [8; 3]);
    let flips = [Flip::IDENTITY, Flip { x: true, ..Flip::IDENTITY }];
    let tta = tta_predict(&net, &v, &flips, 8, 0.5).unwrap();
    assert!(tta.tta_used);
    let plain = predict_volume(&net, &v, 8, 0.5).unwrap();
    let flipped = predict_volume(&net, &flips[1].apply_volume(&v), 8, 0.5).unwrap();
    let back = flips[1].apply([8; 3], flipped.foreground());
    for i in 0..512 {
        let expected = ((plain.foreground()[i] as f64 + back[i] as f64) / 2.0) as f32;
        assert_eq!(tta.foreground()[i], expected);
    }
}

#[test]
fn flipping_twice_restores_volume() {
    let v = random_volume(7, [4, 5, 6]);
    for f in Flip::all() {
        assert_eq!(f.apply_volume(&f.apply_volume(&v)), v);
    }
}

#[test]
fn ensemble_of_constant_fields() {
    let a = PredictionField::constant([3; 3], [1.0; 3], 0.2, 0.2).unwrap();
    let b = PredictionField::constant([3; 3], [1.0; 3], 0.6, 0.6).unwrap();
    let m = ensemble_mean(&[a.clone(), b.clone()]).unwrap();
    assert!(m.foreground().iter().all(|&v| (v - 0.4).abs() < 1e-7));
    assert_eq!(m.ensemble_size, 2);
    assert_eq!(ensemble_mean(&[b, a]).unwrap(), m);
}

#[test]
fn ensemble_rejects_mixed_configs() {
    let a = BoundaryAwareNet::<f32>::build(small_config(), 1).unwrap();
    let b = BoundaryAwareNet::<f32>::build(NetworkConfig { base_filters: 4, ..small_config() }, 1).unwrap();
    let v = random_volume(2, [8; 3]);
    assert!(ensemble_predict(&[&a, &b], &v, &[Flip::IDENTITY], 8, 0.5).is_err());
}

#[test]
fn predict_case_returns_original_grid() {
    let net = BoundaryAwareNet::<f32>::build(small_config(), 1).unwrap();
    let raw = Volume::new([6, 6, 4], [1.0, 1.0, 2.0], vec![100.0; 144]).unwrap();
    let field = predict_case(&[&net], &raw, &InferenceOptions::default()).unwrap();
    assert_eq!(field.dims(), [6, 6, 4]);
    assert_eq!(field.spacing_mm(), [1.0, 1.0, 2.0]);
}

#[test]
fn metrics_report_row() {
    let l = LabelVolume::new([4, 1, 1], [1.0; 3], vec![0, 1, 2, 2]).unwrap();
    let r = MetricsReport::evaluate(&l, &l).unwrap();
    assert_eq!(r.csv_row("c0"), "c0,1,1,1");
    let other = LabelVolume::new([3, 1, 1], [1.0; 3], vec![0, 1, 2]).unwrap();
    assert!(MetricsReport::evaluate(&l, &other).is_err());
}

fn random_labels(seed: u64) -> LabelVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LabelVolume::new([8; 3], [1.0; 3], (0..512).map(|_| rng.random_range(0..3u8)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dice_is_symmetric_and_matches_set_count(a in any::<u64>(), b in any::<u64>()) {
        let (p, t) = (random_labels(a), random_labels(b));
        for (mode, member) in [(DiceMode::Kidneys, [1u8, 2]), (DiceMode::Tumor, [2u8, 2])] {
            let set = |l: &LabelVolume| -> std::collections::HashSet<usize> {
                l.labels().iter().enumerate().filter(|(_, v)| member.contains(v)).map(|(i, _)| i).collect()
            };
            let (sp, st) = (set(&p), set(&t));
            let expected = if sp.is_empty() && st.is_empty() {
                1.0
            } else {
                2.0 * sp.intersection(&st).count() as f64 / (sp.len() + st.len()) as f64
            };
            let d = dice_metric(&p, &t, mode).unwrap();
            prop_assert_eq!(d, expected);
            prop_assert_eq!(d, dice_metric(&t, &p, mode).unwrap());
        }
    }

    #[test]
    fn tumor_label_mask_is_threshold_mask(fg in prop::collection::vec(0.0f32..=1.0, 27), tu in prop::collection::vec(0.0f32..=1.0, 27), th in 0.05f64..0.95) {
        let field = PredictionField::new([3; 3], [1.0; 3], fg, tu.clone()).unwrap();
        let labels = compose_labels(&field, th).unwrap();
        for (l, t) in labels.labels().iter().zip(&tu) {
            prop_assert_eq!(*l == 2, *t as f64 >= th);
        }
    }

    #[test]
    fn ensemble_order_independent(vals in prop::collection::vec(0.0f32..=1.0, 3..6), rot in 0usize..5) {
        let fields: Vec<PredictionField> = vals.iter().map(|&v| PredictionField::constant([2; 3], [1.0; 3], v, 1.0 - v).unwrap()).collect();
        let mut rotated = fields.clone();
        rotated.rotate_left(rot % fields.len());
        prop_assert_eq!(ensemble_mean(&fields).unwrap(), ensemble_mean(&rotated).unwrap());
    }
}
