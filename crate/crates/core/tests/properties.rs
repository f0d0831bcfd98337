use progseg::edt::{edt_from_seeds, DistanceSource};
use progseg::loss::{dice_ce_loss, LossConfig};
use progseg::metrics::{asd, dice_score, hausdorff};
use progseg::volume::nifti;
use progseg::volume::{center_crop_or_pad, zscore};
use progseg::{Volume, VolumeKind};
use proptest::prelude::*;

fn mask_strategy() -> impl Strategy<Value = Volume> {
    ([2usize..7, 2usize..7, 1usize..5], [0.5f64..2.0, 0.5f64..2.0, 0.5f64..3.0]).prop_flat_map(|(d, s)| {
        let n = d[0] * d[1] * d[2];
        proptest::collection::vec(any::<bool>(), n).prop_map(move |bits| {
            let data = bits.iter().map(|&b| b as u8 as f64).collect();
            Volume::new(d, s, data, VolumeKind::Label).unwrap()
        })
    })
}

fn pair_strategy() -> impl Strategy<Value = (Volume, Volume)> {
    mask_strategy().prop_flat_map(|a| {
        let n = a.len();
        let b = proptest::collection::vec(any::<bool>(), n);
        (Just(a), b).prop_map(|(a, bits)| {
            let data = bits.iter().map(|&b| b as u8 as f64).collect();
            let b = a.with_data(data, VolumeKind::Label).unwrap();
            (a, b)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edt_is_zero_on_seeds_and_grows_by_at_most_one_step(m in mask_strategy()) {
        prop_assume!(m.count_nonzero() > 0);
        let seeds: Vec<bool> = m.data().iter().map(|&v| v != 0.0).collect();
        let d = edt_from_seeds(m.dims(), m.spacing(), &seeds).unwrap();
        let s = m.spacing();
        let [nx, ny, nz] = m.dims();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = m.index(x, y, z);
                    prop_assert_eq!(d[i] == 0.0, seeds[i]);
                    if x + 1 < nx { prop_assert!((d[i] - d[m.index(x + 1, y, z)]).abs() <= s[0] + 1e-9); }
                    if y + 1 < ny { prop_assert!((d[i] - d[m.index(x, y + 1, z)]).abs() <= s[1] + 1e-9); }
                    if z + 1 < nz { prop_assert!((d[i] - d[m.index(x, y, z + 1)]).abs() <= s[2] + 1e-9); }
                }
            }
        }
    }

    #[test]
    fn edt_sources_are_complementary(m in mask_strategy()) {
        let n = m.count_nonzero();
        prop_assume!(n > 0 && n < m.len());
        let to_fg = progseg::edt::edt(&m, DistanceSource::ToForeground).unwrap();
        let to_bg = progseg::edt::edt(&m, DistanceSource::ToBackground).unwrap();
        for (i, &v) in m.data().iter().enumerate() {
            let (f, b) = (to_fg.values()[i], to_bg.values()[i]);
            let ok = if v != 0.0 { f == 0.0 && b > 0.0 } else { b == 0.0 && f > 0.0 };
            prop_assert!(ok);
        }
    }

    #[test]
    fn metrics_are_symmetric((a, b) in pair_strategy()) {
        prop_assume!(a.count_nonzero() > 0 && b.count_nonzero() > 0);
        prop_assert_eq!(dice_score(&a, &b).unwrap(), dice_score(&b, &a).unwrap());
        prop_assert!((hausdorff(&a, &b).unwrap() - hausdorff(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((asd(&a, &b).unwrap() - asd(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn metrics_are_translation_invariant((a, b) in pair_strategy()) {
        prop_assume!(a.count_nonzero() > 0 && b.count_nonzero() > 0);
        // Padding by two voxels on every side shifts both masks together.
        let d = a.dims();
        let big = [d[0] + 4, d[1] + 4, d[2] + 4];
        let (pa, pb) = (center_crop_or_pad(&a, big).unwrap(), center_crop_or_pad(&b, big).unwrap());
        prop_assert_eq!(pa.count_nonzero(), a.count_nonzero());
        prop_assert!((dice_score(&pa, &pb).unwrap() - dice_score(&a, &b).unwrap()).abs() < 1e-12);
        // Out-of-grid voxels count as background, so surfaces are unchanged.
        prop_assert!((hausdorff(&pa, &pb).unwrap() - hausdorff(&a, &b).unwrap()).abs() < 1e-9);
        prop_assert!((asd(&pa, &pb).unwrap() - asd(&a, &b).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn loss_is_permutation_invariant(
        (gt, pred) in pair_strategy().prop_flat_map(|(a, _)| {
            let n = a.len();
            (Just(a), proptest::collection::vec(0.0f64..1.0, n))
        }),
        shift in 1usize..50,
    ) {
        let p = gt.with_data(pred, VolumeKind::Intensity).unwrap();
        let cfg = LossConfig::default();
        let base = dice_ce_loss(&p, &gt, &cfg).unwrap().value;
        let n = gt.len();
        let rot = |v: &Volume, kind| {
            let data = (0..n).map(|i| v.data()[(i + shift) % n]).collect();
            v.with_data(data, kind).unwrap()
        };
        let moved = dice_ce_loss(&rot(&p, VolumeKind::Intensity), &rot(&gt, VolumeKind::Label), &cfg).unwrap().value;
        prop_assert!((base - moved).abs() < 1e-12);
    }

    #[test]
    fn nifti_round_trip_is_exact(
        m in mask_strategy(),
        values in proptest::collection::vec(-1e6f64..1e6, 1..200),
    ) {
        // Header spacing and intensities are stored as float32.
        let s = m.spacing().map(|v| v as f32 as f64);
        let m = Volume::new(m.dims(), s, m.data().to_vec(), VolumeKind::Label).unwrap();
        let back = nifti::decode(&nifti::encode(&m)).unwrap();
        prop_assert_eq!(&back, &m);
        let n = m.len();
        let data = (0..n).map(|i| values[i % values.len()] as f32 as f64).collect();
        let img = m.with_data(data, VolumeKind::Intensity).unwrap();
        prop_assert_eq!(nifti::decode(&nifti::encode(&img)).unwrap(), img);
    }

    #[test]
    fn zscore_is_idempotent(values in proptest::collection::vec(-100.0f64..100.0, 8..64)) {
        let sd = {
            let m = values.iter().sum::<f64>() / values.len() as f64;
            values.iter().map(|v| (v - m).powi(2)).sum::<f64>().sqrt()
        };
        prop_assume!(sd > 1e-3);
        let v = Volume::new([values.len(), 1, 1], [1.0; 3], values, VolumeKind::Intensity).unwrap();
        let once = zscore(&v).unwrap();
        let twice = zscore(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
